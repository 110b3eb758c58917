"""Node table initialization and time-embedding evaluation."""

import math

import numpy as np
import pytest

from graphtpp import autodiff as ad
from graphtpp.embeddings import (
    TimeEmbeddingParams,
    init_node_embeddings,
    init_time_embedding,
    time_embedding,
    time_embedding_rows,
    time_embedding_rows_tape,
)


class TestNodeTable:
    def test_deterministic_under_seed(self):
        a = init_node_embeddings(5, 7, 8, seed=3)
        b = init_node_embeddings(5, 7, 8, seed=3)
        np.testing.assert_array_equal(a.weights, b.weights)
        c = init_node_embeddings(5, 7, 8, seed=4)
        assert not np.array_equal(a.weights, c.weights)

    def test_row_norm_concentration(self):
        table = init_node_embeddings(1000, 0, 128, seed=0)
        norms = np.linalg.norm(table.weights, axis=1)
        assert 0.8 < norms.mean() < 1.2

    def test_zero_users(self):
        table = init_node_embeddings(0, 4, 6, seed=1)
        assert table.user_rows.shape == (0, 6)
        assert table.item_rows.shape == (4, 6)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            init_node_embeddings(2, 2, 7, seed=0)
        with pytest.raises(ValueError):
            init_node_embeddings(2, 2, 0, seed=0)

    def test_row_views_partition_table(self):
        table = init_node_embeddings(3, 4, 4, seed=2)
        np.testing.assert_array_equal(np.vstack([table.user_rows, table.item_rows]), table.weights)


class TestTimeEmbedding:
    def test_zero_phase(self):
        p = init_time_embedding(6)
        out = time_embedding(p, 5.0, 5.0, 0)
        np.testing.assert_allclose(out[0::2], 1.0)  # odd 1-based dims: cos(0)
        np.testing.assert_allclose(out[1::2], 0.0)  # even 1-based dims: sin(0)

    def test_bounded(self):
        rng = np.random.default_rng(50)
        p = init_time_embedding(16)
        for _ in range(200):
            t_x = float(rng.uniform(0, 100))
            t = t_x + float(rng.uniform(0, 100))
            out = time_embedding(p, t, t_x, int(rng.integers(0, 500)))
            assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_zero_frequency_positional_oracle(self):
        p = TimeEmbeddingParams(np.zeros(4), 4)
        out = time_embedding(p, 9.0, 2.0, 3)
        want = np.array(
            [
                math.cos(3 / 10000**0.0),
                math.sin(3 / 10000**0.5),
                math.cos(3 / 10000**0.5),
                math.sin(3 / 10000**1.0),
            ]
        )
        np.testing.assert_allclose(out, want, atol=1e-15)

    def test_depends_only_on_elapsed_time(self):
        p = init_time_embedding(8)
        base = time_embedding(p, 7.5, 3.25, 4)
        for shift in [1.0, 13.77, 1e4]:
            np.testing.assert_allclose(time_embedding(p, 7.5 + shift, 3.25 + shift, 4), base, atol=1e-12)

    def test_t_before_anchor_rejected(self):
        p = init_time_embedding(4)
        with pytest.raises(ValueError):
            time_embedding(p, 1.0, 2.0, 0)
        with pytest.raises(ValueError):
            time_embedding_rows(p, 1.0, np.array([0.5, 2.0]), np.array([1, 2]))
        with pytest.raises(ValueError):
            time_embedding(p, 3.0, 2.0, -1)

    def test_rows_match_scalar(self):
        rng = np.random.default_rng(51)
        p = init_time_embedding(10)
        t = 40.0
        t_x = np.sort(rng.uniform(0, 39, size=6))
        h = rng.integers(1, 9, size=6)
        rows = time_embedding_rows(p, t, t_x, h)
        for n in range(6):
            np.testing.assert_allclose(rows[n], time_embedding(p, t, float(t_x[n]), int(h[n])), atol=1e-14)

    def test_geometric_init_spans_decades(self):
        p = init_time_embedding(8)
        assert p.omega[0] == 1.0
        assert p.omega[-1] == pytest.approx(10000.0 ** (-7 / 8))
        assert np.all(np.diff(p.omega) < 0)


class TestTimeEmbeddingTape:
    def test_matches_numpy(self):
        rng = np.random.default_rng(52)
        p = init_time_embedding(12)
        t_x = np.sort(rng.uniform(0, 9, size=5))
        h = rng.integers(1, 20, size=5)
        got = time_embedding_rows_tape(ad.Tensor(p.omega), 10.0, t_x, h, 12)
        np.testing.assert_allclose(got.value, time_embedding_rows(p, 10.0, t_x, h), atol=1e-14)

    def test_omega_gradient_matches_fd(self):
        # arguments picked away from trig extrema so relative error is meaningful
        omega0 = np.array([0.9, 0.37, 1.7, 0.23])
        t_x = np.array([1.3, 2.1])
        h = np.array([1, 2])
        t = 3.0
        weights = np.array([[0.7, -1.1, 0.4, 0.9], [0.3, 0.8, -0.5, 1.2]])

        def loss_value(om):
            p = TimeEmbeddingParams(om, 4)
            return float(np.sum(weights * time_embedding_rows(p, t, t_x, h)))

        omega = ad.Parameter(omega0.copy(), name="omega")
        out = time_embedding_rows_tape(omega, t, t_x, h, 4)
        ad.tsum(ad.mul(out, ad.Tensor(weights))).backward()
        eps = 1e-4
        for i in range(4):
            bumped = omega0.copy()
            bumped[i] += eps
            hi = loss_value(bumped)
            bumped[i] -= 2 * eps
            lo = loss_value(bumped)
            want = (hi - lo) / (2 * eps)
            assert abs(omega.grad[i] - want) / max(abs(want), 1e-8) < 1e-5
