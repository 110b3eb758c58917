"""Behavioral acceptance gate: eight end-to-end criteria, one test each.

Each test prints a single ACCEPTANCE line (visible with ``pytest -s``) and
enforces its own wall-clock budget.  Criterion 7 trains three model variants
on a synthetic burst stream and takes a few minutes; everything else is fast.
"""

import json
import time

import numpy as np
from scipy import stats

from graphtpp import autodiff as ad
from graphtpp.data import EventStream
from graphtpp.evaluation import evaluate, predict_time
from graphtpp.hawkes import (
    HawkesParams,
    simulate_hawkes,
    stream_event_types,
    total_compensator_gaps,
)
from graphtpp.intensity import (
    ConstantIntensity,
    IntensityModel,
    PiecewiseConstantIntensity,
    init_model_params,
    log_likelihood,
)
from graphtpp.snapshots import SnapshotGraph, aggregate
from graphtpp.training import (
    TrainConfig,
    grad_check,
    load_checkpoint,
    model_from_config,
    save_checkpoint,
    train,
)


def _report(n, label, ok=True):
    print(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} - {label}")
    assert ok, f"criterion {n}: {label}"


def _random_stream(rng, num_users, num_items, n_events, horizon):
    times = np.sort(rng.uniform(0, horizon * 0.95, size=n_events))
    return EventStream(
        rng.integers(0, num_users, size=n_events),
        rng.integers(0, num_items, size=n_events),
        times,
        num_users=num_users,
        num_items=num_items,
        horizon_T=horizon,
    )


class TestAcceptanceCriteria:
    def test_1_aggregation_oracle(self):
        # 200 random bipartite graphs vs the dense block-operator power average
        t0 = time.monotonic()
        rng = np.random.default_rng(2026)
        worst = 0.0
        for _ in range(200):
            nu = int(rng.integers(1, 26))
            nv = int(rng.integers(1, 26))
            layers = int(rng.integers(0, 6))
            adj = rng.random((nu, nv)) < rng.uniform(0.05, 0.6)
            graph = SnapshotGraph(
                snapshot_index=0,
                user_neighbors=[np.flatnonzero(adj[u]).astype(np.intp) for u in range(nu)],
                item_neighbors=[np.flatnonzero(adj[:, v]).astype(np.intp) for v in range(nv)],
                user_degree=adj.sum(axis=1).astype(np.float64),
                item_degree=adj.sum(axis=0).astype(np.float64),
            )
            dim = int(rng.integers(1, 5))
            eu = rng.standard_normal((nu, dim))
            ev = rng.standard_normal((nv, dim))
            got = aggregate(graph, eu, ev, layers)

            bi = np.zeros((nu, nv))
            uu, vv = adj.nonzero()
            if uu.size:
                bi[uu, vv] = 1.0 / np.sqrt(adj.sum(axis=1)[uu] * adj.sum(axis=0)[vv])
            op = np.block([[np.zeros((nu, nu)), bi], [bi.T, np.zeros((nv, nv))]])
            acc = np.concatenate([eu, ev])
            cur = acc.copy()
            for _ in range(layers):
                cur = op @ cur
                acc = acc + cur
            acc /= layers + 1
            worst = max(
                worst,
                float(np.abs(got.user_static - acc[:nu]).max(initial=0.0)),
                float(np.abs(got.item_static - acc[nu:]).max(initial=0.0)),
            )
        elapsed = time.monotonic() - t0
        assert worst < 1e-10, worst
        assert elapsed < 10.0, elapsed
        _report(1, f"aggregation oracle (max |d|={worst:.2e}, {elapsed:.1f}s)")

    def test_2_gradient_suite(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(7)
        stream = _random_stream(rng, 3, 4, 12, 10.0)
        params = init_model_params(3, 4, embed_dim=8, sal_blocks=1, seed=5, as_parameters=True)
        report = grad_check(params, stream, sample_coords=8, seed=0)
        elapsed = time.monotonic() - t0
        assert report.max_rel_err < 1e-3, report.per_tensor
        assert all(err < 1e-3 for err in report.per_tensor.values())
        assert elapsed < 60.0, elapsed
        _report(2, f"gradient suite (max rel err={report.max_rel_err:.2e}, {elapsed:.1f}s)")

    def test_3_softmax_invariants(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(100):
            nu = int(rng.integers(1, 4))
            nv = int(rng.integers(2, 5))
            stream = _random_stream(rng, nu, nv, int(rng.integers(3, 9)), 8.0)
            params = init_model_params(
                nu, nv, embed_dim=4, sal_blocks=1, seed=int(rng.integers(1 << 30))
            )
            model = IntensityModel(params, stream, num_snapshots=4, nal_layers=1, history_max=6)
            for _ in range(10):
                u = int(rng.integers(nu))
                t = float(rng.uniform(0, 9.0))
                # normalization over the full candidate support
                assert abs(model.total_intensity(t) - 1.0) < 1e-9
                scores = model.raw_intensities_for_user(u, t)
                # shift invariance: softmax(s + c) ranks exactly like s
                shifted = np.exp((scores + 7.5) - (scores + 7.5).max())
                shifted /= shifted.sum()
                base_rank = np.lexsort((np.arange(nv), -scores))
                assert np.array_equal(base_rank, np.lexsort((np.arange(nv), -shifted)))
                # argmax equivalence: raw scores, exp scores, normalized values
                top = int(base_rank[0])
                runner = int(base_rank[1])
                assert np.exp(scores[top]) >= np.exp(scores[runner])
                p_top = model.normalized_intensity(u, top, t)
                p_run = model.normalized_intensity(u, runner, t)
                assert p_top >= p_run
                checked += 1
        elapsed = time.monotonic() - t0
        assert checked == 1000
        assert elapsed < 10.0, elapsed
        _report(3, f"softmax invariants on {checked} instances ({elapsed:.1f}s)")

    def test_4_time_prediction_oracle(self):
        t0 = time.monotonic()
        for c in (0.5, 1.0, 2.0, 5.0):
            for t_from in (0.0, 3.0):
                est = predict_time(ConstantIntensity(c), 0, 0, t_from)
                rel = abs(est.value - (t_from + 1.0 / c)) / (t_from + 1.0 / c)
                assert rel < 1e-3, (c, t_from, rel)
                assert not est.truncated
        # piecewise stub vs a dense midpoint-Riemann oracle
        stub = PiecewiseConstantIntensity([0.0, 1.0], [1.0, 3.0])
        est = predict_time(stub, 0, 0, 0.0)
        grid = np.linspace(0.0, 40.0, 1_000_001)
        mids = 0.5 * (grid[1:] + grid[:-1])
        lam = np.where(mids < 1.0, 1.0, 3.0)
        dt = np.diff(grid)
        integral = np.concatenate([[0.0], np.cumsum(lam * dt)])
        surv_mid = np.exp(-0.5 * (integral[1:] + integral[:-1]))
        oracle = float(np.sum(mids * np.where(mids < 1.0, 1.0, 3.0) * surv_mid * dt))
        rel = abs(est.value - oracle) / oracle
        elapsed = time.monotonic() - t0
        assert rel < 1e-3, rel
        assert elapsed < 30.0, elapsed
        _report(4, f"time-prediction oracle (piecewise rel err={rel:.2e}, {elapsed:.1f}s)")

    def test_5_likelihood_oracle(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(3)
        horizon = 12.0
        times = np.sort(rng.uniform(0, horizon * 0.9, size=7))
        stream = EventStream(
            np.zeros(7, dtype=np.intp), np.zeros(7, dtype=np.intp), times,
            num_users=1, num_items=1, horizon_T=horizon,
        )

        class SinTotal:
            """Constant pair intensity, smoothly varying total."""

            def pair_log_intensity(self, u, v, t):
                return float(np.log(0.7))

            def total_intensity(self, t):
                return 2.0 + np.sin(t)

        closed = 7 * float(np.log(0.7)) - (2.0 * horizon - np.cos(horizon) + 1.0)
        estimates = np.array(
            [log_likelihood(SinTotal(), stream, mc_samples_per_gap=64, seed=s).total for s in range(20)]
        )
        stderr = float(estimates.std(ddof=1) / np.sqrt(20))
        gap = abs(float(estimates.mean()) - closed)
        assert gap <= 3.0 * stderr, (gap, stderr)

        # constant stub: the MC estimator is exact, so the match is closed-form
        const_stream = stream
        const = ConstantIntensity(0.7)
        exact = 7 * float(np.log(0.7)) - 0.7 * horizon
        for s in range(20):
            est = log_likelihood(const, const_stream, mc_samples_per_gap=4, seed=s).total
            assert abs(est - exact) < 1e-9

        # error decays as samples^(-1/2)
        truth = 2.0 * horizon - np.cos(horizon) + 1.0
        mcs = [8, 32, 128, 512]
        rmse = []
        for mc in mcs:
            errs = [
                log_likelihood(SinTotal(), stream, mc_samples_per_gap=mc, seed=s).integral_term - truth
                for s in range(60)
            ]
            rmse.append(float(np.sqrt(np.mean(np.square(errs)))))
        slope = float(np.polyfit(np.log(mcs), np.log(rmse), 1)[0])
        elapsed = time.monotonic() - t0
        assert abs(slope + 0.5) < 0.15, slope
        assert elapsed < 60.0, elapsed
        _report(5, f"likelihood oracle (3-sigma match, slope={slope:.3f}, {elapsed:.1f}s)")

    def test_6_simulator_validity(self):
        t0 = time.monotonic()
        params = HawkesParams(
            np.full(6, 0.5), np.full((6, 6), 0.03), 1.5, num_users=2, num_items=3
        )
        stream = simulate_hawkes(params, 1600.0, seed=21)
        assert len(stream) >= 5000, len(stream)
        types = stream_event_types(stream)[:5000]
        gaps = total_compensator_gaps(params, types, stream.timestamps[:5000])
        p = float(stats.kstest(gaps, "expon").pvalue)
        elapsed = time.monotonic() - t0
        assert p > 0.01, p
        _report(6, f"simulator validity (KS p={p:.3f} on 5000 events, {elapsed:.1f}s)")

    # ------------------------------------------------------------------
    # criterion 7: end-to-end synthetic behavior
    # ------------------------------------------------------------------

    N_USERS, N_ITEMS = 4, 5
    SELF_EXC = 1.3
    DECAY = 2.0
    DATA_SEED = 0
    TRAIN_SEED = 0
    EPOCHS = 30

    def _rotating_mains_mu(self, phase):
        """Each user favors two equal-rate items; the pair rotates mid-train."""
        mu = np.zeros((self.N_USERS, self.N_ITEMS))
        for u in range(self.N_USERS):
            a, b = (u + 2, u + 3) if phase else (u, u + 1)
            mu[u, a % self.N_ITEMS] = mu[u, b % self.N_ITEMS] = 0.20
        return mu.ravel()

    def _synthetic_corpus(self, n_early=1100, n_late=900, n_test=500):
        exc = np.zeros((20, 20))
        np.fill_diagonal(exc, self.SELF_EXC)
        p1 = HawkesParams(self._rotating_mains_mu(0), exc, self.DECAY, num_users=4, num_items=5)
        p2 = HawkesParams(self._rotating_mains_mu(1), exc, self.DECAY, num_users=4, num_items=5)
        s1 = simulate_hawkes(p1, 400.0, seed=self.DATA_SEED)
        s2 = simulate_hawkes(p2, 500.0, seed=self.DATA_SEED + 1)
        assert len(s1) >= n_early and len(s2) >= n_late + n_test
        t1 = float(s1.timestamps[n_early - 1]) * (1 + 1e-9)
        k = n_late + n_test
        users = np.concatenate([s1.user_ids[:n_early], s2.user_ids[:k]])
        items = np.concatenate([s1.item_ids[:n_early], s2.item_ids[:k]])
        times = np.concatenate([s1.timestamps[:n_early], s2.timestamps[:k] + t1])
        n_train = n_early + n_late
        train_s = EventStream(
            users[:n_train], items[:n_train], times[:n_train],
            num_users=4, num_items=5, horizon_T=float(times[n_train - 1]) * (1 + 1e-9),
        )
        test_s = EventStream(
            users[n_train:], items[n_train:], times[n_train:],
            num_users=4, num_items=5, horizon_T=float(times[-1]) * (1 + 1e-9),
        )
        return train_s, test_s

    def _uniform_ranker_mrr(self, test_s):
        rng = np.random.default_rng(0)
        rr = []
        for v in test_s.item_ids:
            order = rng.permutation(self.N_ITEMS)
            rr.append(1.0 / (int(np.where(order == v)[0][0]) + 1))
        return float(np.mean(rr))

    def test_7_end_to_end_synthetic(self):
        t0 = time.monotonic()
        train_s, test_s = self._synthetic_corpus()
        assert len(train_s) == 2000 and len(test_s) == 500
        cfg = TrainConfig(
            embedding_dim=16, attention_dim=16, sal_blocks=1, snapshots_N=16,
            layers_R=1, epochs=self.EPOCHS, batch_size=256, mc_samples_per_gap=2,
            negatives_per_event=4, dropout=0.0, learning_rate=0.01,
            weight_decay=1e-5, history_max=8, seed=self.TRAIN_SEED,
        )
        mrr = {}
        for name, overrides in (
            ("full", {}),
            ("no_nal", {"ablate_nal": True}),
            ("no_sal", {"ablate_sal": True}),
        ):
            from dataclasses import replace

            variant = replace(cfg, **overrides)
            result = train(variant, train_s)
            model = model_from_config(result.params, train_s, variant)
            mrr[name] = evaluate(model, test_s, k_list=(10,), seed=0).mrr
        uniform = self._uniform_ranker_mrr(test_s)
        elapsed = time.monotonic() - t0
        assert mrr["full"] >= 1.5 * uniform, (mrr, uniform)
        assert mrr["full"] > mrr["no_nal"], mrr
        assert mrr["full"] > mrr["no_sal"], mrr
        assert elapsed < 900.0, elapsed
        _report(
            7,
            "end-to-end synthetic (full={full:.3f}, no_nal={no_nal:.3f}, "
            "no_sal={no_sal:.3f}, uniform={u:.3f}, {s:.0f}s)".format(u=uniform, s=elapsed, **mrr),
        )

    def test_8_determinism(self, tmp_path):
        t0 = time.monotonic()
        rng = np.random.default_rng(31)
        stream = _random_stream(rng, 3, 4, 40, 20.0)
        cut = 30
        train_s = EventStream(
            stream.user_ids[:cut], stream.item_ids[:cut], stream.timestamps[:cut],
            num_users=3, num_items=4,
            horizon_T=float(stream.timestamps[cut - 1]) * (1 + 1e-9),
        )
        test_s = EventStream(
            stream.user_ids[cut:], stream.item_ids[cut:], stream.timestamps[cut:],
            num_users=3, num_items=4, horizon_T=stream.horizon_T,
        )
        cfg = TrainConfig(
            embedding_dim=8, attention_dim=8, sal_blocks=1, snapshots_N=4, layers_R=1,
            epochs=2, batch_size=16, mc_samples_per_gap=1, negatives_per_event=2,
            dropout=0.5, learning_rate=0.01, history_max=6, seed=9,
        )
        blobs, traces, metrics = [], [], []
        for run in range(2):
            result = train(cfg, train_s)
            path = tmp_path / f"run{run}.ckpt"
            save_checkpoint(path, result.params, cfg)
            blobs.append(path.read_bytes())
            traces.append(result.loss_trace)
            model = model_from_config(result.params, train_s, cfg)
            report = evaluate(model, test_s, k_list=(10, 20), seed=0)
            metrics.append(json.dumps(report.to_json_dict(), sort_keys=True))
        elapsed = time.monotonic() - t0
        assert blobs[0] == blobs[1]
        assert traces[0] == traces[1]
        assert metrics[0] == metrics[1]
        # and the checkpoint container itself round-trips byte-identically
        params2, cfg2, _ = load_checkpoint(tmp_path / "run0.ckpt")
        save_checkpoint(tmp_path / "resaved.ckpt", params2, cfg2)
        assert (tmp_path / "resaved.ckpt").read_bytes() == blobs[0]
        _report(8, f"determinism (checkpoints/traces/metrics byte-identical, {elapsed:.1f}s)")
