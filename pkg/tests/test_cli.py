"""End-to-end command-line tests (everything runs in-process via CliRunner)."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from graphtpp.cli import main
from graphtpp.data import read_canonical
from graphtpp.intensity import init_model_params
from graphtpp.training import TrainConfig, save_checkpoint


@pytest.fixture
def runner():
    return CliRunner()


def write_sim_config(path, **overrides):
    doc = {
        "baseline_mu": [0.4, 0.4, 0.4, 0.4],
        "excitation_alpha": [[0.05] * 4 for _ in range(4)],
        "decay_beta": 1.0,
        "horizon": 60.0,
        "num_users": 2,
        "num_items": 2,
        "seed": 3,
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def write_train_config(path, **overrides):
    doc = {
        "embedding_dim": 4,
        "sal_blocks": 1,
        "snapshots_N": 4,
        "layers_R": 1,
        "epochs": 2,
        "batch_size": 32,
        "negatives_per_event": 1,
        "dropout": 0.0,
        "learning_rate": 0.01,
        "history_max": 8,
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def make_corpus(runner, tmp_path):
    """Simulate once and split into train/test canonical files."""
    cfg = write_sim_config(tmp_path / "sim.json")
    res = runner.invoke(main, ["simulate", "--config", str(cfg), "-o", str(tmp_path)])
    assert res.exit_code == 0, res.output
    full = read_canonical(tmp_path / "events.txt")
    cut = int(len(full) * 0.8)
    lines = (tmp_path / "events.txt").read_text().splitlines()
    (tmp_path / "train.txt").write_text("\n".join(lines[: 1 + cut]) + "\n")
    (tmp_path / "test.txt").write_text("\n".join([lines[0]] + lines[1 + cut :]) + "\n")
    return tmp_path / "train.txt", tmp_path / "test.txt"


class TestHelp:
    def test_every_command_documents_itself(self, runner):
        assert runner.invoke(main, ["--help"]).exit_code == 0
        for cmd in ("ingest", "simulate", "train", "eval", "gradcheck"):
            res = runner.invoke(main, [cmd, "--help"])
            assert res.exit_code == 0, cmd
        assert "--threads" in runner.invoke(main, ["--help"]).output
        assert "--ablate-nal" in runner.invoke(main, ["eval", "--help"]).output


class TestIngest:
    def test_summary_line(self, runner, tmp_path):
        csv = tmp_path / "raw.csv"
        csv.write_text("user_id,item_id,timestamp\nalice,x,0.0\nbob,y,1.5\nalice,y,2.0\n")
        out = tmp_path / "events.txt"
        res = runner.invoke(main, ["ingest", str(csv), str(out)])
        assert res.exit_code == 0
        assert "2 users, 2 items, 3 events" in res.output
        assert len(read_canonical(out)) == 3

    def test_missing_file_exit_2(self, runner, tmp_path):
        res = runner.invoke(main, ["ingest", str(tmp_path / "nope.csv"), str(tmp_path / "o.txt")])
        assert res.exit_code == 2
        assert "nope.csv" in res.output

    def test_extra_columns_project_away(self, runner, tmp_path):
        plain = tmp_path / "plain.csv"
        extra = tmp_path / "extra.csv"
        plain.write_text("u,i,t\na,x,1.0\nb,y,2.0\n")
        extra.write_text("u,i,t,state,f1,f2\na,x,1.0,0,0.3,heavy\nb,y,2.0,1,0.9,light\n")
        out1, out2 = tmp_path / "o1.txt", tmp_path / "o2.txt"
        assert runner.invoke(main, ["ingest", str(plain), str(out1)]).exit_code == 0
        assert runner.invoke(main, ["ingest", str(extra), str(out2)]).exit_code == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_parse_error_nonzero_exit(self, runner, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("u,i,t\na,x,notatime\n")
        res = runner.invoke(main, ["ingest", str(bad), str(tmp_path / "o.txt")])
        assert res.exit_code == 2


class TestSimulate:
    def test_seeded_runs_are_byte_identical(self, runner, tmp_path):
        cfg = write_sim_config(tmp_path / "sim.json")
        for d in ("a", "b"):
            res = runner.invoke(main, ["simulate", "--config", str(cfg), "-o", str(tmp_path / d)])
            assert res.exit_code == 0
        assert (tmp_path / "a" / "events.txt").read_bytes() == (tmp_path / "b" / "events.txt").read_bytes()

    def test_unknown_key_rejected(self, runner, tmp_path):
        cfg = write_sim_config(tmp_path / "sim.json", typo_key=1)
        res = runner.invoke(main, ["simulate", "--config", str(cfg), "-o", str(tmp_path)])
        assert res.exit_code == 2
        assert "typo_key" in res.output

    def test_silent_process_gives_empty_file(self, runner, tmp_path):
        cfg = write_sim_config(
            tmp_path / "sim.json", baseline_mu=[0.0], excitation_alpha=[[0.0]], num_users=1, num_items=1
        )
        res = runner.invoke(main, ["simulate", "--config", str(cfg), "-o", str(tmp_path)])
        assert res.exit_code == 0
        assert len(read_canonical(tmp_path / "events.txt")) == 0

    def test_poisson_gaps_pass_ks(self, runner, tmp_path):
        from scipy import stats

        cfg = write_sim_config(
            tmp_path / "sim.json",
            baseline_mu=[1.0],
            excitation_alpha=[[0.0]],
            num_users=1,
            num_items=1,
            horizon=5200.0,
            seed=17,
        )
        res = runner.invoke(main, ["simulate", "--config", str(cfg), "-o", str(tmp_path)])
        assert res.exit_code == 0
        stream = read_canonical(tmp_path / "events.txt")
        assert len(stream) >= 5000
        gaps = np.diff(np.concatenate([[0.0], stream.timestamps]))[:5000]
        assert stats.kstest(gaps, "expon", args=(0, 1.0)).pvalue > 0.01


class TestTrain:
    def test_artifacts_and_determinism(self, runner, tmp_path):
        train_file, _ = make_corpus(runner, tmp_path)
        cfg = write_train_config(tmp_path / "train.json")
        for d in ("r1", "r2"):
            res = runner.invoke(
                main, ["train", "--config", str(cfg), "--train-file", str(train_file), "-o", str(tmp_path / d)]
            )
            assert res.exit_code == 0, res.output
        r1, r2 = tmp_path / "r1", tmp_path / "r2"
        for name in ("checkpoint.bin", "loss_trace.csv", "resolved_config.json"):
            assert (r1 / name).read_bytes() == (r2 / name).read_bytes(), name
        assert (r1 / "loss_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        resolved = json.loads((r1 / "resolved_config.json").read_text())
        assert resolved["embedding_dim"] == 4 and resolved["epochs"] == 2

    def test_flag_overrides_config(self, runner, tmp_path):
        train_file, _ = make_corpus(runner, tmp_path)
        cfg = write_train_config(tmp_path / "train.json", epochs=50)
        res = runner.invoke(
            main,
            ["train", "--config", str(cfg), "--train-file", str(train_file), "--epochs", "1", "-o", str(tmp_path / "r")],
        )
        assert res.exit_code == 0
        assert json.loads((tmp_path / "r" / "resolved_config.json").read_text())["epochs"] == 1
        assert len((tmp_path / "r" / "loss_trace.csv").read_text().splitlines()) == 2

    def test_divergence_exit_1_with_report(self, runner, tmp_path):
        train_file, _ = make_corpus(runner, tmp_path)
        cfg = write_train_config(tmp_path / "train.json", learning_rate=1e300, weight_decay=0.0, batch_size=8)
        with np.errstate(over="ignore", invalid="ignore"):
            res = runner.invoke(
                main, ["train", "--config", str(cfg), "--train-file", str(train_file), "-o", str(tmp_path / "r")]
            )
        assert res.exit_code == 1
        report = json.loads((tmp_path / "r" / "error_report.json").read_text())
        assert "non-finite" in report["error"]
        assert (tmp_path / "r" / "checkpoint.bin").exists()

    def test_missing_train_file_exit_2(self, runner, tmp_path):
        res = runner.invoke(main, ["train", "-o", str(tmp_path)])
        assert res.exit_code == 2


class TestEval:
    def test_metrics_and_figure(self, runner, tmp_path):
        train_file, test_file = make_corpus(runner, tmp_path)
        cfg = write_train_config(tmp_path / "train.json")
        assert (
            runner.invoke(
                main, ["train", "--config", str(cfg), "--train-file", str(train_file), "-o", str(tmp_path / "run")]
            ).exit_code
            == 0
        )
        args = [
            "eval",
            "--checkpoint",
            str(tmp_path / "run" / "checkpoint.bin"),
            "--train-file",
            str(train_file),
            "--test-file",
            str(test_file),
        ]
        res = runner.invoke(main, args + ["-o", str(tmp_path / "ev")])
        assert res.exit_code == 0, res.output
        metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert set(metrics) == {"mrr", "recall@10", "recall@20", "rmse", "n_events", "truncation_warnings"}
        assert (tmp_path / "ev" / "rank_histogram.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        audit = (tmp_path / "ev" / "event_audit.csv").read_text().splitlines()
        assert audit[0] == "event_index,user,true_item,rank,predicted_time,true_time"
        assert len(audit) == metrics["n_events"] + 1
        # deterministic rerun
        res2 = runner.invoke(main, args + ["-o", str(tmp_path / "ev2")])
        assert res2.exit_code == 0
        assert (tmp_path / "ev" / "metrics.json").read_bytes() == (tmp_path / "ev2" / "metrics.json").read_bytes()
        # ablation override still produces a valid report
        res3 = runner.invoke(main, args + ["-o", str(tmp_path / "ev3"), "--ablate-sal"])
        assert res3.exit_code == 0
        assert json.loads((tmp_path / "ev3" / "metrics.json").read_text())["n_events"] == metrics["n_events"]

    def test_perfect_stub_checkpoint(self, runner, tmp_path):
        # hand-built weights: every user aligned with item 0, other items zero
        params = init_model_params(2, 3, embed_dim=4, sal_blocks=1, seed=0, as_parameters=True)
        params.node_weights.value[:] = 0.0
        params.node_weights.value[0, 0] = 1.0
        params.node_weights.value[1, 0] = 1.0
        params.node_weights.value[2, 0] = 1.0  # item 0 row
        cfg = TrainConfig(
            embedding_dim=4, sal_blocks=1, snapshots_N=4, layers_R=1, ablate_nal=True, ablate_sal=True
        )
        save_checkpoint(tmp_path / "stub.ckpt", params, cfg)
        (tmp_path / "train.txt").write_text("# users=2 items=3\n0 0 1.0\n1 0 2.0\n")
        (tmp_path / "test.txt").write_text("# users=2 items=3\n0 0 3.0\n1 0 4.0\n0 0 5.0\n")
        res = runner.invoke(
            main,
            [
                "eval",
                "--checkpoint",
                str(tmp_path / "stub.ckpt"),
                "--train-file",
                str(tmp_path / "train.txt"),
                "--test-file",
                str(tmp_path / "test.txt"),
                "-o",
                str(tmp_path / "ev"),
            ],
        )
        assert res.exit_code == 0, res.output
        assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["mrr"] == 1.0

    def test_missing_checkpoint_exit_2(self, runner, tmp_path):
        (tmp_path / "t.txt").write_text("# users=1 items=1\n0 0 1.0\n")
        res = runner.invoke(
            main,
            [
                "eval",
                "--checkpoint",
                str(tmp_path / "missing.ckpt"),
                "--train-file",
                str(tmp_path / "t.txt"),
                "--test-file",
                str(tmp_path / "t.txt"),
            ],
        )
        assert res.exit_code == 2

    def test_garbage_checkpoint_versioned_error(self, runner, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNKJUNK")
        (tmp_path / "t.txt").write_text("# users=1 items=1\n0 0 1.0\n")
        res = runner.invoke(
            main,
            [
                "eval",
                "--checkpoint",
                str(bad),
                "--train-file",
                str(tmp_path / "t.txt"),
                "--test-file",
                str(tmp_path / "t.txt"),
            ],
        )
        assert res.exit_code == 2
        assert "checkpoint" in res.output


class TestGradcheck:
    def test_default_toy_passes(self, runner, tmp_path):
        res = runner.invoke(main, ["gradcheck", "-o", str(tmp_path)])
        assert res.exit_code == 0, res.output
        assert "gradient check passed" in res.output
        report = json.loads((tmp_path / "gradcheck_report.json").read_text())
        assert report["max_rel_err"] < 1e-3

    def test_corrupt_hook_fails(self, runner, tmp_path):
        res = runner.invoke(main, ["gradcheck", "-o", str(tmp_path), "--corrupt"])
        assert res.exit_code == 1

    def test_zero_sample_coords(self, runner, tmp_path):
        res = runner.invoke(main, ["gradcheck", "-o", str(tmp_path), "--sample-coords", "0"])
        assert res.exit_code == 0
        assert json.loads((tmp_path / "gradcheck_report.json").read_text())["coords_checked"] == 0


class TestOutdirEnv:
    def test_env_var_override(self, runner, tmp_path):
        target = tmp_path / "from_env"
        res = runner.invoke(
            main, ["gradcheck", "--sample-coords", "1"], env={"GRAPHTPP_OUTDIR": str(target)}
        )
        assert res.exit_code == 0
        assert (target / "gradcheck_report.json").exists()
