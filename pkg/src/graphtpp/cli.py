"""Command-line entry point: reproducible runs driven by a JSON config.

Commands mirror the library layers — ``ingest`` (raw CSV to canonical events),
``simulate`` (multivariate Hawkes streams), ``train`` (maximum-likelihood fit
with checkpoint, loss trace, and loss-curve figure), ``eval`` (ranking/time
metrics with an audit CSV and rank histogram), ``gradcheck`` (finite-difference
gradient verification).

Exit codes: 0 success, 1 check failure (divergence, failed gradient check,
capped simulation), 2 I/O or argument errors.  Config files are strict: any
key the target command does not understand is rejected.  Heavy imports happen
inside the command bodies so that ``--threads`` can pin the BLAS pool size
before numpy loads.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import click


class CliError(click.ClickException):
    """Argument/IO-level failure (exit code 2)."""

    exit_code = 2


SIMULATE_KEYS = {
    "baseline_mu",
    "excitation_alpha",
    "decay_beta",
    "num_users",
    "num_items",
    "horizon",
    "max_events",
    "seed",
}


def _train_config_keys():
    import dataclasses

    from .training import TrainConfig

    return {f.name for f in dataclasses.fields(TrainConfig)}


def _load_config(path, allowed) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}")
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise CliError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return doc


def _resolve_outdir(outdir) -> Path:
    base = outdir or os.environ.get("GRAPHTPP_OUTDIR") or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(outdir: Path, payload: dict) -> None:
    (outdir / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _build_train_config(doc: dict, overrides: dict):
    from .training import TrainConfig

    merged = {k: v for k, v in doc.items() if k in _train_config_keys()}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training configuration: {exc}")


def _read_stream(path):
    from .data import read_canonical

    try:
        return read_canonical(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load events from {path}: {exc}")


def _render_loss_curve(path, trace) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(range(len(trace)), trace, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("negative log-likelihood")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _render_rank_histogram(path, ranks, num_candidates: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(ranks, bins=range(1, num_candidates + 2), align="left", rwidth=0.85)
    ax.set_xlabel("rank of true item")
    ax.set_ylabel("events")
    ax.set_title("test ranking distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@click.group()
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="BLAS/OpenMP thread cap; 1 gives the deterministic single-threaded mode.",
)
def main(threads: int) -> None:
    """Graph-aware temporal point process toolkit."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


@main.command()
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("output_path", type=click.Path(dir_okay=False))
def ingest(input_csv, output_path):
    """Convert an interaction CSV into the canonical event format."""
    from .data import parse_jodie_csv, serialize_canonical

    try:
        stream = parse_jodie_csv(input_csv)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc))
    serialize_canonical(stream, output_path)
    click.echo(
        f"{stream.num_users} users, {stream.num_items} items, "
        f"{len(stream)} events, horizon {stream.horizon_T:.9g}"
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--outdir", default=None, help="Output directory (or $GRAPHTPP_OUTDIR).")
@click.option("--output", "filename", default="events.txt", show_default=True, help="Event file name.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def simulate(config_path, outdir, filename, seed):
    """Simulate a multivariate Hawkes interaction stream."""
    import numpy as np

    from .data import serialize_canonical
    from .hawkes import CappedStreamError, HawkesParams, simulate_hawkes

    doc = _load_config(config_path, SIMULATE_KEYS)
    for key in ("baseline_mu", "excitation_alpha", "decay_beta", "horizon"):
        if key not in doc:
            raise CliError(f"{config_path}: missing required key {key}")
    try:
        params = HawkesParams(
            np.asarray(doc["baseline_mu"], dtype=np.float64),
            np.asarray(doc["excitation_alpha"], dtype=np.float64),
            float(doc["decay_beta"]),
            num_users=doc.get("num_users"),
            num_items=doc.get("num_items"),
        )
    except ValueError as exc:
        raise CliError(f"bad process parameters: {exc}")
    seed = doc.get("seed", 0) if seed is None else seed
    out = _resolve_outdir(outdir)
    try:
        kwargs = {"max_events": int(doc["max_events"])} if "max_events" in doc else {}
        stream = simulate_hawkes(params, float(doc["horizon"]), seed, **kwargs)
    except CappedStreamError as exc:
        raise click.ClickException(str(exc))
    target = out / filename
    serialize_canonical(stream, target)
    _echo_config(out, {**doc, "seed": seed})
    click.echo(f"simulated {len(stream)} events over horizon {float(doc['horizon']):g} into {target}")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--train-file", "train_file", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--outdir", default=None, help="Output directory (or $GRAPHTPP_OUTDIR).")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--ablate-nal/--no-ablate-nal", default=None, help="Drop the neighbor aggregation.")
@click.option("--ablate-sal/--no-ablate-sal", default=None, help="Drop the dynamic (attention) term.")
def train(config_path, train_file, outdir, seed, epochs, learning_rate, ablate_nal, ablate_sal):
    """Fit the model by maximum likelihood; writes checkpoint, loss trace CSV,
    and a loss-curve figure."""
    from dataclasses import asdict

    from .training import TrainingDivergedError, save_checkpoint, train as run_train, write_loss_trace

    doc = _load_config(config_path, _train_config_keys() | {"train_file"}) if config_path else {}
    train_file = train_file or doc.get("train_file")
    if not train_file:
        raise CliError("no training events: pass --train-file or set train_file in the config")
    overrides = {
        "seed": seed,
        "epochs": epochs,
        "learning_rate": learning_rate,
        "ablate_nal": ablate_nal,
        "ablate_sal": ablate_sal,
    }
    config = _build_train_config(doc, overrides)
    stream = _read_stream(train_file)
    out = _resolve_outdir(outdir)
    _echo_config(out, {**asdict(config), "train_file": str(train_file)})
    try:
        result = run_train(config, stream)
    except TrainingDivergedError as exc:
        save_checkpoint(out / "checkpoint.bin", exc.params, config)
        write_loss_trace(out / "loss_trace.csv", exc.loss_trace)
        (out / "error_report.json").write_text(
            json.dumps({"error": str(exc), "epoch": exc.epoch, "completed_epochs": len(exc.loss_trace)}, indent=2)
            + "\n"
        )
        raise click.ClickException(f"{exc} — last finite checkpoint saved to {out / 'checkpoint.bin'}")
    except ValueError as exc:
        raise CliError(str(exc))
    save_checkpoint(out / "checkpoint.bin", result.params, config)
    write_loss_trace(out / "loss_trace.csv", result.loss_trace)
    _render_loss_curve(out / "loss_curve.png", result.loss_trace)
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    click.echo(f"trained {config.epochs} epochs on {len(stream)} events; final loss {final:.6g}")
    click.echo(f"checkpoint: {out / 'checkpoint.bin'}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--train-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--test-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--outdir", default=None, help="Output directory (or $GRAPHTPP_OUTDIR).")
@click.option("-k", "k_list", type=int, multiple=True, default=(10, 20), show_default=True)
@click.option("--candidate-cap", type=int, default=None, help="Rank against a sampled candidate subset.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for candidate sampling.")
@click.option("--ablate-nal/--no-ablate-nal", default=None, help="Override the checkpoint's setting.")
@click.option("--ablate-sal/--no-ablate-sal", default=None, help="Override the checkpoint's setting.")
def eval_cmd(checkpoint_path, train_file, test_file, outdir, k_list, candidate_cap, seed, ablate_nal, ablate_sal):
    """Rank and time-predict every test event; writes metrics JSON, a per-event
    audit CSV, and a rank-histogram figure."""
    from dataclasses import asdict, replace

    from .evaluation import evaluate, write_event_audit
    from .training import load_checkpoint, model_from_config

    try:
        params, config, _ = load_checkpoint(checkpoint_path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}")
    if ablate_nal is not None:
        config = replace(config, ablate_nal=ablate_nal)
    if ablate_sal is not None:
        config = replace(config, ablate_sal=ablate_sal)
    train_stream = _read_stream(train_file)
    test_stream = _read_stream(test_file)
    out = _resolve_outdir(outdir)
    try:
        model = model_from_config(params, train_stream, config)
        report = evaluate(model, test_stream, k_list=k_list, candidate_cap=candidate_cap, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc))
    metrics = report.to_json_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_event_audit(out / "event_audit.csv", report.records)
    _render_rank_histogram(
        out / "rank_histogram.png", [r.rank for r in report.rankings], max(r.num_candidates for r in report.rankings)
    )
    _echo_config(
        out,
        {
            **asdict(config),
            "checkpoint": str(checkpoint_path),
            "train_file": str(train_file),
            "test_file": str(test_file),
            "k_list": list(k_list),
            "candidate_cap": candidate_cap,
        },
    )
    click.echo(json.dumps(metrics, sort_keys=True))


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--train-file", "train_file", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--outdir", default=None, help="Output directory (or $GRAPHTPP_OUTDIR).")
@click.option("--sample-coords", type=int, default=8, show_default=True)
@click.option("--fd-step", type=float, default=1e-5, show_default=True)
@click.option("--tolerance", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--corrupt", is_flag=True, hidden=True, help="Deliberately corrupt one gradient (test hook).")
def gradcheck(config_path, train_file, outdir, sample_coords, fd_step, tolerance, seed, corrupt):
    """Compare analytic gradients against central differences on a toy model;
    exits 1 when the max relative error exceeds the tolerance."""
    import numpy as np

    from .data import EventStream
    from .intensity import init_model_params
    from .training import TrainConfig, grad_check

    doc = _load_config(config_path, _train_config_keys() | {"train_file"}) if config_path else {}
    train_file = train_file or doc.get("train_file")
    toy_defaults = {"embedding_dim": 8, "attention_dim": 8, "sal_blocks": 1, "snapshots_N": 4, "layers_R": 2}
    config = _build_train_config({**toy_defaults, **{k: v for k, v in doc.items() if k != "train_file"}}, {})
    if train_file:
        stream = _read_stream(train_file)
        if len(stream) > 12:
            keep = 12
            mark = float(stream.timestamps[keep - 1])
            stream = EventStream(
                stream.user_ids[:keep],
                stream.item_ids[:keep],
                stream.timestamps[:keep],
                stream.num_users,
                stream.num_items,
                mark * (1 + 1e-9),
            )
    else:
        rng = np.random.default_rng(12345)
        n = 10
        stream = EventStream(
            rng.integers(0, 3, n).astype(np.intp),
            rng.integers(0, 3, n).astype(np.intp),
            np.sort(rng.uniform(0.5, 9.5, n)),
            3,
            3,
            10.0,
        )
    if len(stream) == 0:
        raise CliError("gradient check needs at least one event")
    params = init_model_params(
        stream.num_users,
        stream.num_items,
        embed_dim=config.embedding_dim,
        attn_dim=config.attention_dim,
        sal_blocks=config.sal_blocks,
        seed=config.seed,
        as_parameters=True,
    )
    report = grad_check(
        params, stream, sample_coords=sample_coords, seed=seed, config=config, fd_step=fd_step, corrupt=corrupt
    )
    out = _resolve_outdir(outdir)
    payload = {
        "max_rel_err": report.max_rel_err,
        "coords_checked": report.coords_checked,
        "tolerance": tolerance,
        "per_tensor": report.per_tensor,
    }
    (out / "gradcheck_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for name in sorted(report.per_tensor):
        click.echo(f"{name}: {report.per_tensor[name]:.3e}")
    click.echo(f"max relative error {report.max_rel_err:.3e} over {report.coords_checked} coordinates")
    if not report.passed(tolerance):
        raise click.ClickException(f"gradient check failed: {report.max_rel_err:.3e} > {tolerance:g}")
    click.echo("gradient check passed")


if __name__ == "__main__":
    main()
