"""Command-line front end: simulate | train | forecast | cluster | loglik.

Exit codes: 0 success, 1 usage problem, 2 bad data or files, 3 numerical
failure.  Only stdlib is imported at module level so that --threads can
pin the BLAS thread pools before numpy is first loaded; the heavy
submodules are imported inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

from .errors import DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SIMULATE_KINDS = ("toy", "clustered", "seasonal")


class UsageError(Exception):
    """Command-line misuse; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want code 1
        raise UsageError(message)


def _add_global_flags(p: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps subparser defaults from clobbering values parsed earlier,
    # so the flags work both before and after the command word.
    p.add_argument("--config", default=argparse.SUPPRESS, metavar="PATH",
                   help="TOML config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, metavar="N",
                   help="master seed fanned out to all named streams")
    p.add_argument("--out", default=argparse.SUPPRESS, metavar="DIR",
                   help="output directory (default: out)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, metavar="N",
                   help="pin BLAS/OpenMP thread pools to N threads")
    p.add_argument("--set", action="append", dest="sets", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key")


def build_parser() -> _Parser:
    parser = _Parser(prog="stfact", description=__doc__.splitlines()[0])
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p_sim = sub.add_parser("simulate", help="write a synthetic dataset + truth sidecar")
    p_sim.add_argument("--kind", choices=SIMULATE_KINDS, default=argparse.SUPPRESS,
                       help="generator family (default from config)")
    _add_global_flags(p_sim)

    for name, help_text in (
        ("train", "fit the model; writes checkpoint, history CSV, history figure"),
        ("forecast", "rolling one-step forecast of the test data"),
        ("cluster", "per-instance mixture assignments from a checkpoint"),
    ):
        _add_global_flags(sub.add_parser(name, help=help_text))

    p_ll = sub.add_parser("loglik", help="held-out log-likelihood by importance sampling")
    p_ll.add_argument("--samples", type=int, default=argparse.SUPPRESS, metavar="S",
                      help="importance samples (default from config: 100)")
    _add_global_flags(p_ll)
    return parser


def _write_run_manifest(out_dir: Path, command: str, run, files: list[str], extra=None):
    payload = {
        "command": command,
        "config": run.sections,
        "files": sorted(files),
    }
    if extra:
        payload.update(extra)
    path = out_dir / "run.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def _checkpoint_path(run, out_dir: Path):
    return run["data"]["checkpoint"] or out_dir / "model"


def _fitted_factors(theta, store, grid):
    """Factor map at the posterior mean; per-instance maps are averaged."""
    import numpy as np

    from . import variational as vr

    config = store.config
    if config.factor_head == "fixed":
        return np.asarray(config.fixed_factors)
    idx = np.arange(1 if config.shared_factors else store.n)
    noise = vr.make_noise(store, idx, None, zero=True)
    sample = vr.sample_batch(
        idx, store, theta.leaves(), store.lam.leaves(), store.phi.leaves(), noise, grid
    )
    return sample.factors.value.mean(axis=0)


def _cmd_simulate(args, run, out_dir: Path) -> int:
    from . import plots, synth
    from .data import VoxelGrid, save_grid, save_tensor

    sim = run["simulate"]
    kind = getattr(args, "kind", None) or sim["kind"]
    grid = None
    sidecar = None
    if kind == "toy":
        data, truth = synth.gen_toy(
            n_instances=sim["n_instances"],
            t_steps=sim["t_steps"],
            seed=run.seed,
            sigma_y=sim["sigma_y"],
            grid_points=sim["grid_points"],
        )
        grid, sidecar = truth.grid, truth.to_json_dict()
    elif kind == "clustered":
        pts = sim["source_grid_points"]
        grid = VoxelGrid.lattice(pts, 0.0, float(pts - 1))
        data, truth = synth.gen_clustered_sources(
            n_sources=sim["n_sources"],
            n_clusters=sim["n_clusters"],
            grid=grid,
            t_total=sim["t_total"],
            block_len=sim["block_len"],
            snr_db=sim["snr_db"],
            seed=run.seed,
        )
        sidecar = truth.to_json_dict()
    elif kind == "seasonal":
        data = synth.gen_seasonal(
            sim["n_days"],
            sim["intervals_per_day"],
            sim["n_locations"],
            missing_frac=sim["missing_frac"],
            seed=run.seed,
            blackout_days=sim["blackout_days"],
        )
    else:
        raise UsageError(f"unknown simulate kind '{kind}'")

    files = ["data.f64", "data.mask.u8", "data.manifest.json", "preview.png"]
    save_tensor(data, out_dir / "data")
    if grid is not None:
        save_grid(grid, out_dir / "data")
        files.append("data.grid.f64")
    if sidecar is not None:
        (out_dir / "truth.json").write_text(
            json.dumps(sidecar, indent=1, sort_keys=True) + "\n"
        )
        files.append("truth.json")
    plots.plot_preview(data, out_dir / "preview.png")
    _write_run_manifest(out_dir, "simulate", run, files, extra={"kind": kind})
    print(f"wrote {kind} dataset {data.n}x{data.t}x{data.d} to {out_dir}")
    return EXIT_OK


def _load_inputs(run, which: str):
    from .data import load_controls, load_grid, load_tensor

    paths = run["data"]
    if not paths[which]:
        raise UsageError(f"this command needs a data.{which} path in the config")
    data = load_tensor(paths[which])
    grid = load_grid(paths["grid"]) if paths["grid"] else None
    controls_key = "controls" if which == "train" else "test_controls"
    controls = load_controls(paths[controls_key]) if paths[controls_key] else None
    return data, grid, controls


def _cmd_train(args, run, out_dir: Path) -> int:
    from . import plots
    from .checkpoint import save_checkpoint
    from .training import train, write_history

    data, grid, controls = _load_inputs(run, "train")
    model_config = run.model_config(d_obs=data.d)
    train_config = run.train_config(checkpoint_dir=out_dir)

    def show(epoch, bd):
        print(
            f"epoch {epoch:4d} beta {bd.beta:.3f} l_rec {bd.l_rec:.4f} "
            f"l_h {bd.l_h:.4f} l_c {bd.l_c:.4f} l_zw {bd.l_zw:.4f} "
            f"l_w {bd.l_w:.4f} total {bd.total:.4f}"
        )

    result = train(data, model_config, train_config, grid=grid, controls=controls,
                   callback=show)
    save_checkpoint(
        out_dir / "model", result.theta, result.store, grid=grid,
        meta={"epochs": len(result.history), "seed": run.seed},
    )
    write_history(result.history, out_dir / "history.csv")
    plots.plot_history(result.history, out_dir / "history.png")
    files = ["model.f64", "model.manifest.json", "history.csv", "history.png"]
    _write_run_manifest(out_dir, "train", run, files)
    if result.history:
        print(f"finished {len(result.history)} epochs, total {result.history[-1].total:.4f}")
    else:
        print("no epochs run; checkpoint holds the initialization")
    return EXIT_OK


def _cmd_forecast(args, run, out_dir: Path) -> int:
    from . import plots
    from .checkpoint import load_checkpoint
    from .inference import rolling_forecast, write_forecast_csv, write_forecast_json

    ck = load_checkpoint(_checkpoint_path(run, out_dir))
    test, _, controls = _load_inputs(run, "test")
    factors = _fitted_factors(ck.theta, ck.store, ck.grid)
    if factors.shape[1] != test.d:
        raise DataError(
            f"test data has D={test.d} but the checkpoint's factors have D={factors.shape[1]}"
        )
    y, mask = test.flatten_time()
    codes = controls.flatten_time() if controls is not None else None
    fc = run["forecast"]
    report = rolling_forecast(
        ck.theta, ck.store.config, factors, y, mask=mask, controls_codes=codes,
        refit_steps=fc["refit_steps"], lr=fc["refit_lr"],
    )
    write_forecast_csv(report, out_dir / "forecast.csv")
    write_forecast_json(report, out_dir / "forecast.json")
    plots.plot_forecast(report, out_dir / "forecast.png")
    files = ["forecast.csv", "forecast.json", "forecast.png"]
    _write_run_manifest(out_dir, "forecast", run, files)
    print(f"rmse {report.rmse:.6f} mape {report.mape:.6f}")
    return EXIT_OK


def _cmd_cluster(args, run, out_dir: Path) -> int:
    from . import plots
    from .checkpoint import load_checkpoint
    from .inference import adjusted_rand_index, extract_clusters

    ck = load_checkpoint(_checkpoint_path(run, out_dir))
    if ck.store.config.s == 1:
        warnings.warn("model has a single mixture component; clustering is degenerate")
    labels, probs = extract_clusters(ck.theta, ck.store)

    lines = ["instance,label," + ",".join(f"p{s}" for s in range(probs.shape[1]))]
    for i, name in enumerate(ck.store.instance_ids):
        row = ",".join(repr(float(p)) for p in probs[i])
        lines.append(f"{name},{labels[i]},{row}")
    (out_dir / "clusters.csv").write_text("\n".join(lines) + "\n")
    plots.plot_clusters(ck.store.lam["lam.z0_mean"], labels, out_dir / "clusters.png")

    extra = {}
    truth_path = run["data"]["truth"]
    if truth_path:
        try:
            payload = json.loads(Path(truth_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read truth sidecar {truth_path}: {e}") from e
        if "sequence_labels" in payload:
            ari = adjusted_rand_index(payload["sequence_labels"], labels)
            extra["ari"] = ari
            print(f"ari {ari:.4f}")
        else:
            print("truth sidecar has no sequence_labels; skipping ari")
    _write_run_manifest(
        out_dir, "cluster", run, ["clusters.csv", "clusters.png"], extra=extra
    )
    print(f"wrote assignments for {ck.store.n} instances")
    return EXIT_OK


def _cmd_loglik(args, run, out_dir: Path) -> int:
    from .checkpoint import load_checkpoint
    from .inference import importance_loglik, infer_heldout

    ck = load_checkpoint(_checkpoint_path(run, out_dir))
    test, grid, controls = _load_inputs(run, "test")
    grid = grid or ck.grid
    ll = run["loglik"]
    samples = getattr(args, "samples", None) or ll["samples"]
    store_test = infer_heldout(
        ck.theta, ck.store, test, grid=grid, controls=controls,
        steps=ll["heldout_steps"], lr=ll["heldout_lr"], seed=run.seed,
    )
    est, se = importance_loglik(
        ck.theta, store_test, test, s_samples=samples, seed=run.seed,
        grid=grid, controls=controls,
    )
    (out_dir / "loglik.json").write_text(
        json.dumps({"loglik": est, "samples": samples, "se": se}, indent=1, sort_keys=True)
        + "\n"
    )
    _write_run_manifest(out_dir, "loglik", run, ["loglik.json"])
    print(f"loglik {est:.6f} se {se:.6f} ({samples} samples)")
    return EXIT_OK


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "cluster": _cmd_cluster,
    "loglik": _cmd_loglik,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)

    try:
        from .config import load_config

        run = load_config(
            path=getattr(args, "config", None),
            sets=args.sets,
            seed=getattr(args, "seed", None),
            out=getattr(args, "out", None),
            threads=threads,
        )
        out_dir = Path(run.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return _HANDLERS[args.command](args, run, out_dir)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
