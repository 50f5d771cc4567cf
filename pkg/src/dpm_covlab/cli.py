"""Command-line driver: ``dpm-covlab {train,eval-elbo,sample,trajectory,verify,plot-data}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checks import run_checks
from .config import ConfigError, ExperimentConfig, load_config
from .elbo import compare, write_rows
from .estimators import COV_KINDS, Model, NetworkProvider, OracleProvider, network_mean
from .nets import (CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint,
                   train_eps, train_npr, train_sn)
from .plotting import plot_curves
from .sampler import SamplingError, ancestral_sample, continuous_sample, euler_maruyama, sample_metrics
from .trajectory import CostMatrix, dump_trajectory, even_trajectory, optimal_trajectory_dp, restrict

log = logging.getLogger("dpm_covlab")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SOURCES = ("oracle", "biased", "net", "netmean")
PLOT_COLUMNS = ["series", "K", "value", "stderr"]


class UsageError(ValueError):
    """Bad request that is not tied to a config line."""


# ---------------------------------------------------------------------------
# helpers

def _ckpt_dir(cfg: ExperimentConfig) -> Path:
    # --out redirects results only; checkpoints stay where the config put them
    ck = cfg.raw.get("checkpoints") or cfg.raw.get("out")
    return cfg.resolve(ck) if ck else cfg.out


def _load_bundle(cfg: ExperimentConfig, which: str):
    path = _ckpt_dir(cfg) / f"{which}.ckpt.json"
    if not path.exists():
        raise UsageError(f"missing checkpoint {path} (run 'train' first or set 'checkpoints')")
    return load_checkpoint(path, d=cfg.spec.d, schedule=cfg.schedule)


def build_model(cfg: ExperimentConfig, text: str) -> Model:
    """``source:cov`` with source in oracle, biased, net, netmean and cov a covariance rule.

    ``biased`` shifts the oracle noise mean by ``eval.bias``; ``netmean`` uses the
    trained noise head as the mean with exact second moments.
    """
    source, _, cov = text.partition(":")
    if source not in SOURCES or cov not in COV_KINDS:
        raise UsageError(f"bad model {text!r}: expected <{'|'.join(SOURCES)}>:<{'|'.join(COV_KINDS)}>")
    budget = int(cfg.get("eval", "iso_M", 10_000, int))
    if source == "oracle":
        prov = OracleProvider(cfg.spec)
    elif source == "biased":
        prov = OracleProvider(cfg.spec, bias=float(cfg.get("eval", "bias", 0.5, (int, float))),
                              name="biased")
    elif source == "netmean":
        prov = OracleProvider(cfg.spec, mean_fn=network_mean(_load_bundle(cfg, "eps")), name="netmean")
    else:
        sn = _load_bundle(cfg, "sn") if cov == "sn" else None
        npr = _load_bundle(cfg, "npr") if cov == "npr" else None
        prov = NetworkProvider(_load_bundle(cfg, "eps"), sn, npr)
    return Model(prov, cov, name=text, spec=cfg.spec, iso_budget=budget, seed=cfg.seed)


def _int_list(text: str | None, default) -> list[int]:
    if text is None:
        return [int(v) for v in default]
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str | None, default) -> list[str]:
    if text is None:
        return list(default) if isinstance(default, (list, tuple)) else [default]
    return [v for v in text.split(",") if v]


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _trajectory_kinds(value) -> list[str]:
    kinds = {"even": "ET", "optimal": "OT", "ET": "ET", "OT": "OT"}
    names = _str_list(value, ["even", "optimal"]) if not isinstance(value, list) else value
    if value == "both":
        names = ["even", "optimal"]
    try:
        return [kinds[n] for n in names]
    except KeyError as exc:
        raise UsageError(f"unknown trajectory kind {exc.args[0]!r} (even, optimal, both)") from None


def _require_stochastic(cfg: ExperimentConfig, what: str) -> None:
    if cfg.kind.tag == "ddim":
        raise cfg.error(f"{what} is undefined for the deterministic (ddim) forward process: "
                        "-L_elbo is infinite", "process")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(cfg: ExperimentConfig, args) -> int:
    tr = cfg.section("train")
    iters = int(cfg.get("train", "iterations", 20_000, int))
    common = dict(batch=int(cfg.get("train", "batch", 256, int)),
                  lr=float(cfg.get("train", "lr", 1e-3, (int, float))),
                  dtype=cfg.get("train", "dtype", "float64", str))
    aux = cfg.get("train", "aux", ["sn", "npr"], list)
    if any(a not in ("sn", "npr") for a in aux):
        raise cfg.error("train.aux entries must be 'sn' or 'npr'", "train", "aux")
    stage2_iters = int(cfg.get("train", "stage2_iterations", iters, int))
    try:
        TrainConfig(iterations=iters, **common)
        TrainConfig(iterations=stage2_iters, **common)
    except ValueError as exc:
        raise cfg.error(str(exc), "train") from exc
    cfg.out.mkdir(parents=True, exist_ok=True)
    resume = args.resume or tr.get("resume")
    summary = {"seed": cfg.seed, "stages": {}}

    if resume:
        path = Path(resume) if args.resume else cfg.resolve(resume)
        if not path.exists():
            raise UsageError(f"resume checkpoint {path} does not exist")
        stage1 = load_checkpoint(path, d=cfg.spec.d, schedule=cfg.schedule)
        if stage1.meta.get("N") != cfg.schedule.N:
            raise UsageError(f"resume checkpoint was trained with N={stage1.meta.get('N')}")
        log.info("resuming from stage-1 checkpoint %s", path)
        summary["resumed_from"] = str(path)
    else:
        t0 = time.perf_counter()
        res = train_eps(cfg.spec, cfg.schedule, TrainConfig(iterations=iters, seed=cfg.seed, **common),
                        e=int(cfg.get("train", "e", 32, int)), h=int(cfg.get("train", "h", 128, int)),
                        head_hidden=int(cfg.get("train", "head_hidden", 64, int)),
                        time_feature=cfg.get("train", "time_feature", "logsnr", str))
        stage1 = res.bundle
        _write_losses(res.losses, cfg.out / "loss_eps.csv")
        summary["stages"]["eps"] = {"iterations": iters, "final_loss": float(res.losses[-1]),
                                    "seconds": round(time.perf_counter() - t0, 2)}
        log.info("stage 1 done: final loss %.4f", res.losses[-1])
    save_checkpoint(stage1, cfg.out / "eps.ckpt.json")

    for k, kind in enumerate(aux, start=1):
        t0 = time.perf_counter()
        tc = TrainConfig(iterations=stage2_iters, seed=cfg.seed + k, **common)
        res = (train_sn if kind == "sn" else train_npr)(stage1, cfg.spec, cfg.schedule, tc)
        save_checkpoint(res.bundle, cfg.out / f"{kind}.ckpt.json")
        _write_losses(res.losses, cfg.out / f"loss_{kind}.csv")
        summary["stages"][kind] = {"iterations": stage2_iters, "final_loss": float(res.losses[-1]),
                                   "seconds": round(time.perf_counter() - t0, 2)}
        log.info("stage 2 (%s) done: final loss %.4f", kind, res.losses[-1])
    _write_json(summary, cfg.out / "train.json")
    print(f"checkpoints written to {cfg.out}")
    return EXIT_OK


def _write_losses(losses, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def _cost_matrices(cfg, models, M):
    return {m.name: CostMatrix(m, cfg.schedule, cfg.kind, cfg.spec, M=M, seed=cfg.seed)
            for m in models}


def cmd_eval_elbo(cfg: ExperimentConfig, args) -> int:
    _require_stochastic(cfg, "the likelihood bound")
    models = [build_model(cfg, t) for t in
              _str_list(args.models, cfg.get("eval", "models", ["oracle:sn", "oracle:iso"]))]
    Ks = _int_list(args.K, cfg.get("eval", "K", [2, 5, 10, cfg.schedule.N], list))
    kinds = _trajectory_kinds(args.trajectory or cfg.get("eval", "trajectory", "both"))
    mode = args.mode or cfg.get("eval", "mode", "bound", str)
    M = int(args.M or cfg.get("eval", "M", 2000, int))
    if mode not in ("bound", "reduced", "direct"):
        raise UsageError(f"unknown mode {mode!r} (bound, reduced, direct)")
    for K in Ks:
        if not 1 <= K <= cfg.schedule.N:
            raise UsageError(f"K={K} outside 1..N={cfg.schedule.N}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    cms = _cost_matrices(cfg, models, M) if (mode == "bound" or "OT" in kinds) else {}
    rows = []
    for K in Ks:
        for kind in kinds:
            taus = {m.name: (even_trajectory(cfg.schedule.N, K) if kind == "ET"
                             else optimal_trajectory_dp(cms[m.name], K)) for m in models}
            if mode == "bound":
                for m in models:
                    value, se = cms[m.name].nelbo(taus[m.name])
                    rows.append({"model": m.name, "mode": mode, "K": K, "value": value, "stderr": se,
                                 "seed": cfg.seed, "M": M, "trajectory": kind})
                continue
            # models sharing a trajectory are evaluated together on common random numbers
            groups: dict[tuple, list[Model]] = {}
            for m in models:
                groups.setdefault(tuple(taus[m.name]), []).append(m)
            for tau, group in groups.items():
                jumps = list(restrict(cfg.schedule, cfg.kind, tau).jumps)
                rows += compare(group, jumps, cfg.spec, M, cfg.seed, mode, cfg.threads, kind)
            log.info("K=%d %s done", K, kind)
    order = {m.name: i for i, m in enumerate(models)}
    rows.sort(key=lambda r: (Ks.index(r["K"]), kinds.index(r["trajectory"]), order[r["model"]]))
    path = cfg.out / "elbo.csv"
    write_rows(rows, path)
    print(f"{len(rows)} rows written to {path}")
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    model = build_model(cfg, args.model or cfg.get("sample", "model", "oracle:sn", str))
    K = int(args.K or cfg.get("sample", "K", min(10, cfg.schedule.N), int))
    batch = int(args.batch or cfg.get("sample", "batch", 10_000, int))
    sampler = cfg.get("sample", "sampler", "ancestral", str)
    final_noise = args.final_noise or bool(cfg.get("sample", "final_noise", False, bool))
    clip_y = args.clip_y if args.clip_y is not None else cfg.get("sample", "clip_y", None, (int, float))
    fmt = args.format or cfg.get("sample", "format", "csv", str)
    if fmt not in ("csv", "json"):
        raise UsageError("format must be csv or json")
    cfg.out.mkdir(parents=True, exist_ok=True)
    if sampler == "ancestral":
        kind = _trajectory_kinds(args.trajectory or cfg.get("sample", "trajectory", "even"))[0]
        if kind == "OT":
            _require_stochastic(cfg, "the optimal trajectory")
            cm = CostMatrix(model, cfg.schedule, cfg.kind, cfg.spec,
                            M=int(cfg.get("eval", "M", 2000, int)), seed=cfg.seed)
            tau = optimal_trajectory_dp(cm, K)
        else:
            tau = even_trajectory(cfg.schedule.N, K)
        run = ancestral_sample(model, restrict(cfg.schedule, cfg.kind, tau), batch, cfg.seed,
                               clip_y=clip_y, final_noise=final_noise, threads=cfg.threads)
    elif sampler in ("continuous", "euler"):
        if cfg.sde is None:
            raise cfg.error(f"sampler {sampler!r} needs a 'vp' schedule", "schedule")
        if sampler == "continuous":
            if model.cov not in ("sn", "npr"):
                raise UsageError("continuous sampling supports the sn and npr rules")
            grid = np.linspace(cfg.sde.T, 0.0, K + 1)
            run = continuous_sample(model.provider, cfg.sde, grid, batch, cfg.seed,
                                    corrected=model.cov == "npr", final_noise=final_noise,
                                    threads=cfg.threads)
        else:
            run = euler_maruyama(model.provider, cfg.sde, K, batch, cfg.seed)
    else:
        raise cfg.error(f"unknown sampler {sampler!r} (ancestral, continuous, euler)", "sample", "sampler")

    samples = cfg.out / f"samples.{fmt}"
    run.to_csv(samples) if fmt == "csv" else run.to_json(samples)
    _write_json({**run.sidecar(), "K": K, "sampler": sampler}, cfg.out / "samples.meta.json")
    metrics = sample_metrics(run.x0, cfg.spec)
    _write_json(metrics, cfg.out / "metrics.json")
    print(f"{batch} samples written to {samples}; loglik {metrics['loglik']:.4f} "
          f"+- {metrics['loglik_se']:.4f}")
    return EXIT_OK


def cmd_trajectory(cfg: ExperimentConfig, args) -> int:
    _require_stochastic(cfg, "the optimal trajectory")
    model = build_model(cfg, args.model or cfg.get("trajectory", "model", "oracle:sn", str))
    Ks = _int_list(args.K, cfg.get("trajectory", "K", [2, 5, 10], list))
    M = int(args.M or cfg.get("trajectory", "M", 2000, int))
    cfg.out.mkdir(parents=True, exist_ok=True)
    cm = CostMatrix(model, cfg.schedule, cfg.kind, cfg.spec, M=M, seed=cfg.seed)
    cm.fill(cfg.threads)
    cm.dump_csv(cfg.out / "cost_matrix.csv")
    report = []
    for K in Ks:
        tau = optimal_trajectory_dp(cm, K)
        dump_trajectory(tau, cfg.out / f"trajectory_K{K}.json")
        ot, ot_se = cm.nelbo(tau)
        et, et_se = cm.nelbo(even_trajectory(cfg.schedule.N, K))
        report.append({"K": K, "tau": tau, "nelbo_OT": ot, "stderr_OT": ot_se,
                       "nelbo_ET": et, "stderr_ET": et_se})
        log.info("K=%d: OT %.4f vs ET %.4f", K, ot, et)
    _write_json({"model": model.name, "seed": cfg.seed, "M": M, "trajectories": report},
                cfg.out / "trajectories.json")
    print(f"trajectories for K={Ks} written to {cfg.out}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    faults = tuple(args.fault or ())
    checks = run_checks(cfg.seed, faults)
    report = {"seed": cfg.seed, "faults": list(faults), "passed": all(c.passed for c in checks),
              "checks": [c.to_json() for c in checks]}
    text = json.dumps(report, indent=2)
    if args.out or cfg.raw.get("out"):
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "verify.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def collect_rows(directory: Path) -> list[dict]:
    """Long-format rows from every result CSV in ``directory`` (sorted by file name).

    A repeated (series, K) key keeps the row from the later file and logs a warning.
    """
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    files = sorted(p for p in directory.glob("*.csv") if p.name != "plot_data.csv")
    if not files:
        raise UsageError(f"no result CSV files in {directory}")
    table: dict[tuple[str, int], dict] = {}
    for path in files:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not {"model", "K", "value", "stderr"} <= set(reader.fieldnames or ()):
                log.debug("skipping %s (not a result table)", path.name)
                continue
            for r in reader:
                series = "/".join(v for v in (r["model"], r.get("mode"), r.get("trajectory")) if v)
                key = (series, int(r["K"]))
                if key in table:
                    log.warning("duplicate series %s at K=%d: %s replaces %s", series, key[1],
                                path.name, table[key]["_file"])
                table[key] = {"series": series, "K": key[1], "value": float(r["value"]),
                              "stderr": float(r["stderr"]), "_file": path.name}
    if not table:
        raise UsageError(f"no result rows in {directory}")
    return [{k: v for k, v in row.items() if k != "_file"} for _, row in sorted(table.items())]


def cmd_plot_data(cfg: ExperimentConfig, args) -> int:
    directory = Path(args.results) if args.results else cfg.out
    rows = collect_rows(directory)
    out_dir = cfg.out if args.out else directory
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "plot_data.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PLOT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(r["value"]), "stderr": repr(r["stderr"])})
    pngs = plot_curves(rows, out_dir)
    print(f"{len(rows)} rows written to {path}; figures: {', '.join(p.name for p in pngs)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {"train": cmd_train, "eval-elbo": cmd_eval_elbo, "sample": cmd_sample,
            "trajectory": cmd_trajectory, "verify": cmd_verify, "plot-data": cmd_plot_data}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="0 = single-threaded deterministic mode")
    common.add_argument("--out", help="output directory (default: config 'out' or ./results)")

    p = argparse.ArgumentParser(prog="dpm-covlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train", parents=[common], help="two-stage network training")
    sp.add_argument("--resume", help="stage-1 checkpoint; skips stage 1")
    sp = sub.add_parser("eval-elbo", parents=[common], help="likelihood-bound table")
    sp.add_argument("--models", help="comma-separated source:cov list")
    sp.add_argument("--K", help="comma-separated trajectory lengths")
    sp.add_argument("--trajectory", help="even, optimal or both")
    sp.add_argument("--mode", help="bound (default), reduced or direct")
    sp.add_argument("--M", type=int, help="Monte Carlo states per jump")
    sp = sub.add_parser("sample", parents=[common], help="draw samples and score them")
    sp.add_argument("--model")
    sp.add_argument("--K", type=int)
    sp.add_argument("--trajectory", help="even or optimal")
    sp.add_argument("--batch", type=int)
    sp.add_argument("--final-noise", action="store_true", help="sample the last jump instead of "
                    "emitting its mean")
    sp.add_argument("--clip-y", type=float)
    sp.add_argument("--format", help="csv or json")
    sp = sub.add_parser("trajectory", parents=[common], help="optimal trajectories by DP")
    sp.add_argument("--model")
    sp.add_argument("--K", help="comma-separated trajectory lengths")
    sp.add_argument("--M", type=int)
    sp = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    sp.add_argument("--fault", action="append", choices=["gamma_sign"],
                    help="inject a known fault (mutation check)")
    sp = sub.add_parser("plot-data", parents=[common], help="aggregate result CSVs and plot")
    sp.add_argument("results", nargs="?", help="results directory (default: --out)")
    return p


def _setup_logging() -> None:
    level = os.environ.get("DPM_COVLAB_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"DPM_COVLAB_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    logging.captureWarnings(True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        seed = args.seed
        if seed is None and args.config is None and args.command in ("verify", "plot-data"):
            seed = 0   # these two have no stochastic inputs worth pinning via config
        cfg = load_config(args.config, seed=seed, out=args.out, threads=args.threads)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, SamplingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - anything else is an unexpected fault
        log.debug("unhandled exception", exc_info=True)
        print(f"runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
