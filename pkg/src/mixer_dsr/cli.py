"""Command-line entry point: ``generate``, ``train``, ``adapt``, ``eval`` and ``plot``.

Exit codes: 0 success, 2 configuration error (including missing or corrupt
checkpoints), 3 data error, 4 training or adaptation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import datagen, metrics, svg
from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .config import RunConfig, dump_config, load_config, parse_config
from .container import ContainerError
from .errors import ConfigError, TrainingAborted
from .trainer import TrainState, adapt, predict, train

__all__ = ["main", "evaluate_run", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_TRAIN"]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4
THREADS_ENV = "MIXER_DSR_THREADS"
DATASET_FILE = "dataset.mxd"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.ckpt"

log = logging.getLogger("mixer_dsr")


class DataError(RuntimeError):
    pass


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    try:
        count = int(n)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_dataset(path, mask_metadata: bool = False) -> datagen.EnvironmentSet:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset {p} does not exist; run 'generate' first")
    try:
        return datagen.load(p, mask_metadata=mask_metadata)
    except ContainerError as exc:
        raise DataError(str(exc)) from exc


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "train.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


# -- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    envset = datagen.generate(args.benchmark, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datagen.save(envset, out / DATASET_FILE)
    text = datagen.write_manifest(envset, out / "manifest.txt")
    print(text, end="")
    print(f"wrote {out / DATASET_FILE}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _write_metrics(path: Path, history: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "train_mse", "val_relmse", "routing"])
        for rec in history:
            w.writerow([rec["iter"], repr(float(rec["train_mse"])), repr(float(rec["val_relmse"])),
                        " ".join(str(r) for r in rec["routing"])])


def evaluate_run(model, envset: datagen.EnvironmentSet, cfg: RunConfig) -> dict:
    """Final report for a trained model: relative MSE on train/test trajectories, TPRMSE, purity."""
    envs = envset.train_envs
    train_pred = predict(model, envs, "train", substeps=cfg.substeps)
    test_pred = predict(model, envs, "test", substeps=cfg.substeps)
    with np.errstate(all="ignore"):
        train_per = [metrics.rel_mse(p, e.train) for p, e in zip(train_pred, envs)]
        test_per = [metrics.rel_mse(p, e.test) for p, e in zip(test_pred, envs)]
    train_per = [v if math.isfinite(v) else math.inf for v in train_per]
    test_per = [v if math.isfinite(v) else math.inf for v in test_per]
    routing = model.routing()
    report = {
        "train_relmse": float(np.mean(train_per)),
        "test_relmse": float(np.mean(test_per)),
        "tprmse": metrics.tprmse(test_per, cfg.tprmse_eps),
        "tprmse_eps": cfg.tprmse_eps,
        "per_env_test_relmse": test_per,
        "routing": routing.tolist(),
    }
    if envset.has_metadata:
        families = envset.train_families()
        if model.n_experts >= len(set(map(str, families))):
            report["purity"] = metrics.routing_purity(routing, families)
    return report


def _run_config_from_args(args) -> RunConfig:
    overrides = {
        "benchmark": args.benchmark, "experts": args.experts, "backbone": args.backbone,
        "outer_iters": args.outer_iters, "seed": args.seed, "out": args.out, "dataset": args.dataset,
    }
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def cmd_train(args) -> int:
    resume_state = None
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.is_file():
            raise ConfigError(f"checkpoint {ckpt} does not exist")
        resume_state, spec, extra = load_checkpoint(ckpt)
        cfg = parse_config(extra["config"], {"out": args.out, "outer_iters": args.outer_iters})
        resume_state.config.outer_iters = cfg.outer_iters
        dataset_path = Path(extra["dataset"])
    else:
        cfg = _run_config_from_args(args)
        dataset_path = None
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    local_data = run_dir / DATASET_FILE
    if dataset_path is None:
        if cfg.dataset:
            src = Path(cfg.dataset)
            _load_dataset(src)  # validate before copying
            if src.resolve() != local_data.resolve():
                shutil.copyfile(src, local_data)
        else:
            datagen.save(datagen.generate(cfg.benchmark, seed=cfg.seed), local_data)
    elif dataset_path.resolve() != local_data.resolve():
        shutil.copyfile(_checked(dataset_path), local_data)
    (run_dir / "config.txt").write_text(dump_config(cfg))
    envset = _load_dataset(local_data, mask_metadata=True)  # the learner never sees family labels
    envs = envset.train_envs
    ckpt_dir = run_dir / CHECKPOINT_DIR
    ckpt_dir.mkdir(exist_ok=True)
    handler = _attach_log(run_dir)
    state_dim = envs[0].train.shape[-1]
    spec = cfg.model_spec(state_dim, len(envs)) if resume_state is None else spec
    extra = {"config": dump_config(cfg), "dataset": str(local_data.resolve())}
    t0 = time.time()

    def on_outer(state: TrainState, record: dict) -> None:
        _write_metrics(run_dir / "metrics.csv", state.history)
        log.info("iter %d train_mse %.6g val_relmse %.6g (%.1fs)", record["iter"], record["train_mse"],
                 record["val_relmse"], time.time() - t0)
        if state.outer % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"iter_{state.outer:05d}.ckpt", state, spec, extra)

    try:
        if resume_state is None:
            result = train(envs, spec.build(), cfg.train_config(), on_outer=on_outer)
        else:
            result = train(envs, state=resume_state, on_outer=on_outer)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    finally:
        log.removeHandler(handler)
        handler.close()
    save_checkpoint(ckpt_dir / LAST_CHECKPOINT, result.state, spec, extra)
    model = result.best_model or result.state.model
    report = evaluate_run(model, _load_dataset(local_data), cfg)
    report["best_iter"] = result.state.best_iter
    report["skipped_batches"] = len(result.state.events)
    _write_json(run_dir / "report.json", report)
    metrics.export_gating(model.gate, model.contexts.data, run_dir / "gating")
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, list)}, sort_keys=True))
    return EXIT_OK


def _checked(p: Path) -> Path:
    if not p.is_file():
        raise DataError(f"dataset {p} does not exist")
    return p


# -- run-directory commands -----------------------------------------------

def _open_run(run_dir) -> tuple[Path, RunConfig]:
    run = Path(run_dir)
    cfg_path = run / "config.txt"
    if not cfg_path.is_file():
        raise ConfigError(f"{run} is not a run directory (config.txt missing)")
    return run, load_config(cfg_path)


def _run_model(run: Path):
    ckpt = run / CHECKPOINT_DIR / LAST_CHECKPOINT
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    return load_model(ckpt, best=True)


def cmd_adapt(args) -> int:
    run, cfg = _open_run(args.run_dir)
    model, _ = _run_model(run)
    envset = _load_dataset(run / DATASET_FILE, mask_metadata=True)
    steps = cfg.adapt_steps if args.steps is None else args.steps
    envs = envset.adapt_envs if args.split == "adapt" else envset.train_envs
    if not envs:
        raise DataError(f"dataset has no {args.split} environments")
    try:
        result = adapt(model, envs, steps, cfg.adapt_lr, cfg.substeps)
    except TrainingAborted as exc:
        print(f"adaptation failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    preds = predict(model, envs, "test", contexts=result.contexts, substeps=cfg.substeps)
    with np.errstate(all="ignore"):
        per = [metrics.rel_mse(p, e.test) for p, e in zip(preds, envs)]
    report = {
        "split": args.split,
        "steps": steps,
        "contexts": result.contexts.tolist(),
        "routing": result.routing.tolist(),
        "per_env_test_relmse": [v if math.isfinite(v) else math.inf for v in per],
        "checksum_before": result.checksum_before,
        "checksum_after": result.checksum_after,
        "frozen": result.frozen_ok,
    }
    _write_json(run / f"adapt_{args.split}.json", report)
    print(f"adapted {len(envs)} environments; mean relmse {np.mean(per):.6g}")
    print(f"checksum {result.checksum_after}")
    print("frozen: ok" if result.frozen_ok else "frozen: CHANGED")
    return EXIT_OK if result.frozen_ok else EXIT_TRAIN


def cmd_eval(args) -> int:
    run, cfg = _open_run(args.run_dir)
    model, _ = _run_model(run)
    report = evaluate_run(model, _load_dataset(run / DATASET_FILE), cfg)
    _write_json(run / "eval.json", report)
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, list)}, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    run, cfg = _open_run(args.run_dir)
    model, _ = _run_model(run)
    envset = _load_dataset(run / DATASET_FILE)
    out = run / "plots"
    out.mkdir(exist_ok=True)
    files = metrics.export_gating(model.gate, model.contexts.data, out)
    routing = model.routing()
    (out / "gating_histogram.svg").write_text(svg.bars(np.bincount(routing, minlength=model.n_experts),
                                                      "environments per expert"))
    envs = envset.train_envs
    families = envset.train_families()
    preds = predict(model, envs, "test", substeps=cfg.substeps)
    written = [files["heatmap"]]
    for fam in sorted(set(families), key=str):
        e = families.index(fam)
        true, pred = envs[e].test[0], preds[e][0]
        panels = []
        for k in range(true.shape[-1]):
            panels.append({"title": f"family {fam}, env {e}, x{k} (expert {routing[e]})",
                           "series": [(envs[e].times, true[:, k], "truth", False),
                                      (envs[e].times, pred[:, k], "prediction", True)]})
        path = out / f"trajectory_family_{fam}.svg"
        path.write_text(svg.line_panels(panels))
        written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixer-dsr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark dataset")
    g.add_argument("benchmark", choices=sorted(datagen.BENCHMARKS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a mixture of experts")
    t.add_argument("--config")
    t.add_argument("--benchmark")
    t.add_argument("--dataset")
    t.add_argument("--experts", type=int)
    t.add_argument("--backbone")
    t.add_argument("--outer-iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint file to continue from")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="fit contexts for new environments with the model frozen")
    a.add_argument("run_dir")
    a.add_argument("--split", choices=("adapt", "train"), default="adapt")
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_adapt)

    for name, func, text in (("eval", cmd_eval, "recompute the final report"),
                             ("plot", cmd_plot, "write gating and trajectory figures")):
        s = sub.add_parser(name, help=text)
        s.add_argument("run_dir")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContainerError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, datagen.GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
