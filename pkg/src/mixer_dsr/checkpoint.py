"""Resumable training checkpoints stored in the shared binary container."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .container import ContainerError, VersionMismatchError, read_container, write_container
from .optim import OptimizerState
from .trainer import ModelSpec, TrainState, config_dict, config_from_dict

__all__ = ["CHECKPOINT_FORMAT", "save_checkpoint", "load_checkpoint", "load_model"]

CHECKPOINT_FORMAT = "mixer-dsr/checkpoint"
SCHEMA_VERSION = 1


def _put_opt(arrays: dict, prefix: str, opt: OptimizerState) -> int:
    for k, (m, s) in enumerate(zip(opt.m, opt.s)):
        arrays[f"{prefix}/{k:03d}/m"] = m
        arrays[f"{prefix}/{k:03d}/s"] = s
    return opt.step


def _get_opt(arrays: dict, prefix: str, n: int, step: int) -> OptimizerState:
    m = [arrays[f"{prefix}/{k:03d}/m"] for k in range(n)]
    s = [arrays[f"{prefix}/{k:03d}/s"] for k in range(n)]
    return OptimizerState(m, s, step)


def save_checkpoint(path, state: TrainState, spec: ModelSpec, extra: dict | None = None) -> None:
    arrays = {f"model/{k}": v for k, v in state.model.state_arrays().items()}
    if state.best_arrays is not None:
        arrays.update({f"best/{k}": v for k, v in state.best_arrays.items()})
    theta_steps = [_put_opt(arrays, f"opt/theta/{m}", o) for m, o in enumerate(state.theta_opt)]
    xi_steps = [_put_opt(arrays, f"opt/xi/{e}", o) for e, o in enumerate(state.xi_opt)]
    gate_step = None if state.gate_opt is None else _put_opt(arrays, "opt/gate", state.gate_opt)
    header = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "spec": asdict(spec),
        "config": config_dict(state.config),
        "outer": state.outer,
        "step": state.step,
        "nonfinite_streak": state.nonfinite_streak,
        "best_val": state.best_val,
        "best_iter": state.best_iter,
        "rng": state.rng.bit_generator.state,
        "opt_steps": {"theta": theta_steps, "xi": xi_steps, "gate": gate_step},
        "history": state.history,
        "events": state.events,
        "extra": extra or {},
    }
    write_container(path, header, arrays)


def _read(path) -> tuple[dict, dict]:
    header, arrays, _ = read_container(path, CHECKPOINT_FORMAT, with_metadata=False)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint schema {header.get('schema_version')}, expected {SCHEMA_VERSION}")
    return header, arrays


def _section(arrays: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def load_checkpoint(path) -> tuple[TrainState, ModelSpec, dict]:
    """Rebuild the full training state, including optimizer moments and the generator."""
    header, arrays = _read(path)
    try:
        spec = ModelSpec(**header["spec"])
        model = spec.build()
        model.load_state_arrays(_section(arrays, "model"))
        config = config_from_dict(header["config"])
        steps = header["opt_steps"]
        theta_opt = []
        for m, e in enumerate(model.bank.experts):
            theta_opt.append(_get_opt(arrays, f"opt/theta/{m}", len(e.parameters()) + 1, steps["theta"][m]))
        xi_opt = [_get_opt(arrays, f"opt/xi/{e}", 1, steps["xi"][e]) for e in range(spec.n_envs)]
        gate_opt = None if steps["gate"] is None else _get_opt(arrays, "opt/gate", 2, steps["gate"])
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = header["rng"]
        best = _section(arrays, "best") or None
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: malformed checkpoint ({exc})") from None
    state = TrainState(model, config, rng, theta_opt, xi_opt, gate_opt, header["outer"], header["step"],
                       header["nonfinite_streak"], header["best_val"], header["best_iter"], best,
                       header["history"], header["events"])
    return state, spec, header.get("extra", {})


def load_model(path, best: bool = True):
    """Just the model: the best-validation snapshot when present and requested."""
    header, arrays = _read(path)
    try:
        spec = ModelSpec(**header["spec"])
        model = spec.build()
        section = _section(arrays, "best") if best else {}
        model.load_state_arrays(section or _section(arrays, "model"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: malformed checkpoint ({exc})") from None
    return model, spec
