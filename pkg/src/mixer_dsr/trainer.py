"""Proximal alternating minimization of expert weights and environment contexts.

One outer iteration runs a block of weight steps followed by a block of
context steps.  Each step draws a batch of environments that are close in
context space, rolls every environment out with its routed expert only, and
applies AdaBelief to the groups that took part.  The gate is refit every
``gate_period`` steps.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import diffengine as de
from .backbones import init_backbone
from .datagen import EnvData
from .errors import ConfigError, TrainingAborted
from .metrics import rel_mse
from .mixer import ExpertBank, Gate, gating_update, loss_matrix, softmax_gate_gradient
from .odesolve import TimeGrid, integrate_rk4
from .optim import OptimizerState, adabelief_step

__all__ = [
    "TrainConfig",
    "MixerModel",
    "TrainState",
    "TrainResult",
    "AdaptResult",
    "ModelSpec",
    "build_model",
    "proximal_loss",
    "batch_by_context_l1",
    "batch_loss",
    "predict",
    "dataset_loss",
    "validation_relmse",
    "train",
    "adapt",
]

GATE_MODES = ("mixer", "gradient")
MAX_NONFINITE_OUTER = 3


@dataclass
class TrainConfig:
    outer_iters: int = 500
    inner_iters_theta: int = 12
    inner_iters_xi: int = 12
    lr_theta: float = 3e-3
    lr_xi: float = 3e-2
    prox: float = 1e-4
    batch_size: int | None = None  # None -> ceil(E / M)
    gate_period: int = 1  # inner steps between gate updates
    substeps: int = 2
    sigma: float = 1e-4
    kmeans_iters: int = 20
    kmeans_tol: float = 1e-3
    gate_mode: str = "mixer"
    lr_gate: float = 1e-2  # only used by the gradient gate
    eval_every: int = 1
    seed: int = 0

    def validate(self, n_envs: int | None = None) -> None:
        for name in ("outer_iters", "inner_iters_theta", "inner_iters_xi", "gate_period", "substeps",
                     "kmeans_iters", "eval_every"):
            if getattr(self, name) < 1 and not (name == "outer_iters" and self.outer_iters == 0):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_theta", "lr_xi", "prox", "sigma", "kmeans_tol", "lr_gate"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.batch_size is not None:
            if self.batch_size < 1:
                raise ConfigError("batch_size must be positive")
            if n_envs is not None and self.batch_size > n_envs:
                raise ConfigError(f"batch_size {self.batch_size} exceeds the {n_envs} environments")

    def resolved_batch_size(self, n_envs: int, n_experts: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return max(1, min(n_envs, math.ceil(n_envs / n_experts)))


@dataclass
class MixerModel:
    """Everything learned: experts with offsets, the gate, and one context per environment."""

    bank: ExpertBank
    gate: Gate
    contexts: de.Value  # (E, d_ctx)
    centroids: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return self.bank.n_experts

    @property
    def ctx_dim(self) -> int:
        return self.bank.ctx_dim

    def routing(self, contexts=None) -> np.ndarray:
        return self.gate.route(self.contexts.data if contexts is None else contexts)

    def theta_arrays(self) -> list[np.ndarray]:
        out = [a for e in self.bank.experts for a in e.arrays()]
        return out + [self.bank.offsets.data]

    def checksum(self) -> str:
        """SHA-256 over expert weights, offsets and the gate."""
        h = hashlib.sha256()
        for a in self.theta_arrays() + [self.gate.W, self.gate.b]:
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for m, e in enumerate(self.bank.experts):
            for k, a in enumerate(e.arrays()):
                out[f"expert/{m}/{k:03d}"] = a.copy()
        out["offsets"] = self.bank.offsets.data.copy()
        out["contexts"] = self.contexts.data.copy()
        out["gate/W"] = self.gate.W.copy()
        out["gate/b"] = self.gate.b.copy()
        if self.centroids is not None:
            out["centroids"] = self.centroids.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for m, e in enumerate(self.bank.experts):
            n = len(e.parameters())
            e.load_arrays([arrays[f"expert/{m}/{k:03d}"] for k in range(n)])
        self.bank.offsets.data = np.array(arrays["offsets"], dtype=np.float64)
        self.contexts.data = np.array(arrays["contexts"], dtype=np.float64)
        self.gate = Gate(np.array(arrays["gate/W"]), np.array(arrays["gate/b"]))
        c = arrays.get("centroids")
        self.centroids = None if c is None else np.array(c)


def build_model(
    kind: str,
    state_dim: int,
    n_envs: int,
    n_experts: int,
    ctx_dim: int,
    split_contexts: bool = False,
    seed: int = 0,
    width: int = 64,
    depth: int = 3,
    activation: str = "swish",
) -> MixerModel:
    """Fresh model; every expert is initialized from the same seed and contexts start at zero."""
    if n_experts < 1 or n_envs < 1 or ctx_dim < 1:
        raise ConfigError("n_experts, n_envs and ctx_dim must be positive")
    if split_contexts and ctx_dim % n_experts:
        raise ConfigError(f"context dim {ctx_dim} is not divisible by {n_experts} experts")
    expert_ctx = ctx_dim // n_experts if split_contexts else ctx_dim
    experts = [init_backbone(kind, state_dim, expert_ctx, seed, width, depth, activation)
               for _ in range(n_experts)]
    bank = ExpertBank(experts, ctx_dim, split_contexts)
    return MixerModel(bank, Gate.zeros(ctx_dim, n_experts), de.parameter(np.zeros((n_envs, ctx_dim))))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description, enough to rebuild an untrained :class:`MixerModel`."""

    kind: str
    state_dim: int
    n_envs: int
    n_experts: int
    ctx_dim: int
    split_contexts: bool = False
    seed: int = 0
    width: int = 64
    depth: int = 3
    activation: str = "swish"

    def build(self) -> MixerModel:
        return build_model(self.kind, self.state_dim, self.n_envs, self.n_experts, self.ctx_dim,
                           self.split_contexts, self.seed, self.width, self.depth, self.activation)


def proximal_loss(data_loss, params, anchors, lam: float):
    """``data_loss + lam * sum ||p - anchor||^2``; works on Values or plain arrays."""
    if isinstance(data_loss, de.Value) or any(isinstance(p, de.Value) for p in params):
        total = data_loss if isinstance(data_loss, de.Value) else de.constant(np.asarray(data_loss, dtype=np.float64))
        if lam == 0 or not params:
            return total
        prox = None
        for p, a in zip(params, anchors):
            term = de.sum(de.square(de.sub(p, de.constant(a))))
            prox = term if prox is None else de.add(prox, term)
        return de.add(total, de.scale(prox, lam))
    prox = sum(float(np.sum((np.asarray(p) - np.asarray(a)) ** 2)) for p, a in zip(params, anchors))
    return float(data_loss) + lam * prox


def batch_by_context_l1(contexts, batch_size: int, seed=None) -> np.ndarray:
    """A random anchor environment plus its ``batch_size - 1`` nearest neighbours in L1.

    Neighbour ties go to the lower index.  ``seed`` may be a Generator.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if X.shape[0] == 1 and np.ndim(contexts) == 1:
        X = X.T
    E = X.shape[0]
    if not 1 <= batch_size <= E:
        raise ConfigError(f"batch_size must be in [1, {E}], got {batch_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    anchor = int(rng.integers(E))
    return _neighbours(X, anchor, batch_size)


def _neighbours(X: np.ndarray, anchor: int, batch_size: int) -> np.ndarray:
    dist = np.abs(X - X[anchor]).sum(axis=1)
    dist[anchor] = -1.0  # the anchor always comes first
    order = np.lexsort((np.arange(X.shape[0]), dist))
    return order[:batch_size]


def _group(envs: list[EnvData], indices, routes) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for e, m in zip(indices, routes):
        g = envs[e].grid
        groups.setdefault((int(m), g.t0, g.t_end, g.n_steps), []).append(int(e))
    return groups


def _rollout(model: MixerModel, m: int, grid: TimeGrid, members: list[int], data: list[np.ndarray],
             contexts: de.Value, substeps: int):
    """Batched rollout of expert ``m`` for every trajectory of ``members``; returns the Rollout."""
    n_rows = [d.shape[0] for d in data]
    sel = np.zeros((sum(n_rows), contexts.shape[0]))
    start = 0
    for e, n in zip(members, n_rows):
        sel[start:start + n, e] = 1.0
        start += n
    ctx_rows = de.matmul(de.constant(sel), contexts)
    ctx_in = model.bank.expert_input(ctx_rows, m)
    z0 = np.concatenate([d[:, 0, :] for d in data])
    field_fn = model.bank.experts[m].make_field(ctx_in)
    return integrate_rk4(field_fn, z0, grid, substeps, check_finite=False)


def batch_loss(model: MixerModel, envs: list[EnvData], batch, substeps: int = 2, which: str = "train",
               contexts: de.Value | None = None, routes=None):
    """Mean over environments of the per-environment trajectory MSE, each under its routed expert.

    Returns ``(loss Value, routes)``.  Only the routed experts appear in the graph.
    """
    contexts = model.contexts if contexts is None else contexts
    batch = np.asarray(batch, dtype=np.int64)
    if routes is None:
        routes = model.gate.route(contexts.data[batch])
    total = None
    with np.errstate(all="ignore"):
        for (m, t0, t1, n), members in _group(envs, batch, routes).items():
            data = [getattr(envs[e], which) for e in members]
            roll = _rollout(model, m, TimeGrid(t0, t1, n), members, data, contexts, substeps)
            pred = roll.stacked()  # time-major (T * N, d)
            target = np.concatenate([np.concatenate([d[:, k, :] for d in data]) for k in range(n + 1)])
            # each environment contributes its own mean over trajectories and times
            w_rows = np.concatenate([np.full(d.shape[0], 1.0 / (d.shape[0] * (n + 1))) for d in data])
            weights = np.tile(w_rows, n + 1)[:, None] / len(batch)
            term = de.sum(de.mul(de.square(de.sub(pred, de.constant(target))), de.constant(weights)))
            total = term if total is None else de.add(total, term)
    return total, np.asarray(routes)


def predict(model: MixerModel, envs: list[EnvData], which: str = "test", contexts=None,
            substeps: int = 2) -> list[np.ndarray]:
    """Forward-only rollouts ``(I, T, d)`` per environment under the current routing."""
    ctx = model.contexts.data if contexts is None else np.asarray(contexts, dtype=np.float64)
    routes = model.gate.route(ctx)
    out: list[np.ndarray | None] = [None] * len(envs)
    with de.no_grad(), np.errstate(all="ignore"):
        ctx_v = de.constant(ctx)
        for (m, t0, t1, n), members in _group(envs, range(len(envs)), routes).items():
            data = [getattr(envs[e], which) for e in members]
            roll = _rollout(model, m, TimeGrid(t0, t1, n), members, data, ctx_v, substeps)
            pred = np.stack([v.data for v in roll.values], axis=1)
            start = 0
            for e, d in zip(members, data):
                out[e] = pred[start:start + d.shape[0]]
                start += d.shape[0]
    return out


def dataset_loss(model: MixerModel, envs: list[EnvData], which: str = "train", substeps: int = 2) -> float:
    preds = predict(model, envs, which, substeps=substeps)
    with np.errstate(all="ignore"):
        per_env = [np.sum((p - getattr(env, which)) ** 2, axis=-1).mean() for p, env in zip(preds, envs)]
        v = float(np.mean(per_env))
    return v if np.isfinite(v) else math.inf


def _safe_rel_mse(p: np.ndarray, t: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        v = rel_mse(p, t)
    return v if np.isfinite(v) else math.inf


def validation_relmse(model: MixerModel, envs: list[EnvData], substeps: int = 2,
                      which: str = "test") -> tuple[float, np.ndarray]:
    preds = predict(model, envs, which, substeps=substeps)
    per_env = np.array([_safe_rel_mse(p, getattr(env, which)) for p, env in zip(preds, envs)])
    return float(per_env.mean()), per_env


@dataclass
class TrainState:
    """Complete resumable training state."""

    model: MixerModel
    config: TrainConfig
    rng: np.random.Generator
    theta_opt: list[OptimizerState]  # one per expert; last array is that expert's offset
    xi_opt: list[OptimizerState]  # one per environment context row
    gate_opt: OptimizerState | None = None
    outer: int = 0  # completed outer iterations
    step: int = 0  # completed inner steps
    nonfinite_streak: int = 0
    best_val: float = math.inf
    best_iter: int = -1
    best_arrays: dict | None = None
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: MixerModel, config: TrainConfig) -> "TrainState":
        theta_opt = [OptimizerState.zeros_like(e.arrays() + [np.zeros(1)]) for e in model.bank.experts]
        xi_opt = [OptimizerState.zeros_like([row]) for row in model.contexts.data]
        gate_opt = None
        if config.gate_mode == "gradient":
            gate_opt = OptimizerState.zeros_like([model.gate.W, model.gate.b])
        return cls(model, config, np.random.default_rng(config.seed), theta_opt, xi_opt, gate_opt)


@dataclass
class TrainResult:
    state: TrainState
    history: list
    best_model: MixerModel | None = None


@dataclass
class AdaptResult:
    contexts: np.ndarray  # (n_envs, d_ctx)
    routing: np.ndarray
    losses: list  # per environment, per step
    checksum_before: str = ""
    checksum_after: str = ""

    @property
    def frozen_ok(self) -> bool:
        return self.checksum_before == self.checksum_after


def _gate_step(state: TrainState, envs: list[EnvData]) -> None:
    model, cfg = state.model, state.config
    if cfg.gate_mode == "mixer":
        gate, centroids, _ = gating_update(
            model.bank, model.contexts.data, envs, model.centroids, cfg.sigma, state.rng,
            cfg.substeps, cfg.kmeans_iters, cfg.kmeans_tol,
        )
        model.gate, model.centroids = gate, centroids
        return
    losses = loss_matrix(model.bank, model.contexts.data, envs, cfg.substeps)
    _, dW, db = softmax_gate_gradient(model.gate, model.contexts.data, losses)
    (W, b), state.gate_opt = adabelief_step(state.gate_opt, [model.gate.W, model.gate.b], [dW, db], cfg.lr_gate)
    model.gate = Gate(W, b)


def _theta_step(state: TrainState, envs: list[EnvData], batch: np.ndarray, anchors: list,
                hook: Callable | None) -> float:
    model, cfg = state.model, state.config
    bank = model.bank
    routes = model.gate.route(model.contexts.data[batch])
    active = sorted(set(int(m) for m in routes))
    data_loss, _ = batch_loss(model, envs, batch, cfg.substeps, contexts=de.constant(model.contexts.data),
                              routes=routes)
    prox_params, prox_anchor = [], []
    for m in active:
        prox_params += bank.experts[m].parameters() + [de.slice(bank.offsets, np.s_[m:m + 1])]
        prox_anchor += anchors[m]
    loss = proximal_loss(data_loss, prox_params, prox_anchor, cfg.prox)
    value = float(data_loss.data)
    if not (np.isfinite(value) and np.isfinite(loss.data)):
        return math.nan
    leaves = [p for e in bank.experts for p in e.parameters()] + [bank.offsets]
    grads = de.grad(loss, leaves)
    sizes = [len(e.parameters()) for e in bank.experts]
    per_expert, start = [], 0
    for n in sizes:
        per_expert.append(grads[start:start + n])
        start += n
    g_off = grads[-1]
    if not all(np.isfinite(g).all() for g in grads):
        return math.nan
    before = [[a.copy() for a in e.arrays()] + [bank.offsets.data[m:m + 1].copy()]
              for m, e in enumerate(bank.experts)] if hook else None
    for m in active:
        params = bank.experts[m].arrays() + [bank.offsets.data[m:m + 1]]
        new, state.theta_opt[m] = adabelief_step(state.theta_opt[m], params, per_expert[m] + [g_off[m:m + 1]],
                                                 cfg.lr_theta)
        bank.experts[m].load_arrays(new[:-1])
        offsets = bank.offsets.data.copy()
        offsets[m] = new[-1][0]
        bank.offsets.data = offsets
    if hook:
        hook({
            "block": "theta", "outer": state.outer, "step": state.step, "batch": batch.copy(),
            "routes": routes.copy(), "active": active, "loss": value,
            "grad_norms": [math.sqrt(sum(float(np.sum(g**2)) for g in per_expert[m]) + float(g_off[m] ** 2))
                           for m in range(len(sizes))],
            "before": before, "model": model,
        })
    return value


def _xi_step(state: TrainState, envs: list[EnvData], batch: np.ndarray, anchor: np.ndarray,
             hook: Callable | None) -> float:
    model, cfg = state.model, state.config
    routes = model.gate.route(model.contexts.data[batch])
    theta = [p for e in model.bank.experts for p in e.parameters()] + [model.bank.offsets]
    with de.frozen(theta):
        data_loss, _ = batch_loss(model, envs, batch, cfg.substeps, routes=routes)
    pick = np.zeros((len(batch), model.contexts.shape[0]))
    pick[np.arange(len(batch)), batch] = 1.0
    rows = de.matmul(de.constant(pick), model.contexts)
    loss = proximal_loss(data_loss, [rows], [anchor[batch]], cfg.prox)
    value = float(data_loss.data)
    if not (np.isfinite(value) and np.isfinite(loss.data)):
        return math.nan
    # expert parameters stay fixed: differentiate with respect to the contexts only
    (g_ctx,) = de.grad(loss, [model.contexts])
    if not np.isfinite(g_ctx).all():
        return math.nan
    ctx = model.contexts.data.copy()
    for e in batch:
        (row,), state.xi_opt[e] = adabelief_step(state.xi_opt[e], [ctx[e]], [g_ctx[e]], cfg.lr_xi)
        ctx[e] = row
    model.contexts.data = ctx
    if hook:
        hook({"block": "xi", "outer": state.outer, "step": state.step, "batch": batch.copy(),
              "routes": routes.copy(), "loss": value, "model": model})
    return value


def _run_block(state: TrainState, envs: list[EnvData], block: str, hook) -> tuple[list, int]:
    model, cfg = state.model, state.config
    E = len(envs)
    bs = cfg.resolved_batch_size(E, model.n_experts)
    n_steps = cfg.inner_iters_theta if block == "theta" else cfg.inner_iters_xi
    if block == "theta":
        anchors = [[a.copy() for a in e.arrays()] + [model.bank.offsets.data[m:m + 1].copy()]
                   for m, e in enumerate(model.bank.experts)]
    else:
        anchors = model.contexts.data.copy()
    losses, skipped = [], 0
    for _ in range(n_steps):
        batch = batch_by_context_l1(model.contexts.data, bs, state.rng)
        if block == "theta":
            v = _theta_step(state, envs, batch, anchors, hook)
        else:
            v = _xi_step(state, envs, batch, anchors, hook)
        state.step += 1
        if math.isnan(v):
            skipped += 1
            state.events.append({"outer": state.outer, "step": state.step, "block": block,
                                 "event": "non-finite loss, batch skipped", "batch": batch.tolist()})
        else:
            losses.append(v)
        if state.step % cfg.gate_period == 0:
            _gate_step(state, envs)
    return losses, skipped


def train(
    envs: list[EnvData],
    model: MixerModel | None = None,
    config: TrainConfig | None = None,
    *,
    state: TrainState | None = None,
    hook: Callable | None = None,
    on_outer: Callable | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or continue) training.

    Pass ``model`` and ``config`` for a fresh run or ``state`` to resume one.
    ``hook`` sees every inner step; ``on_outer(state, record)`` runs after each
    outer iteration (checkpointing lives there).  ``stop_after`` stops early after
    that many outer iterations in total, leaving a resumable state.
    """
    if state is None:
        if model is None or config is None:
            raise ConfigError("train needs either a state or a model and a config")
        config.validate(len(envs))
        if model.contexts.shape[0] != len(envs):
            raise ConfigError(f"model has {model.contexts.shape[0]} contexts for {len(envs)} environments")
        state = TrainState.fresh(model, config)
    cfg = state.config
    limit = cfg.outer_iters if stop_after is None else min(cfg.outer_iters, stop_after)
    while state.outer < limit:
        t_losses, t_skip = _run_block(state, envs, "theta", hook)
        x_losses, x_skip = _run_block(state, envs, "xi", hook)
        train_mse = dataset_loss(state.model, envs, "train", cfg.substeps)
        record = {"iter": state.outer, "train_mse": train_mse, "val_relmse": math.nan,
                  "batch_mse": float(np.mean(t_losses + x_losses)) if t_losses or x_losses else math.nan,
                  "skipped": t_skip + x_skip, "routing": state.model.routing().tolist()}
        all_skipped = not t_losses and not x_losses
        if (state.outer + 1) % cfg.eval_every == 0 or state.outer + 1 == cfg.outer_iters:
            val, _ = validation_relmse(state.model, envs, cfg.substeps)
            record["val_relmse"] = val
            if val < state.best_val:
                state.best_val, state.best_iter = val, state.outer
                state.best_arrays = state.model.state_arrays()
        state.history.append(record)
        state.outer += 1
        if all_skipped or not math.isfinite(train_mse):
            state.nonfinite_streak += 1
        else:
            state.nonfinite_streak = 0
        if on_outer is not None:
            on_outer(state, record)
        if state.nonfinite_streak >= MAX_NONFINITE_OUTER:
            raise TrainingAborted(
                f"{MAX_NONFINITE_OUTER} consecutive non-finite outer iterations ending at {state.outer - 1}; "
                f"last events: {state.events[-3:]}"
            )
    best = None
    if state.best_arrays is not None:
        best = clone_model(state.model)
        best.load_state_arrays(state.best_arrays)
    return TrainResult(state, state.history, best)


def clone_model(model: MixerModel) -> MixerModel:
    """Independent copy with identical arrays."""
    return copy.deepcopy(model)


def adapt(
    model: MixerModel,
    envs: list[EnvData],
    steps: int = 100,
    lr: float = 3e-2,
    substeps: int = 2,
    which: str = "train",
) -> AdaptResult:
    """Fit a fresh zero context per new environment with everything else frozen.

    Environments are adapted one at a time.  Routing is recomputed from the
    frozen gate at every step.
    """
    if steps < 0:
        raise ConfigError("steps must be non-negative")
    before = model.checksum()
    d = model.ctx_dim
    out = np.zeros((len(envs), d))
    histories = []
    for i, env in enumerate(envs):
        xi = de.parameter(np.zeros((1, d)))
        opt = OptimizerState.zeros_like([xi.data])
        losses = []
        for _ in range(steps):
            loss, _ = batch_loss(model, [env], [0], substeps, which, contexts=xi)
            v = float(loss.data)
            if not np.isfinite(v):
                losses.append(math.inf)
                continue
            (g,) = de.grad(loss, [xi])
            if not np.isfinite(g).all():
                losses.append(math.inf)
                continue
            (new,), opt = adabelief_step(opt, [xi.data], [g], lr)
            xi.data = new
            losses.append(v)
        if losses and not any(np.isfinite(losses)):
            raise TrainingAborted(f"adaptation of environment {i} never produced a finite loss")
        out[i] = xi.data[0]
        histories.append(losses)
    after = model.checksum()
    return AdaptResult(out, model.gate.route(out), histories, before, after)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
