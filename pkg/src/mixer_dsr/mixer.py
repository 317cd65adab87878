"""Top-1 routing of environments to expert backbones and the clustering gate update.

The gate is linear in the context, ``logits = xi @ W + b``, and only its argmax
matters.  It is refit from scratch by :func:`gating_update`:

1. cluster the contexts (Lloyd iterations with L1 assignment),
2. score every expert on every environment,
3. pair clusters with distinct experts by median loss,
4. least-squares fit ``(W, b)`` to one-hot labels of the paired experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .backbones import Backbone
from .datagen import EnvData
from .errors import ConfigError
from .odesolve import TimeGrid, integrate_rk4

__all__ = [
    "Gate",
    "ExpertBank",
    "Clustering",
    "route",
    "kmeans",
    "l1_cost",
    "loss_matrix",
    "pair_experts",
    "fit_gate",
    "gating_update",
    "softmax_gate_gradient",
]


@dataclass
class Gate:
    W: np.ndarray  # (d_ctx, M)
    b: np.ndarray  # (M,)

    @classmethod
    def zeros(cls, ctx_dim: int, n_experts: int) -> "Gate":
        return cls(np.zeros((ctx_dim, n_experts)), np.zeros(n_experts))

    @property
    def n_experts(self) -> int:
        return self.b.size

    def logits(self, contexts) -> np.ndarray:
        return np.asarray(contexts, dtype=np.float64) @ self.W + self.b

    def route(self, contexts) -> np.ndarray:
        """Expert index per row; ``np.argmax`` already breaks ties toward the lowest index."""
        return np.argmax(np.atleast_2d(self.logits(contexts)), axis=1)

    def copy(self) -> "Gate":
        return Gate(self.W.copy(), self.b.copy())


def route(gate: Gate, xi) -> int:
    return int(gate.route(np.atleast_2d(xi))[0])


class ExpertBank:
    """M experts of identical architecture plus one scalar context offset each.

    With ``split_contexts`` expert ``m`` only reads segment ``m`` of the
    context; the offset is then added to every component it reads.
    """

    def __init__(self, experts: list[Backbone], ctx_dim: int, split_contexts: bool = False,
                 offsets: np.ndarray | None = None):
        if not experts:
            raise ConfigError("need at least one expert")
        self.experts = experts
        self.ctx_dim = ctx_dim
        self.split_contexts = split_contexts
        m = len(experts)
        if split_contexts and ctx_dim % m:
            raise ConfigError(f"context dim {ctx_dim} is not divisible by {m} experts")
        self.expert_ctx_dim = ctx_dim // m if split_contexts else ctx_dim
        for e in experts:
            if e.ctx_dim != self.expert_ctx_dim:
                raise ConfigError(f"expert expects context dim {e.ctx_dim}, bank provides {self.expert_ctx_dim}")
        self.offsets = de.parameter(np.zeros(m) if offsets is None else offsets)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def segment(self, m: int) -> slice:
        if not 0 <= m < self.n_experts:
            raise IndexError(f"expert index {m} out of range")
        if not self.split_contexts:
            return np.s_[:]
        w = self.expert_ctx_dim
        return np.s_[m * w:(m + 1) * w]

    def expert_input(self, xi, m: int):
        """Context as seen by expert ``m``: its segment, shifted by its offset.

        Accepts numpy arrays (returns numpy) or Values (stays on the graph);
        rows of a 2-D input are treated as separate contexts.
        """
        seg = self.segment(m)
        if isinstance(xi, de.Value):
            part = de.slice(xi, (np.s_[:], seg)) if xi.ndim == 2 else de.slice(xi, seg)
            return de.add(part, de.slice(self.offsets, np.s_[m:m + 1]))
        xi = np.asarray(xi, dtype=np.float64)
        if self.split_contexts and xi.shape[-1] != self.ctx_dim:
            raise ConfigError(f"context has length {xi.shape[-1]}, expected {self.ctx_dim}")
        return xi[..., seg] + self.offsets.data[m]

    def theta_groups(self) -> list[list[de.Value]]:
        """Parameter leaves per expert; offsets are trained with their expert via the bank."""
        return [e.parameters() for e in self.experts]


@dataclass
class Clustering:
    assignment: np.ndarray  # (E,) cluster index per environment
    centroids: np.ndarray | None  # (M, d) or None after an empty cluster
    n_iter: int = 0
    costs: list = field(default_factory=list)  # L1 cost after each assignment step
    converged: bool = False


def l1_cost(contexts: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    return float(np.abs(contexts - centroids[assignment]).sum())


def kmeans(
    contexts,
    init_centroids: np.ndarray | None = None,
    n_clusters: int | None = None,
    rng: np.random.Generator | None = None,
    max_iters: int = 20,
    tol: float = 1e-3,
) -> Clustering:
    """Lloyd iterations: L1 nearest-centroid assignment, arithmetic-mean update.

    Missing centroids are drawn uniformly from ``[0, 1)``.  If any cluster
    ends up empty, the current assignment is returned with ``centroids=None``.
    Convergence: largest L1 centroid displacement below ``tol``.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one context")
    if init_centroids is None:
        if n_clusters is None:
            raise ValueError("n_clusters is required without initial centroids")
        rng = rng if rng is not None else np.random.default_rng()
        C = rng.random((n_clusters, X.shape[1]))
    else:
        C = np.array(init_centroids, dtype=np.float64)
    M = C.shape[0]
    costs: list[float] = []
    assignment = np.zeros(X.shape[0], dtype=np.int64)
    for it in range(1, max_iters + 1):
        dist = np.abs(X[:, None, :] - C[None, :, :]).sum(axis=2)
        assignment = np.argmin(dist, axis=1)
        costs.append(float(dist[np.arange(X.shape[0]), assignment].sum()))
        counts = np.bincount(assignment, minlength=M)
        if (counts == 0).any():
            return Clustering(assignment, None, it, costs, False)
        new_C = np.stack([X[assignment == m].mean(axis=0) for m in range(M)])
        shift = np.abs(new_C - C).sum(axis=1).max()
        C = new_C
        if shift < tol:
            return Clustering(assignment, C, it, costs, True)
    return Clustering(assignment, C, max_iters, costs, False)


def _rows_by_grid(envs: list[EnvData], indices) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for e in indices:
        g = envs[e].grid
        groups.setdefault((g.t0, g.t_end, g.n_steps), []).append(e)
    return groups


def loss_matrix(bank: ExpertBank, contexts, envs: list[EnvData], substeps: int = 2,
                which: str = "train") -> np.ndarray:
    """``(M, E)`` per-expert per-environment trajectory MSE, forward only.

    Each expert rolls out every environment's trajectories in one batch per
    time grid.  Non-finite rollouts score ``+inf``.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    M, E = bank.n_experts, len(envs)
    out = np.empty((M, E))
    groups = _rows_by_grid(envs, range(E))
    with de.no_grad(), np.errstate(all="ignore"):
        for m, expert in enumerate(bank.experts):
            ctx_m = bank.expert_input(contexts, m)
            for (t0, t1, n), members in groups.items():
                data = [getattr(envs[e], which) for e in members]
                z0 = np.concatenate([d[:, 0, :] for d in data])
                ctx_rows = np.concatenate([np.repeat(ctx_m[e][None], d.shape[0], axis=0)
                                           for e, d in zip(members, data)])
                roll = integrate_rk4(expert.make_field(ctx_rows), z0, TimeGrid(t0, t1, n),
                                     substeps, check_finite=False)
                pred = np.stack([v.data for v in roll.values], axis=1)  # (N, T, d)
                start = 0
                for e, d in zip(members, data):
                    p = pred[start:start + d.shape[0]]
                    start += d.shape[0]
                    err = np.sum((p - d) ** 2, axis=-1).mean()
                    out[m, e] = err if np.isfinite(err) else np.inf
    return out


def pair_experts(losses: np.ndarray, clustering: Clustering) -> np.ndarray:
    """Greedy cluster-to-expert pairing on per-cluster median losses.

    Clusters are visited in index order; each takes its lowest-median expert
    not already taken.  Empty clusters have an all-``inf`` column and so get a
    leftover expert.
    """
    losses = np.asarray(losses, dtype=np.float64)
    M = losses.shape[0]
    medians = np.full((M, M), np.inf)
    for c in range(M):
        members = clustering.assignment == c
        if members.any():
            medians[:, c] = np.median(losses[:, members], axis=1)
    selected: list[int] = []
    for c in range(M):
        order = np.argsort(medians[:, c], kind="stable")
        selected.append(int(next(m for m in order if m not in selected)))
    return np.array(selected, dtype=np.int64)


def fit_gate(
    contexts,
    pairing: np.ndarray,
    clustering: Clustering,
    sigma: float = 1e-4,
    rng: np.random.Generator | None = None,
    ridge: float = 1e-8,
) -> Gate:
    """Ridge-regularized least squares from noisy contexts to one-hot expert labels.

    The normal equations carry a small ridge so that degenerate contexts (all
    equal, fewer than ``d + 1``) still give a finite gate.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    E, d = X.shape
    M = len(pairing)
    Y = np.zeros((E, M))
    Y[np.arange(E), np.asarray(pairing)[clustering.assignment]] = 1.0
    rng = rng if rng is not None else np.random.default_rng()
    X = X + sigma * rng.standard_normal(X.shape)
    A = np.hstack([X, np.ones((E, 1))])
    N = A.T @ A + ridge * np.eye(d + 1)
    Wb = np.linalg.solve(N, A.T @ Y)
    # one refinement step removes most of the ridge bias on well-posed fits
    Wb += np.linalg.solve(N, A.T @ (Y - A @ Wb))
    return Gate(Wb[:-1], Wb[-1])


def gating_update(
    bank: ExpertBank,
    contexts,
    envs: list[EnvData],
    prev_centroids: np.ndarray | None,
    sigma: float = 1e-4,
    rng: np.random.Generator | None = None,
    substeps: int = 2,
    max_iters: int = 20,
    tol: float = 1e-3,
    losses: np.ndarray | None = None,
) -> tuple[Gate, np.ndarray | None, dict]:
    """Cluster, score, pair, fit.  Reads ``bank`` and ``contexts``; never writes them."""
    contexts = np.array(contexts, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng()
    M = bank.n_experts
    clustering = kmeans(contexts, prev_centroids, M, rng, max_iters, tol)
    if losses is None:
        losses = loss_matrix(bank, contexts, envs, substeps)
    pairing = pair_experts(losses, clustering)
    gate = fit_gate(contexts, pairing, clustering, sigma, rng)
    info = {"clustering": clustering, "losses": losses, "pairing": pairing}
    return gate, clustering.centroids, info


def softmax_gate_gradient(gate: Gate, contexts, losses: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradient of ``mean_e sum_m softmax(logits_e)_m * losses[m, e]`` in ``(W, b)``.

    Used by the gradient-descent gate of the naive mixture; infinite losses
    are clipped to ten times the largest finite one.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    L = np.asarray(losses, dtype=np.float64).T.copy()  # (E, M)
    finite = L[np.isfinite(L)]
    cap = 10.0 * finite.max() if finite.size else 1.0
    L[~np.isfinite(L)] = cap
    g = gate.logits(X)
    g = g - g.max(axis=1, keepdims=True)
    p = np.exp(g)
    p /= p.sum(axis=1, keepdims=True)
    E = X.shape[0]
    expected = (p * L).sum(axis=1, keepdims=True)
    value = float(expected.mean())
    dlogits = p * (L - expected) / E
    return value, X.T @ dlogits, dlogits.sum(axis=0)
