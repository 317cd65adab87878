"""Reconstruction metrics, routing purity and gating exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import svg

__all__ = [
    "EmptyMetricError",
    "EvalReport",
    "mse_loss",
    "rel_mse",
    "rel_mse_per_env",
    "tprmse",
    "routing_purity",
    "export_gating",
    "NORM_FLOOR",
]

NORM_FLOOR = 1e-6


class EmptyMetricError(ValueError):
    pass


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs true {true.shape}")
    if pred.ndim < 1:
        raise ValueError("need at least one state dimension")
    return pred, true


def mse_loss(pred, true) -> float:
    """Squared L2 error per state, averaged over every leading (env, traj, time) index."""
    pred, true = _pair(pred, true)
    return float(np.sum((pred - true) ** 2, axis=-1).mean())


def rel_mse(pred, true) -> float:
    """Mean of ``|x - x_hat|^2 / |x|^2`` over states with ``|x| > 1e-6``."""
    pred, true = _pair(pred, true)
    norm2 = np.sum(true**2, axis=-1)
    keep = np.sqrt(norm2) > NORM_FLOOR
    if not keep.any():
        raise EmptyMetricError("every state is below the norm floor; relative MSE is undefined")
    err2 = np.sum((pred - true) ** 2, axis=-1)
    return float((err2[keep] / norm2[keep]).mean())


def rel_mse_per_env(preds, trues) -> np.ndarray:
    return np.array([rel_mse(p, t) for p, t in zip(preds, trues)])


def tprmse(per_env_relmse, eps: float = 0.1) -> float:
    """Percentage of environments whose relative MSE is strictly below ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = np.asarray(per_env_relmse, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyMetricError("no environments")
    return float(100.0 * np.count_nonzero(v < eps) / v.size)


def routing_purity(routing, families) -> float:
    """Fraction of environments consistent with the best one-to-one family/expert matching.

    With fewer experts than families the matching is partial (unmatched
    families score zero).
    """
    routing = np.asarray(routing)
    families = list(families)
    if routing.size != len(families) or routing.size == 0:
        raise ValueError("routing and families must be non-empty and of equal length")
    fam_ids = sorted(set(map(str, families)))
    experts = sorted(set(routing.tolist()))
    counts = np.zeros((len(fam_ids), len(experts)))
    fi = {f: i for i, f in enumerate(fam_ids)}
    ei = {m: j for j, m in enumerate(experts)}
    for r, f in zip(routing.tolist(), families):
        counts[fi[str(f)], ei[r]] += 1
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return float(counts[rows, cols].sum() / routing.size)


@dataclass
class EvalReport:
    per_env_relmse: list
    relmse: float
    tprmse: float
    eps: float
    routing: list
    logits: list
    family_purity: dict = field(default_factory=dict)
    purity: float | None = None

    def to_dict(self) -> dict:
        out = {
            "per_env_relmse": self.per_env_relmse,
            "relmse": self.relmse,
            "tprmse": self.tprmse,
            "eps": self.eps,
            "routing": self.routing,
            "logits": self.logits,
        }
        if self.purity is not None:
            out["purity"] = self.purity
            out["family_purity"] = self.family_purity
        return out


def export_gating(gate, contexts, path) -> dict[str, Path]:
    """Write ``gating_logits.csv``, ``gating_histogram.csv`` and ``gating_heatmap.svg`` into ``path``.

    Logits CSV columns: ``env, logit_0 .. logit_{M-1}, expert``.
    Histogram CSV columns: ``expert, count``.
    """
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    logits = np.atleast_2d(gate.logits(contexts))
    routing = np.argmax(logits, axis=1)
    E, M = logits.shape
    files = {
        "logits": out_dir / "gating_logits.csv",
        "histogram": out_dir / "gating_histogram.csv",
        "heatmap": out_dir / "gating_heatmap.svg",
    }
    with files["logits"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env"] + [f"logit_{m}" for m in range(M)] + ["expert"])
        for e in range(E):
            w.writerow([e] + [repr(float(x)) for x in logits[e]] + [int(routing[e])])
    counts = np.bincount(routing, minlength=M)
    with files["histogram"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["expert", "count"])
        for m in range(M):
            w.writerow([m, int(counts[m])])
    files["heatmap"].write_text(svg.heatmap(logits, highlight=routing, title="gating logits (rows: environments)"))
    return files


def read_logits_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    M = sum(1 for h in header if h.startswith("logit_"))
    return np.array([[float(x) for x in r[1:1 + M]] for r in rows[1:]])
