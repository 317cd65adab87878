"""Independent oracles shared by the test modules."""

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f(list_of_arrays)`` w.r.t. every entry."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b) -> float:
    """Norm-wise relative error, guarded against two (near) zero vectors."""
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, list) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, list) else np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def loop_mse(pred, true):
    """Trajectory MSE with explicit loops over (env, traj, time, dim)."""
    E, I, T, d = pred.shape
    total = 0.0
    for e in range(E):
        for i in range(I):
            for t in range(T):
                s = 0.0
                for k in range(d):
                    s += (pred[e, i, t, k] - true[e, i, t, k]) ** 2
                total += s
    return total / (E * I * T)


def loop_rel_mse(pred, true, floor=1e-6):
    E, I, T, d = pred.shape
    total, count = 0.0, 0
    for e in range(E):
        for i in range(I):
            for t in range(T):
                num = sum((pred[e, i, t, k] - true[e, i, t, k]) ** 2 for k in range(d))
                den = sum(true[e, i, t, k] ** 2 for k in range(d))
                if den ** 0.5 > floor:
                    total += num / den
                    count += 1
    return total / count


def loop_tprmse(values, eps):
    hits = 0
    for v in values:
        if v < eps:
            hits += 1
    return 100.0 * hits / len(values)


def brute_force_purity(routing, families):
    """Best injective family->expert matching by enumerating permutations."""
    from itertools import permutations

    fams = sorted(set(families), key=str)
    experts = sorted(set(routing))
    pairs = list(zip(routing, families))
    best = 0
    if len(experts) >= len(fams):
        for chosen in permutations(experts, len(fams)):
            match = dict(zip(fams, chosen))
            best = max(best, sum(1 for r, f in pairs if match[f] == r))
    else:
        for chosen in permutations(fams, len(experts)):
            match = dict(zip(experts, chosen))
            best = max(best, sum(1 for r, f in pairs if match[r] == f))
    return best / len(routing)
