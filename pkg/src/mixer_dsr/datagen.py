"""Deterministic generation of the multi-family ODE benchmarks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .container import ContainerError, VersionMismatchError, read_container, write_container
from .families import LOTKA_VOLTERRA, ODEBENCH_10, ODEBENCH_2, FAMILIES, OdeFamily
from .odesolve import IntegrationBlowUp, StiffnessError, TimeGrid, integrate_adaptive

__all__ = [
    "BENCHMARKS",
    "BenchmarkSpec",
    "ConfigError",
    "GenerationError",
    "MetadataMaskedError",
    "EnvData",
    "EnvironmentSet",
    "sample_initial_conditions",
    "parameter_grid",
    "generate",
    "save",
    "load",
    "write_manifest",
]

DATASET_FORMAT = "mixer-dsr/dataset"
SCHEMA_VERSION = 1
MAX_RESAMPLES = 10
GEN_RTOL, GEN_ATOL = 1e-8, 1e-10


class GenerationError(RuntimeError):
    pass


class MetadataMaskedError(AttributeError):
    pass


@dataclass(frozen=True)
class BenchmarkSpec:
    families: tuple[OdeFamily, ...]
    envs_per_family: int
    adapt_envs_per_family: int = 4
    n_train_ics: int = 4
    n_test_ics: int = 32
    n_adapt_train_ics: int = 1
    n_adapt_test_ics: int = 32


BENCHMARKS: dict[str, BenchmarkSpec] = {
    "odebench-10a": BenchmarkSpec(tuple(FAMILIES[i] for i in ODEBENCH_10), 5),
    "odebench-10b": BenchmarkSpec(tuple(FAMILIES[i] for i in ODEBENCH_10), 16),
    "odebench-2": BenchmarkSpec(ODEBENCH_2, 5),
    "lv": BenchmarkSpec((LOTKA_VOLTERRA,), 9),
}


@dataclass
class EnvData:
    """Model-facing view of one environment: a time grid and two trajectory stacks.

    For training environments ``train``/``test`` hold the train and test
    splits; for adaptation environments they hold adapt-train/adapt-test.
    Arrays are ``(n_trajectories, n_steps + 1, d)``.
    """

    split: str
    times: np.ndarray
    train: np.ndarray
    test: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(float(self.times[0]), float(self.times[-1]), self.times.size - 1)


@dataclass
class EnvironmentSet:
    benchmark: str
    seed: int
    train_envs: list[EnvData]
    adapt_envs: list[EnvData]
    _metadata: dict | None = field(default=None, repr=False)

    @property
    def metadata(self) -> dict:
        """Evaluation-only ground truth: family ids and true parameters."""
        if self._metadata is None:
            raise MetadataMaskedError("metadata is masked in this view")
        return self._metadata

    @property
    def has_metadata(self) -> bool:
        return self._metadata is not None

    def masked(self) -> "EnvironmentSet":
        return EnvironmentSet(self.benchmark, self.seed, self.train_envs, self.adapt_envs, None)

    def train_families(self) -> list:
        return [m["family"] for m in self.metadata["train"]]

    def adapt_families(self) -> list:
        return [m["family"] for m in self.metadata["adapt"]]

    def counts(self) -> dict:
        def _c(envs, key):
            return sorted({getattr(e, key).shape[0] for e in envs})

        return {
            "train_envs": len(self.train_envs),
            "train_trajectories_per_env": _c(self.train_envs, "train"),
            "test_trajectories_per_env": _c(self.train_envs, "test"),
            "adapt_envs": len(self.adapt_envs),
            "adapt_train_trajectories_per_env": _c(self.adapt_envs, "train"),
            "adapt_test_trajectories_per_env": _c(self.adapt_envs, "test"),
        }


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_initial_conditions(family: OdeFamily, count: int, seed) -> list[np.ndarray]:
    """Per-dimension uniform draws between the family's two reference conditions."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _rng(seed)
    a, b = (np.asarray(r, dtype=np.float64) for r in family.ic_refs)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    out = []
    while len(out) < count:
        z0 = lo + (hi - lo) * rng.random(lo.size)
        if family.ic_ok is None or family.ic_ok(z0):
            out.append(z0)
    return out


def _int_root(n: int, p: int) -> int | None:
    k = round(n ** (1.0 / p))
    for cand in (k - 1, k, k + 1):
        if cand >= 1 and cand**p == n:
            return cand
    return None


def _adapt_scales(n: int) -> np.ndarray:
    n_low = math.ceil(n / 2)
    n_high = n - n_low
    low = [0.8 + 0.1 * i / n_low for i in range(n_low)]
    high = [1.2 - 0.1 * i / n_high for i in range(n_high)]
    return np.array(sorted(low + high))


def parameter_grid(family: OdeFamily, n_envs: int, mode: str = "train", layout: str = "auto") -> list[tuple]:
    """Environment parameter tuples for ``family``.

    ``train`` spans 90-110% of the reference values: a Cartesian grid when
    ``n_envs`` is a perfect power of the number of varied parameters, otherwise
    a joint (diagonal) sweep.  ``adapt`` spaces points linearly over 80-90% and
    110-120%, so it never overlaps the training interval.
    """
    if mode not in ("train", "adapt"):
        raise ConfigError(f"mode must be 'train' or 'adapt', got {mode!r}")
    if layout not in ("auto", "cartesian", "diagonal"):
        raise ConfigError(f"unknown layout {layout!r}")
    if n_envs < 1:
        raise ConfigError("n_envs must be >= 1")
    base = np.asarray(family.params, dtype=np.float64)
    varied = family.varied_indices

    def _with(scales: dict[int, float]) -> tuple:
        p = base.copy()
        for i, s in scales.items():
            p[i] = base[i] * s
        return tuple(float(x) for x in p)

    if mode == "adapt":
        return [_with({i: s for i in varied}) for s in _adapt_scales(n_envs)]

    k = _int_root(n_envs, len(varied))
    if layout == "cartesian" and k is None:
        raise ConfigError(
            f"{n_envs} environments is not a Cartesian grid over {len(varied)} parameters of family {family.id}"
        )
    if layout != "diagonal" and k is not None:
        axis = np.linspace(0.9, 1.1, k) if k > 1 else np.array([1.0])
        return [_with(dict(zip(varied, combo))) for combo in product(axis, repeat=len(varied))]
    scales = np.linspace(0.9, 1.1, n_envs) if n_envs > 1 else np.array([1.0])
    return [_with({i: s for i in varied}) for s in scales]


def _simulate(family: OdeFamily, params: tuple, count: int, rng: np.random.Generator) -> np.ndarray:
    grid = TimeGrid(0.0, family.horizon, family.n_steps)
    fieldfn = family.field(params)
    trajs = []
    for z0 in sample_initial_conditions(family, count, rng):
        for attempt in range(MAX_RESAMPLES + 1):
            try:
                trajs.append(integrate_adaptive(fieldfn, z0, grid, GEN_RTOL, GEN_ATOL).states)
                break
            except (IntegrationBlowUp, StiffnessError) as exc:
                if attempt == MAX_RESAMPLES:
                    raise GenerationError(
                        f"family {family.id} ({family.name}) failed to integrate with params {params} "
                        f"after {MAX_RESAMPLES} resamples: {exc}"
                    ) from exc
                z0 = sample_initial_conditions(family, 1, rng)[0]
    return np.stack(trajs)


def generate(
    benchmark: str,
    seed: int = 0,
    *,
    envs_per_family: int | None = None,
    adapt_envs_per_family: int | None = None,
    n_train_ics: int | None = None,
    n_test_ics: int | None = None,
) -> EnvironmentSet:
    if benchmark not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {benchmark!r}; choose from {sorted(BENCHMARKS)}")
    spec = BENCHMARKS[benchmark]
    n_env = envs_per_family or spec.envs_per_family
    n_adapt = spec.adapt_envs_per_family if adapt_envs_per_family is None else adapt_envs_per_family
    n_tr = n_train_ics or spec.n_train_ics
    n_te = n_test_ics or spec.n_test_ics

    root = np.random.SeedSequence(seed)
    shuffle_seq, *family_seqs = root.spawn(len(spec.families) + 1)
    train, train_meta, adapt, adapt_meta = [], [], [], []
    for fam, fseq in zip(spec.families, family_seqs):
        rng = np.random.default_rng(fseq)
        times = TimeGrid(0.0, fam.horizon, fam.n_steps).times()
        for params in parameter_grid(fam, n_env, "train"):
            train.append(EnvData("train", times, _simulate(fam, params, n_tr, rng), _simulate(fam, params, n_te, rng)))
            train_meta.append({"family": fam.id, "family_name": fam.name, "params": list(params)})
        for params in (parameter_grid(fam, n_adapt, "adapt") if n_adapt else []):
            adapt.append(EnvData(
                "adapt", times,
                _simulate(fam, params, spec.n_adapt_train_ics, rng),
                _simulate(fam, params, spec.n_adapt_test_ics, rng),
            ))
            adapt_meta.append({"family": fam.id, "family_name": fam.name, "params": list(params)})

    order = np.random.default_rng(shuffle_seq).permutation(len(train))
    train = [train[i] for i in order]
    train_meta = [train_meta[i] for i in order]
    return EnvironmentSet(benchmark, seed, train, adapt, {"train": train_meta, "adapt": adapt_meta})


def save(envset: EnvironmentSet, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for tag, envs, names in (("train", envset.train_envs, ("train", "test")),
                             ("adapt", envset.adapt_envs, ("adapt_train", "adapt_test"))):
        for i, env in enumerate(envs):
            arrays[f"{tag}/{i:04d}/times"] = env.times
            arrays[f"{tag}/{i:04d}/{names[0]}"] = env.train
            arrays[f"{tag}/{i:04d}/{names[1]}"] = env.test
    header = {
        "format": DATASET_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "benchmark": envset.benchmark,
        "seed": envset.seed,
        "n_train_envs": len(envset.train_envs),
        "n_adapt_envs": len(envset.adapt_envs),
    }
    write_container(path, header, arrays, envset._metadata)


def load(path, mask_metadata: bool = False) -> EnvironmentSet:
    """Read a dataset file; with ``mask_metadata`` the metadata section is never parsed."""
    header, arrays, metadata = read_container(path, DATASET_FORMAT, with_metadata=not mask_metadata)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise VersionMismatchError(
            f"{path}: dataset schema {header.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    try:
        train = [
            EnvData("train", arrays[f"train/{i:04d}/times"], arrays[f"train/{i:04d}/train"], arrays[f"train/{i:04d}/test"])
            for i in range(header["n_train_envs"])
        ]
        adapt = [
            EnvData("adapt", arrays[f"adapt/{i:04d}/times"], arrays[f"adapt/{i:04d}/adapt_train"],
                    arrays[f"adapt/{i:04d}/adapt_test"])
            for i in range(header["n_adapt_envs"])
        ]
    except KeyError as exc:
        raise ContainerError(f"{path}: missing array {exc}") from None
    return EnvironmentSet(header["benchmark"], header["seed"], train, adapt, metadata)


def write_manifest(envset: EnvironmentSet, path) -> str:
    c = envset.counts()
    lines = [
        f"benchmark: {envset.benchmark}",
        f"seed: {envset.seed}",
        f"train environments: {c['train_envs']}",
        f"train trajectories per environment: {','.join(map(str, c['train_trajectories_per_env']))}",
        f"test trajectories per environment: {','.join(map(str, c['test_trajectories_per_env']))}",
        f"adaptation environments: {c['adapt_envs']}",
        f"adapt-train trajectories per environment: {','.join(map(str, c['adapt_train_trajectories_per_env']))}",
        f"adapt-test trajectories per environment: {','.join(map(str, c['adapt_test_trajectories_per_env']))}",
    ]
    if envset.has_metadata:
        fams = envset.train_families()
        lines.append(f"families: {len(set(map(str, fams)))}")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text
