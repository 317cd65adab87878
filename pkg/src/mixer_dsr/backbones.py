"""Context-conditioned MLP vector fields.

Weights are stored ``(in, out)`` so a layer is ``h @ W + b``.  Every backbone
builds its vector field from a context that is either one ``(d_ctx,)`` vector
or an ``(N, d_ctx)`` matrix with one row per state row.  The per-row form lets
trajectories from different environments share a single rollout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffengine as de

__all__ = [
    "MlpParams",
    "Backbone",
    "ConcatBackbone",
    "HypernetBackbone",
    "LoraBackbone",
    "BACKBONE_KINDS",
    "init_backbone",
    "init_mlp",
    "eval_field",
]

_ACTIVATIONS: dict[str, Callable[[de.Value], de.Value]] = {
    "swish": de.swish,
    "relu": de.relu,
    "tanh": de.tanh,
}


def _activate(name: str, x: de.Value) -> de.Value:
    if name == "identity":
        return x
    return _ACTIVATIONS[name](x)


@dataclass
class MlpParams:
    weights: list[de.Value]
    biases: list[de.Value]
    activations: list[str]

    def __post_init__(self):
        for w0, w1 in zip(self.weights[:-1], self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError(f"layer dimensions do not chain: {w0.shape} -> {w1.shape}")
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, h: de.Value) -> de.Value:
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(act, de.affine(h, w, b))
        return h

    def parameters(self) -> list[de.Value]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(dims: list[int], rng: np.random.Generator, activation: str = "swish",
             final_activation: str = "identity") -> MlpParams:
    """Lecun-normal weights (std = 1/sqrt(fan_in)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(de.parameter(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)))
        biases.append(de.parameter(np.zeros(fan_out)))
    acts = [activation] * (len(dims) - 2) + [final_activation]
    return MlpParams(weights, biases, acts)


def _xavier_uniform(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Backbone:
    kind: str = ""
    state_dim: int
    ctx_dim: int

    def parameters(self) -> list[de.Value]:
        raise NotImplementedError

    def make_field(self, ctx) -> Callable[[de.Value], de.Value]:
        """Vector field ``z -> G(z; ctx)``; context work is done once, here."""
        raise NotImplementedError

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ValueError(f"shape mismatch loading parameters: {p.shape} vs {np.shape(a)}")
            p.data = np.array(a, dtype=np.float64, copy=True)

    def _check_ctx(self, ctx) -> de.Value:
        ctx = ctx if isinstance(ctx, de.Value) else de.constant(ctx)
        if ctx.shape[-1] != self.ctx_dim:
            raise de.ShapeError(f"{self.kind} context", ctx.shape, (self.ctx_dim,))
        return ctx


class ConcatBackbone(Backbone):
    """Context and state features are concatenated and fed to the root MLP.

    Root input is ``[data features | context features]``.  The context half of
    the first root layer is applied once per rollout, which is the same map as
    concatenating at every evaluation (see :meth:`forward_concat`).
    """

    kind = "concat"

    def __init__(self, root: MlpParams, context_net: MlpParams, data_net: MlpParams):
        self.root, self.context_net, self.data_net = root, context_net, data_net
        self.state_dim = data_net.dims[0]
        self.ctx_dim = context_net.dims[0]
        feat = data_net.dims[-1] + context_net.dims[-1]
        if root.dims[0] != feat or root.dims[-1] != self.state_dim:
            raise ValueError(f"root dims {root.dims} incompatible with features {feat}")
        self._split = data_net.dims[-1]

    def parameters(self):
        return self.root.parameters() + self.context_net.parameters() + self.data_net.parameters()

    def make_field(self, ctx):
        ctx = self._check_ctx(ctx)
        w1, b1 = self.root.weights[0], self.root.biases[0]
        ctx_term = de.matmul(self.context_net.forward(ctx), de.slice(w1, np.s_[self._split:, :]))
        w1_data = de.slice(w1, np.s_[: self._split, :])
        act1 = self.root.activations[0]
        rest = MlpParams(self.root.weights[1:], self.root.biases[1:], self.root.activations[1:])

        def field(z):
            h = _activate(act1, de.add(de.affine(self.data_net.forward(z), w1_data, b1), ctx_term))
            return rest.forward(h)

        return field

    def forward_concat(self, z: de.Value, ctx: de.Value) -> de.Value:
        """Literal concatenation; ``z`` and ``ctx`` must have matching rank."""
        feats = de.concat([self.data_net.forward(z), self.context_net.forward(ctx)], axis=-1)
        return self.root.forward(feats)


class HypernetBackbone(Backbone):
    """Linear hypernetwork: root weights ``theta = hyper_bias + hyper_weights @ xi``.

    Per layer, the hypernetwork columns for ``W`` are stored as an
    ``(in, d_ctx * out)`` block matrix whose block ``k`` is the weight
    direction scaled by ``xi[k]``; biases likewise as ``(d_ctx * out,)``.
    :meth:`hyper_weights_matrix` flattens them into the usual
    ``(n_root_params, d_ctx)`` layout.
    """

    kind = "hypernet"

    def __init__(self, base: MlpParams, hyper_w: list[de.Value], hyper_b: list[de.Value], ctx_dim: int):
        self.base = base
        self.hyper_w, self.hyper_b = hyper_w, hyper_b
        self.ctx_dim = ctx_dim
        self.state_dim = base.dims[0]
        if base.dims[-1] != self.state_dim:
            raise ValueError("root output must match the state dimension")
        self._expand, self._collapse = [], []
        for w in base.weights:
            out = w.shape[1]
            self._expand.append(np.kron(np.eye(ctx_dim), np.ones((1, out))))
            self._collapse.append(np.kron(np.ones((ctx_dim, 1)), np.eye(out)))

    def parameters(self):
        out = self.base.parameters()
        for hw, hb in zip(self.hyper_w, self.hyper_b):
            out += [hw, hb]
        return out

    def make_field(self, ctx):
        ctx = self._check_ctx(ctx)
        gates = [de.matmul(ctx, de.constant(e)) for e in self._expand]
        collapse = [de.constant(c) for c in self._collapse]
        layers = list(zip(self.base.weights, self.base.biases, self.base.activations,
                          self.hyper_w, self.hyper_b, gates, collapse))

        def field(z):
            h = z
            for w, b, act, hw, hb, g, s in layers:
                delta = de.matmul(de.mul(de.affine(h, hw, hb), g), s)
                h = _activate(act, de.add(de.affine(h, w, b), delta))
            return h

        return field

    def generate_weights(self, xi) -> list[tuple[np.ndarray, np.ndarray]]:
        xi = np.asarray(xi, dtype=np.float64)
        out = []
        for w, b, hw, hb in zip(self.base.weights, self.base.biases, self.hyper_w, self.hyper_b):
            n_out = w.shape[1]
            W = w.data.copy()
            B = b.data.copy()
            for k in range(self.ctx_dim):
                W += xi[k] * hw.data[:, k * n_out:(k + 1) * n_out]
                B += xi[k] * hb.data[k * n_out:(k + 1) * n_out]
            out.append((W, B))
        return out

    def hyper_bias_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.data.ravel(), b.data]) for w, b in
                               zip(self.base.weights, self.base.biases)])

    def hyper_weights_matrix(self) -> np.ndarray:
        cols = []
        for k in range(self.ctx_dim):
            parts = []
            for w, hw, hb in zip(self.base.weights, self.hyper_w, self.hyper_b):
                n_out = w.shape[1]
                parts += [hw.data[:, k * n_out:(k + 1) * n_out].ravel(), hb.data[k * n_out:(k + 1) * n_out]]
            cols.append(np.concatenate(parts))
        return np.stack(cols, axis=1)


class LoraBackbone(Backbone):
    """Per-layer context-scaled low-rank update: ``W_eff = W + B diag(xi) A``.

    In the ``(in, out)`` storage convention ``B`` is ``(in, d_ctx)`` and ``A``
    is ``(d_ctx, out)``; transposed, this is the usual ``W + A diag(xi) B``
    on ``(out, in)`` weights.
    """

    kind = "lora"

    def __init__(self, root: MlpParams, lora_a: list[de.Value], lora_b: list[de.Value], ctx_dim: int):
        self.root, self.lora_a, self.lora_b = root, lora_a, lora_b
        self.ctx_dim = ctx_dim
        self.state_dim = root.dims[0]
        if root.dims[-1] != self.state_dim:
            raise ValueError("root output must match the state dimension")

    def parameters(self):
        out = self.root.parameters()
        for a, b in zip(self.lora_a, self.lora_b):
            out += [a, b]
        return out

    def make_field(self, ctx):
        ctx = self._check_ctx(ctx)
        layers = list(zip(self.root.weights, self.root.biases, self.root.activations, self.lora_a, self.lora_b))

        def field(z):
            h = z
            for w, b, act, a, bb in layers:
                h = de.lowrank_dense(h, w, b, bb, a, ctx, act)
            return h

        return field

    def effective_weights(self, xi) -> list[np.ndarray]:
        xi = np.asarray(xi, dtype=np.float64)
        return [w.data + (b.data * xi) @ a.data for w, a, b in zip(self.root.weights, self.lora_a, self.lora_b)]


BACKBONE_KINDS = ("concat", "hypernet", "lora")


def init_backbone(
    kind: str,
    state_dim: int,
    ctx_dim: int,
    seed: int,
    width: int = 64,
    depth: int = 3,
    activation: str = "swish",
    feature_dim: int = 32,
) -> Backbone:
    """Deterministic backbone initialization; ``depth`` counts linear layers of the root."""
    if kind not in BACKBONE_KINDS:
        raise ValueError(f"unknown backbone kind {kind!r}; choose from {BACKBONE_KINDS}")
    if state_dim < 1 or ctx_dim < 1 or width < 1 or depth < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    hidden = [width] * (depth - 1)
    if kind == "concat":
        data_net = init_mlp([state_dim, feature_dim], rng, activation, final_activation=activation)
        context_net = init_mlp([ctx_dim, feature_dim], rng, activation, final_activation=activation)
        root = init_mlp([2 * feature_dim, *hidden, state_dim], rng, activation)
        return ConcatBackbone(root, context_net, data_net)
    root = init_mlp([state_dim, *hidden, state_dim], rng, activation)
    if kind == "hypernet":
        hyper_w, hyper_b = [], []
        for w in root.weights:
            fan_in, fan_out = w.shape
            scale = 1.0 / np.sqrt(fan_in * ctx_dim)
            hyper_w.append(de.parameter(scale * rng.standard_normal((fan_in, ctx_dim * fan_out))))
            hyper_b.append(de.parameter(np.zeros(ctx_dim * fan_out)))
        return HypernetBackbone(root, hyper_w, hyper_b, ctx_dim)
    lora_a, lora_b = [], []
    for w in root.weights:
        fan_in, fan_out = w.shape
        lora_a.append(de.parameter(_xavier_uniform(rng, (ctx_dim, fan_out), ctx_dim, fan_out)))
        lora_b.append(de.parameter(_xavier_uniform(rng, (fan_in, ctx_dim), fan_in, ctx_dim)))
    return LoraBackbone(root, lora_a, lora_b, ctx_dim)


def eval_field(backbone: Backbone, xi, z) -> de.Value:
    """One evaluation of ``G(z; xi)``; differentiable in parameters, ``xi`` and ``z``."""
    return backbone.make_field(xi)(z)
