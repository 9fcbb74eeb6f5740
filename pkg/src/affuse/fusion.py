"""Adaptive feature fusion block and its fusion-function catalog.

Sources ``x_k`` of extent ``d_k`` are projected to a shared extent ``d``::

    z_k = act(x_k W_k^T + b_k)

and then combined by one or more fusion functions:

* ``sum``       sum_k z_k
* ``prod``      elementwise prod_k z_k
* ``attention`` sum_k alpha_k z_k,  alpha = softmax_k(u^T tanh(W z_k + c))
* ``graph``     mean_k sum_j Ahat_kj z_j,  Ahat = D^-1 (A + I)
* ``gated``     mean_k sigmoid(W2 relu(W1 z_k)) * z_k

A meta-gate mixes the M function outputs per sample,
``g = softmax(V2 relu(V1 c))`` with context ``c = mean_k z_k``. In training
mode inverted dropout follows, and an auxiliary head reconstructs ``c``
(target gradient-blocked) from the fused vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .module import Linear, Module, glorot, zeros
from .rng import RngStream
from .tensor import (ShapeError, Tensor, activation, concat, detach, matmul, mul,
                     relu, sigmoid, softmax, tanh, transpose2d)

FUSION_FUNCTIONS = ("sum", "prod", "attention", "graph", "gated")
STATIC_KINDS = ("concat_linear", "add", "mul")
PROJECTION_ACTS = ("identity", "tanh", "relu")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; message carries the key path."""


# ---------------------------------------------------------------- configuration

def complete_graph(k: int) -> list[list[float]]:
    return [[0.0 if i == j else 1.0 for j in range(k)] for i in range(k)]


@dataclass
class FusionBlockConfig:
    sources: list[tuple[str, int]]
    common_dim: int = 16
    fusion_set: tuple[str, ...] = ("sum", "attention", "graph", "gated")
    source_graph: list[list[float]] | None = None
    attention_hidden: int = 16
    gate_bottleneck: int = 4
    meta_hidden: int = 16
    dropout_p: float = 0.0
    aux_weight: float = 0.0
    projection_act: str = "identity"

    def __post_init__(self):
        self.sources = [(str(n), int(d)) for n, d in self.sources]
        self.fusion_set = tuple(f for f in FUSION_FUNCTIONS if f in set(self.fusion_set))
        if self.source_graph is None and "graph" in self.fusion_set:
            self.source_graph = complete_graph(len(self.sources))
        self.validate()

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def validate(self, path: str = "fusion") -> None:
        if len(self.sources) < 1:
            raise ConfigError(f"{path}.sources: need at least one source")
        for i, (_, dk) in enumerate(self.sources):
            if dk < 1:
                raise ConfigError(f"{path}.sources[{i}]: extent must be >= 1")
        if not self.fusion_set:
            raise ConfigError(f"{path}.fusion_set: must name at least one of {FUSION_FUNCTIONS}")
        for key in ("common_dim", "attention_hidden", "gate_bottleneck", "meta_hidden"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{path}.{key}: must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"{path}.dropout_p: must lie in [0, 1)")
        if self.aux_weight < 0:
            raise ConfigError(f"{path}.aux_weight: must be >= 0")
        if self.projection_act not in PROJECTION_ACTS:
            raise ConfigError(f"{path}.projection_act: expected one of {PROJECTION_ACTS}")
        if self.source_graph is not None:
            try:
                SourceGraph(self.source_graph, self.num_sources)
            except ValueError as exc:
                raise ConfigError(f"{path}.source_graph: {exc}") from None

    @classmethod
    def from_dict(cls, raw: dict, path: str = "fusion") -> "FusionBlockConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected an object")
        allowed = {f for f in cls.__dataclass_fields__}
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"{path}.{key}: unknown key")
        if "sources" not in raw:
            raise ConfigError(f"{path}.sources: required")
        kwargs = dict(raw)
        sources = []
        for i, s in enumerate(raw["sources"]):
            if isinstance(s, dict):
                if set(s) != {"name", "d_k"}:
                    raise ConfigError(f"{path}.sources[{i}]: expected keys name, d_k")
                sources.append((s["name"], s["d_k"]))
            elif isinstance(s, (list, tuple)) and len(s) == 2:
                sources.append((s[0], s[1]))
            else:
                raise ConfigError(f"{path}.sources[{i}]: expected [name, d_k] or {{name, d_k}}")
        kwargs["sources"] = sources
        unknown = set(kwargs.get("fusion_set", ())) - set(FUSION_FUNCTIONS)
        if unknown:
            raise ConfigError(f"{path}.fusion_set: unknown function(s) {sorted(unknown)}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "sources": [{"name": n, "d_k": d} for n, d in self.sources],
            "common_dim": self.common_dim,
            "fusion_set": list(self.fusion_set),
            "source_graph": self.source_graph,
            "attention_hidden": self.attention_hidden,
            "gate_bottleneck": self.gate_bottleneck,
            "meta_hidden": self.meta_hidden,
            "dropout_p": self.dropout_p,
            "aux_weight": self.aux_weight,
            "projection_act": self.projection_act,
        }


@dataclass
class FusionOutput:
    y: Tensor
    alphas: Tensor | None = None
    gates: Tensor | None = None
    aux_pred: Tensor | None = None
    aux_target: Tensor | None = None
    z: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------- components

class ProjectionHead(Module):
    def __init__(self, d_in: int, d: int, act: str, rng: RngStream):
        self.weight = glorot((d, d_in), d_in, d, rng)
        self.bias = zeros(d)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        return activation(self.act, matmul(x, transpose2d(self.weight)) + self.bias)


class AttentionHead(Module):
    """Scores one scalar per (sample, source): u^T tanh(W z + c)."""

    def __init__(self, d: int, a: int, rng: RngStream):
        self.W = glorot((a, d), d, a, rng)
        self.c = zeros(a)
        self.u = glorot((a,), a, 1, rng)

    def score(self, z: Tensor) -> Tensor:
        h = tanh(matmul(z, transpose2d(self.W)) + self.c)
        return matmul(h, self.u.reshape(-1, 1))


class ChannelGate(Module):
    """Squeeze-excitation style channel gate, sigmoid(W2 relu(W1 z))."""

    def __init__(self, d: int, h: int, rng: RngStream):
        self.W1 = glorot((h, d), d, h, rng)
        self.W2 = glorot((d, h), h, d, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return sigmoid(matmul(relu(matmul(z, transpose2d(self.W1))), transpose2d(self.W2)))


class MetaGate(Module):
    def __init__(self, d: int, h: int, m: int, rng: RngStream):
        self.V1 = glorot((h, d), d, h, rng)
        self.V2 = glorot((m, h), h, m, rng)

    @property
    def num_functions(self) -> int:
        return self.V2.shape[0]

    def __call__(self, context: Tensor) -> Tensor:
        h = relu(matmul(context, transpose2d(self.V1)))
        return softmax(matmul(h, transpose2d(self.V2)), axis=1)


class SourceGraph:
    """Fixed K×K source relation with row-stochastic ``normalized = D^-1 (A + I)``."""

    def __init__(self, adjacency, k: int | None = None):
        a = np.array(adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if k is not None and a.shape[0] != k:
            raise ValueError(f"adjacency is {a.shape[0]}x{a.shape[0]} but there are {k} sources")
        if np.any(a < 0) or not np.isfinite(a).all():
            raise ValueError("adjacency entries must be finite and nonnegative")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency diagonal must be zero")
        self.adjacency = a
        a_hat = a + np.eye(a.shape[0])
        self.normalized = a_hat / a_hat.sum(axis=1, keepdims=True)

    @property
    def k(self) -> int:
        return self.adjacency.shape[0]


# ---------------------------------------------------------------- fusion functions

def _check_sources(z: Sequence[Tensor]) -> tuple[int, int]:
    if len(z) < 1:
        raise ShapeError("need at least one source")
    shape = z[0].shape
    if len(shape) != 2:
        raise ShapeError(f"sources must be (B, d), got {shape}")
    for t in z[1:]:
        if t.shape != shape:
            raise ShapeError(f"source shapes differ: {shape} vs {t.shape}")
    return shape


def _column_spread(k: int, n: int, d: int) -> np.ndarray:
    """(n, d) selector: weights @ it repeats column k of an (B, n) weight matrix d times."""
    e = np.zeros((n, d))
    e[k] = 1.0
    return e


def _weighted_sum(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """Per-sample sum_k weights[:, k] * xs[k]."""
    n = len(xs)
    d = xs[0].shape[1]
    out = None
    for k, x in enumerate(xs):
        term = mul(matmul(weights, Tensor(_column_spread(k, n, d))), x)
        out = term if out is None else out + term
    return out


def project_sources(inputs: Sequence[Tensor], heads: Sequence[ProjectionHead]) -> list[Tensor]:
    if len(inputs) != len(heads):
        raise ShapeError(f"{len(inputs)} inputs for {len(heads)} projection heads")
    batch = {x.shape[0] for x in inputs}
    if len(batch) != 1:
        raise ShapeError(f"batch extents disagree: {sorted(batch)}")
    out = []
    for k, (x, head) in enumerate(zip(inputs, heads)):
        if x.ndim != 2 or x.shape[1] != head.weight.shape[1]:
            raise ShapeError(f"source {k}: expected (B, {head.weight.shape[1]}), got {x.shape}")
        out.append(head(x))
    return out


def fuse_static(kind: str, z: Sequence[Tensor], linear: Linear | None = None) -> Tensor:
    _check_sources(z)
    if kind == "add":
        out = z[0]
        for t in z[1:]:
            out = out + t
        return out
    if kind == "mul":
        out = z[0]
        for t in z[1:]:
            out = mul(out, t)
        return out
    if kind == "concat_linear":
        if linear is None:
            raise ValueError("concat_linear needs its (d x Kd) affine map")
        return linear(concat(list(z), axis=1))
    raise ValueError(f"unknown static fusion {kind!r}")


def attention_scores(z: Sequence[Tensor], head: AttentionHead) -> Tensor:
    return concat([head.score(t) for t in z], axis=1)


def fuse_attention(z: Sequence[Tensor], head: AttentionHead) -> tuple[Tensor, Tensor]:
    _check_sources(z)
    alphas = softmax(attention_scores(z, head), axis=1)
    return _weighted_sum(alphas, z), alphas


def fuse_graph(z: Sequence[Tensor], graph: SourceGraph) -> Tensor:
    _check_sources(z)
    k = len(z)
    if graph.k != k:
        raise ShapeError(f"graph has {graph.k} nodes for {k} sources")
    a_hat = graph.normalized
    out = None
    for i in range(k):
        agg = None
        for j in range(k):
            term = z[j] * float(a_hat[i, j])
            agg = term if agg is None else agg + term
        out = agg if out is None else out + agg
    return out * (1.0 / k)


def fuse_gated(z: Sequence[Tensor], gates: Sequence[ChannelGate]) -> Tensor:
    _check_sources(z)
    if len(gates) != len(z):
        raise ShapeError(f"{len(gates)} gates for {len(z)} sources")
    out = None
    for t, gate in zip(z, gates):
        term = mul(gate(t), t)
        out = term if out is None else out + term
    return out * (1.0 / len(z))


def source_context(z: Sequence[Tensor]) -> Tensor:
    out = z[0]
    for t in z[1:]:
        out = out + t
    return out * (1.0 / len(z))


def meta_combine(ys: Sequence[Tensor], z: Sequence[Tensor], gate: MetaGate) -> tuple[Tensor, Tensor]:
    if len(ys) < 1:
        raise ShapeError("meta_combine needs at least one fusion output")
    if len(ys) != gate.num_functions:
        raise ShapeError(f"{len(ys)} fusion outputs for a {gate.num_functions}-way gate")
    _check_sources(z)
    shape = _check_sources(ys)
    if shape != z[0].shape:
        raise ShapeError(f"fusion outputs {shape} do not match sources {z[0].shape}")
    g = gate(source_context(z))
    return _weighted_sum(g, ys), g


def inverted_dropout(y: Tensor, p: float, rng: RngStream) -> Tensor:
    """Zero each coordinate with probability p (keep iff u > p), scale survivors by 1/(1-p)."""
    if p <= 0.0:
        return y
    keep = rng.uniform_array(y.shape) > p
    return mul(y, Tensor(keep / (1.0 - p)))


# ---------------------------------------------------------------- blocks

def build_heads(cfg: FusionBlockConfig, rng: RngStream) -> list[ProjectionHead]:
    return [ProjectionHead(dk, cfg.common_dim, cfg.projection_act, rng) for _, dk in cfg.sources]


class FusionBlock(Module):
    """The adaptive fusion layer: projections, active fusion functions, meta-gate, aux head."""

    def __init__(self, cfg: FusionBlockConfig, rng: RngStream,
                 heads: list[ProjectionHead] | None = None):
        self.cfg = cfg
        d = cfg.common_dim
        self.heads = heads if heads is not None else build_heads(cfg, rng)
        if len(self.heads) != cfg.num_sources:
            raise ConfigError("fusion.sources: head count mismatch")
        self.attention = AttentionHead(d, cfg.attention_hidden, rng) if "attention" in cfg.fusion_set else None
        self.gates = ([ChannelGate(d, cfg.gate_bottleneck, rng) for _ in cfg.sources]
                      if "gated" in cfg.fusion_set else [])
        self.graph = SourceGraph(cfg.source_graph, cfg.num_sources) if "graph" in cfg.fusion_set else None
        self.meta = MetaGate(d, cfg.meta_hidden, len(cfg.fusion_set), rng)
        self.aux = Linear(d, d, rng) if cfg.aux_weight > 0 else None

    def __call__(self, inputs: Sequence[Tensor], mode: str = "eval",
                 rng: RngStream | None = None) -> FusionOutput:
        return fusion_block_forward(self, inputs, mode, rng)


def fusion_block_forward(block: FusionBlock, inputs: Sequence[Tensor], mode: str = "eval",
                         rng: RngStream | None = None) -> FusionOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = block.cfg
    if len(inputs) != cfg.num_sources:
        raise ShapeError(f"block expects {cfg.num_sources} sources, got {len(inputs)}")
    z = project_sources(inputs, block.heads)
    ys, alphas = [], None
    for name in cfg.fusion_set:
        if name == "sum":
            ys.append(fuse_static("add", z))
        elif name == "prod":
            ys.append(fuse_static("mul", z))
        elif name == "attention":
            y, alphas = fuse_attention(z, block.attention)
            ys.append(y)
        elif name == "graph":
            ys.append(fuse_graph(z, block.graph))
        elif name == "gated":
            ys.append(fuse_gated(z, block.gates))
    y, gates = meta_combine(ys, z, block.meta)
    if mode == "train" and cfg.dropout_p > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an RngStream")
        y = inverted_dropout(y, cfg.dropout_p, rng)
    out = FusionOutput(y=y, alphas=alphas, gates=gates, z=z)
    if block.aux is not None:
        out.aux_pred = block.aux(y)
        out.aux_target = detach(source_context(z))
    return out


class StaticFusion(Module):
    """Baseline arm: the same projection heads followed by a fixed combiner."""

    def __init__(self, kind: str, cfg: FusionBlockConfig, rng: RngStream,
                 heads: list[ProjectionHead] | None = None):
        if kind not in STATIC_KINDS:
            raise ConfigError(f"unknown static fusion {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.heads = heads if heads is not None else build_heads(cfg, rng)
        d = cfg.common_dim
        self.linear = Linear(cfg.num_sources * d, d, rng) if kind == "concat_linear" else None

    def __call__(self, inputs: Sequence[Tensor], mode: str = "eval",
                 rng: RngStream | None = None) -> FusionOutput:
        z = project_sources(inputs, self.heads)
        y = fuse_static(self.kind, z, self.linear)
        if mode == "train" and self.cfg.dropout_p > 0:
            if rng is None:
                raise ValueError("training-mode dropout needs an RngStream")
            y = inverted_dropout(y, self.cfg.dropout_p, rng)
        return FusionOutput(y=y, z=z)
