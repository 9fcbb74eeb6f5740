"""Tiny reference architectures with multi-source fusion insertion points.

Each architecture is a feature extractor that yields K source tensors, a
fusion layer (adaptive block or a static baseline over the same projection
heads) and an affine classifier d -> C.

========  ==========================================  =================
arch      sources                                     input batch
========  ==========================================  =================
direct    the dataset's K source vectors as given     list of (B, d_k)
cnn       GAP after conv stage 1 (8), stage 2 (16)    (B, 1, 16, 16)
rnn       h_T, mean_t h_t, max_t h_t (32 each)        int ids (B, T)
gcn       mean-pool of layer 1 and layer 2 (16 each)  list of (A, X)
========  ==========================================  =================

Parameters are initialised in the order extractor, projection heads,
classifier, then fusion-specific parts, so all fusion arms built from the
same seed share identical extractor, head and classifier weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .fusion import (ConfigError, FusionBlock, FusionBlockConfig, FusionOutput,
                     StaticFusion, build_heads)
from .module import Linear, Module, glorot, zeros
from .rng import RngStream
from .tensor import (Tensor, concat, conv2d, matmul, maxpool2d, reduce, relu, reshape,
                     take_rows, tanh, transpose2d)

ARCHS = ("direct", "cnn", "rnn", "gcn")
FUSION_MODES = ("aff", "concat", "add", "mul")
_STATIC = {"concat": "concat_linear", "add": "add", "mul": "mul"}

ARCH_DEFAULTS: dict[str, dict[str, Any]] = {
    "direct": {"source_dims": [9, 9, 9]},
    "cnn": {"image_size": 16, "channels": [8, 16]},
    "rnn": {"vocab": 50, "embed_dim": 16, "hidden": 32},
    "gcn": {"in_features": 10, "hidden": 16},
}


def normalize_adjacency(a) -> np.ndarray:
    """Symmetric GCN normalisation D^-1/2 (A + I) D^-1/2."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise ValueError("adjacency must be nonnegative")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency diagonal must be zero")
    a_hat = a + np.eye(a.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]


# ---------------------------------------------------------------- extractors

class DirectSources(Module):
    def __init__(self, source_dims: Sequence[int]):
        self.source_dims = list(source_dims)

    def source_extents(self) -> list[tuple[str, int]]:
        return [(f"src{k}", d) for k, d in enumerate(self.source_dims)]

    def __call__(self, batch) -> list[Tensor]:
        if len(batch) != len(self.source_dims):
            raise ValueError(f"expected {len(self.source_dims)} sources, got {len(batch)}")
        out = []
        for k, (x, d) in enumerate(zip(batch, self.source_dims)):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != d:
                raise ValueError(f"source {k}: expected (B, {d}), got {x.shape}")
            out.append(Tensor(x))
        return out


class CnnExtractor(Module):
    def __init__(self, rng: RngStream, image_size: int = 16, channels: Sequence[int] = (8, 16)):
        c1, c2 = channels
        self.image_size = image_size
        self.conv1_w = glorot((c1, 1, 3, 3), 1 * 9, c1 * 9, rng)
        self.conv1_b = zeros(c1)
        self.conv2_w = glorot((c2, c1, 3, 3), c1 * 9, c2 * 9, rng)
        self.conv2_b = zeros(c2)

    def source_extents(self) -> list[tuple[str, int]]:
        return [("conv1", self.conv1_w.shape[0]), ("conv2", self.conv2_w.shape[0])]

    def __call__(self, images) -> list[Tensor]:
        x = np.asarray(images, dtype=np.float64)
        s = self.image_size
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ValueError(f"expected images (B, 1, {s}, {s}), got {x.shape}")
        h1 = maxpool2d(relu(conv2d(Tensor(x), self.conv1_w, self.conv1_b, pad=1)), 2)
        h2 = maxpool2d(relu(conv2d(h1, self.conv2_w, self.conv2_b, pad=1)), 2)
        return [_global_avg_pool(h1), _global_avg_pool(h2)]


def _global_avg_pool(h: Tensor) -> Tensor:
    return reduce("mean", reduce("mean", h, 3), 2)


class RnnExtractor(Module):
    """Elman recurrence h_t = tanh(W_x e_t + W_h h_{t-1} + b), h_0 = 0."""

    def __init__(self, rng: RngStream, vocab: int = 50, embed_dim: int = 16, hidden: int = 32):
        self.vocab = vocab
        self.embedding = glorot((vocab, embed_dim), vocab, embed_dim, rng)
        self.W_x = glorot((hidden, embed_dim), embed_dim, hidden, rng)
        self.W_h = glorot((hidden, hidden), hidden, hidden, rng)
        self.b = zeros(hidden)

    def source_extents(self) -> list[tuple[str, int]]:
        h = self.W_h.shape[0]
        return [("last", h), ("mean", h), ("max", h)]

    def __call__(self, tokens) -> list[Tensor]:
        ids = np.asarray(tokens)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError(f"expected token ids (B, T) with T >= 1, got {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValueError("token ids must be integers")
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise ValueError(f"token id outside vocabulary [0, {self.vocab})")
        bsz, steps = ids.shape
        hidden = self.W_h.shape[0]
        wx, wh = transpose2d(self.W_x), transpose2d(self.W_h)
        h = None
        states = []
        for t in range(steps):
            pre = matmul(take_rows(self.embedding, ids[:, t]), wx) + self.b
            if h is not None:
                pre = pre + matmul(h, wh)
            h = tanh(pre)
            states.append(reshape(h, (bsz, 1, hidden)))
        seq = concat(states, axis=1)
        return [h, reduce("mean", seq, 1), reduce("max", seq, 1)]


class GcnExtractor(Module):
    """Two layers H' = relu(Ahat_sym H W); graphs in a batch are block-diagonal."""

    def __init__(self, rng: RngStream, in_features: int = 10, hidden: int = 16):
        self.in_features = in_features
        self.W0 = glorot((in_features, hidden), in_features, hidden, rng)
        self.W1 = glorot((hidden, hidden), hidden, hidden, rng)

    def source_extents(self) -> list[tuple[str, int]]:
        return [("gcn1", self.W0.shape[1]), ("gcn2", self.W1.shape[1])]

    def __call__(self, graphs) -> list[Tensor]:
        if len(graphs) < 1:
            raise ValueError("empty graph batch")
        sizes = []
        feats = []
        for a, x in graphs:
            a = np.asarray(a, dtype=np.float64)
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != self.in_features or a.shape != (x.shape[0], x.shape[0]):
                raise ValueError(f"graph shapes A {a.shape}, X {x.shape} do not fit F={self.in_features}")
            if x.shape[0] < 1:
                raise ValueError("graph with no nodes")
            sizes.append(x.shape[0])
            feats.append(x)
        total = sum(sizes)
        a_big = np.zeros((total, total))
        pool = np.zeros((len(graphs), total))
        offset = 0
        for g, ((a, _), n) in enumerate(zip(graphs, sizes)):
            a_big[offset:offset + n, offset:offset + n] = normalize_adjacency(a)
            pool[g, offset:offset + n] = 1.0 / n
            offset += n
        a_t, pool_t = Tensor(a_big), Tensor(pool)
        h1 = relu(matmul(a_t, matmul(Tensor(np.concatenate(feats)), self.W0)))
        h2 = relu(matmul(a_t, matmul(h1, self.W1)))
        return [matmul(pool_t, h1), matmul(pool_t, h2)]


# ---------------------------------------------------------------- spec and model

@dataclass
class ModelSpec:
    arch: str
    num_classes: int
    fusion_mode: str = "aff"
    fusion: FusionBlockConfig | None = None
    options: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, path: str = "model",
                  fusion_path: str | None = None) -> "ModelSpec":
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected an object")
        arch = raw.get("arch")
        if arch not in ARCHS:
            raise ConfigError(f"{path}.arch: expected one of {ARCHS}, got {arch!r}")
        allowed = {"arch", "num_classes", "fusion_mode", "fusion"} | set(ARCH_DEFAULTS[arch])
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"{path}.{key}: unknown key")
        if "num_classes" not in raw:
            raise ConfigError(f"{path}.num_classes: required")
        options = {k: raw.get(k, v) for k, v in ARCH_DEFAULTS[arch].items()}
        fusion_raw = dict(raw.get("fusion") or {})
        if "sources" not in fusion_raw:
            fusion_raw["sources"] = _default_sources(arch, options)
        spec = cls(arch=arch, num_classes=raw["num_classes"],
                   fusion_mode=raw.get("fusion_mode", "aff"),
                   fusion=FusionBlockConfig.from_dict(fusion_raw, fusion_path or f"{path}.fusion"),
                   options=options)
        spec.validate(path, fusion_path or f"{path}.fusion")
        return spec

    def validate(self, path: str = "model", fusion_path: str | None = None) -> None:
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError(f"{path}.num_classes: must be an integer >= 2")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"{path}.fusion_mode: expected one of {FUSION_MODES}")
        if self.fusion is None:
            raise ConfigError(f"{path}.fusion: required")
        expected = [d for _, d in _default_sources(self.arch, self.options)]
        declared = [d for _, d in self.fusion.sources]
        if expected != declared:
            raise ConfigError(f"{fusion_path or path + '.fusion'}.sources: extents {declared} do not match "
                              f"{self.arch} sources {expected}")

    def to_dict(self) -> dict:
        out = {"arch": self.arch, "num_classes": self.num_classes,
               "fusion_mode": self.fusion_mode}
        out.update(self.options)
        out["fusion"] = self.fusion.to_dict()
        return out

    def with_mode(self, fusion_mode: str) -> "ModelSpec":
        return ModelSpec(self.arch, self.num_classes, fusion_mode, self.fusion, dict(self.options))


def _default_sources(arch: str, options: dict) -> list[list]:
    if arch == "direct":
        return [[f"src{k}", int(d)] for k, d in enumerate(options["source_dims"])]
    if arch == "cnn":
        return [["conv1", options["channels"][0]], ["conv2", options["channels"][1]]]
    if arch == "rnn":
        return [["last", options["hidden"]], ["mean", options["hidden"]], ["max", options["hidden"]]]
    return [["gcn1", options["hidden"]], ["gcn2", options["hidden"]]]


class FusionModel(Module):
    def __init__(self, spec: ModelSpec, rng: RngStream):
        self.spec = spec
        opts = spec.options
        if spec.arch == "direct":
            self.extractor = DirectSources(opts["source_dims"])
        elif spec.arch == "cnn":
            self.extractor = CnnExtractor(rng, opts["image_size"], opts["channels"])
        elif spec.arch == "rnn":
            self.extractor = RnnExtractor(rng, opts["vocab"], opts["embed_dim"], opts["hidden"])
        else:
            self.extractor = GcnExtractor(rng, opts["in_features"], opts["hidden"])
        self.fusion = None
        heads = build_heads(spec.fusion, rng)
        self.classifier = Linear(spec.fusion.common_dim, spec.num_classes, rng)
        if spec.fusion_mode == "aff":
            self.fusion = FusionBlock(spec.fusion, rng, heads=heads)
        else:
            self.fusion = StaticFusion(_STATIC[spec.fusion_mode], spec.fusion, rng, heads=heads)
        self.assign_names()

    def fusion_parameters(self):
        return self.fusion.parameters()

    def __call__(self, batch, mode: str = "eval",
                 rng: RngStream | None = None) -> tuple[Tensor, FusionOutput]:
        return model_forward(self, batch, mode, rng)


def model_forward(model: FusionModel, batch, mode: str = "eval",
                  rng: RngStream | None = None) -> tuple[Tensor, FusionOutput]:
    sources = model.extractor(batch)
    out = model.fusion(sources, mode, rng)
    return model.classifier(out.y), out


def model_build(spec, rng: RngStream | int = 0) -> FusionModel:
    """Build and initialise a model from a :class:`ModelSpec` or its JSON dict."""
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    if not isinstance(rng, RngStream):
        rng = RngStream(rng)
    return FusionModel(spec, rng)
