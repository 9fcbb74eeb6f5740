"""Seeded synthetic datasets and plain-text loaders.

Every generator is a pure function of its arguments: all randomness comes
from one :class:`~affuse.rng.RngStream` seeded with ``seed`` and consumed in
a fixed order, so outputs are bit-identical across runs and platforms.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RngStream


class DataFormatError(ValueError):
    """A data file is malformed; the message names the file and line."""


# ---------------------------------------------------------------- containers

@dataclass
class MultiSourceDataset:
    sources: list[np.ndarray]
    labels: np.ndarray
    corrupted: np.ndarray
    num_classes: int
    seed: int | None = None

    def __post_init__(self):
        n = len(self.labels)
        if any(s.shape[0] != n for s in self.sources):
            raise ValueError("all sources must have one row per sample")
        if self.corrupted.shape != (n, len(self.sources)):
            raise ValueError("corrupted must be (n, K)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def source_dims(self) -> list[int]:
        return [s.shape[1] for s in self.sources]

    def inputs(self, idx) -> list[np.ndarray]:
        return [s[idx] for s in self.sources]

    def subset(self, idx) -> "MultiSourceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultiSourceDataset([s[idx] for s in self.sources], self.labels[idx],
                                  self.corrupted[idx], self.num_classes, self.seed)


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 3

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self, idx) -> np.ndarray:
        return self.images[idx]

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class TokenDataset:
    tokens: np.ndarray
    labels: np.ndarray
    vocab: int
    num_classes: int = 2

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self, idx) -> np.ndarray:
        return self.tokens[idx]

    def subset(self, idx) -> "TokenDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TokenDataset(self.tokens[idx], self.labels[idx], self.vocab, self.num_classes)


@dataclass
class GraphDataset:
    graphs: list[tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray
    num_features: int
    num_classes: int = 2

    def __len__(self) -> int:
        return len(self.labels)

    def inputs(self, idx) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.graphs[i] for i in np.asarray(idx, dtype=np.int64)]

    def subset(self, idx) -> "GraphDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GraphDataset([self.graphs[i] for i in idx], self.labels[idx],
                            self.num_features, self.num_classes)


@dataclass
class DatasetSplit:
    train: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)


def train_test_split(n: int, n_test: int, seed: int) -> DatasetSplit:
    """Fisher-Yates permutation; the last ``n_test`` positions form the test set."""
    if not 0 <= n_test <= n:
        raise ValueError(f"n_test={n_test} outside [0, {n}]")
    order = RngStream(seed).permutation(n)
    return DatasetSplit(train=order[:n - n_test], test=order[n - n_test:])


# ---------------------------------------------------------------- generators

def gen_multisource(n: int, K: int = 3, d: int = 8, C: int = 2, sigma: float = 0.5,
                    p_corrupt: float = 0.5, sigma_noise: float = 3.0,
                    seed: int = 0) -> MultiSourceDataset:
    """Class-prototype sources, each independently replaced by noise with prob ``p_corrupt``.

    Draw order: prototypes (class-major, then source), then per sample the
    label, and per source d clean normals, one corruption uniform and, if
    corrupted, d noise normals. A final coordinate holding the corruption
    flag is appended to every source, so each source has extent ``d + 1``.
    """
    if n < 1 or K < 2 or d < 1 or C < 2:
        raise ValueError("need n >= 1, K >= 2, d >= 1, C >= 2")
    if not 0.0 <= p_corrupt <= 1.0:
        raise ValueError(f"p_corrupt={p_corrupt} is not a probability")
    if sigma < 0 or sigma_noise < 0:
        raise ValueError("noise scales must be nonnegative")
    rng = RngStream(seed)
    protos = rng.normal_array((C, K, d))
    sources = np.zeros((K, n, d + 1))
    labels = np.zeros(n, dtype=np.int64)
    corrupted = np.zeros((n, K), dtype=bool)
    for i in range(n):
        y = rng.next_below(C)
        labels[i] = y
        for k in range(K):
            vec = protos[y, k] + sigma * rng.normal_array(d)
            if rng.next_uniform() <= p_corrupt:
                vec = sigma_noise * rng.normal_array(d)
                corrupted[i, k] = True
            sources[k, i, :d] = vec
            sources[k, i, d] = float(corrupted[i, k])
    return MultiSourceDataset(list(sources), labels, corrupted, C, seed)


def gen_smoke(n: int = 64, K: int = 2, d: int = 3, seed: int = 0) -> MultiSourceDataset:
    """Tiny linearly separable two-class set for smoke tests.

    Labels alternate; the first coordinate of every source is
    ``(2y - 1) * (0.5 + u)`` with u uniform, the rest are standard normals,
    so the sign of any source's first coordinate gives the label.
    """
    if n < 1 or K < 1 or d < 1:
        raise ValueError("need n, K, d >= 1")
    rng = RngStream(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    sources = np.zeros((K, n, d))
    for i in range(n):
        sign = 2.0 * labels[i] - 1.0
        for k in range(K):
            sources[k, i, 0] = sign * (0.5 + rng.next_uniform())
            sources[k, i, 1:] = rng.normal_array(d - 1)
    return MultiSourceDataset(list(sources), labels, np.zeros((n, K), dtype=bool), 2, seed)


_H, _V, _X = 0, 1, 2


def gen_shapes(n: int, seed: int = 0, size: int = 16, bar: int = 8,
               noise: float = 0.1) -> ImageDataset:
    """Horizontal bar, vertical bar, or cross on a dark canvas plus Gaussian pixel noise.

    Labels cycle 0, 1, 2 so class counts differ by at most one. Pixels are
    clipped to [-1, 2].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = RngStream(seed)
    images = np.zeros((n, 1, size, size))
    labels = np.arange(n, dtype=np.int64) % 3
    half = bar // 2
    for i in range(n):
        img = np.zeros((size, size))
        if labels[i] == _H:
            r, c = 2 + rng.next_below(size - 4), rng.next_below(size - bar + 1)
            img[r, c:c + bar] = 1.0
        elif labels[i] == _V:
            c, r = 2 + rng.next_below(size - 4), rng.next_below(size - bar + 1)
            img[r:r + bar, c] = 1.0
        else:
            r = half + rng.next_below(size - bar + 1)
            c = half + rng.next_below(size - bar + 1)
            img[r, c - half:c + half] = 1.0
            img[r - half:r + half, c] = 1.0
        img += rng.normal_array((size, size), std=noise)
        images[i, 0] = np.clip(img, -1.0, 2.0)
    return ImageDataset(images, labels, 3)


POSITIVE_IDS = tuple(range(1, 9))
NEGATIVE_IDS = tuple(range(9, 17))


def gen_token_sentiment(n: int, T: int = 12, V: int = 50, seed: int = 0) -> TokenDataset:
    """Token sequences whose label is the majority lexicon (1 = positive).

    Each sequence holds 1..T//3 tokens from its own lexicon, strictly fewer
    from the opposite lexicon, and neutral ids elsewhere, in shuffled order.
    """
    if n < 1 or T < 3 or V < 18:
        raise ValueError("need n >= 1, T >= 3, V >= 18")
    rng = RngStream(seed)
    neutral = [0] + list(range(17, V))
    tokens = np.zeros((n, T), dtype=np.int64)
    labels = np.arange(n, dtype=np.int64) % 2
    for i in range(n):
        own, other = (POSITIVE_IDS, NEGATIVE_IDS) if labels[i] == 1 else (NEGATIVE_IDS, POSITIVE_IDS)
        n_major = 1 + rng.next_below(T // 3)
        n_minor = rng.next_below(n_major)
        seq = [own[rng.next_below(len(own))] for _ in range(n_major)]
        seq += [other[rng.next_below(len(other))] for _ in range(n_minor)]
        seq += [neutral[rng.next_below(len(neutral))] for _ in range(T - n_major - n_minor)]
        tokens[i] = [seq[j] for j in rng.permutation(T)]
    return TokenDataset(tokens, labels, V, 2)


def gen_graphs(n: int, n_min: int = 6, n_max: int = 10, seed: int = 0) -> GraphDataset:
    """Cycle graphs (label 0) and star graphs (label 1) with one-hot degree features.

    Node order is randomly relabelled. Feature extent is ``n_max`` (maximum
    possible degree plus one).
    """
    if n < 1 or not 3 <= n_min <= n_max:
        raise ValueError("need n >= 1 and 3 <= n_min <= n_max")
    rng = RngStream(seed)
    graphs = []
    labels = np.arange(n, dtype=np.int64) % 2
    for i in range(n):
        size = n_min + rng.next_below(n_max - n_min + 1)
        base = np.zeros((size, size))
        if labels[i] == 0:
            for v in range(size):
                base[v, (v + 1) % size] = base[(v + 1) % size, v] = 1.0
        else:
            base[0, 1:] = base[1:, 0] = 1.0
        perm = rng.permutation(size)
        a = base[np.ix_(perm, perm)]
        deg = a.sum(axis=1).astype(np.int64)
        x = np.zeros((size, n_max))
        x[np.arange(size), deg] = 1.0
        graphs.append((a, x))
    return GraphDataset(graphs, labels, n_max, 2)


# ---------------------------------------------------------------- multi-source CSV

def _fmt(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="-")


def save_csv_dataset(ds: MultiSourceDataset, path) -> None:
    """Write ``label,src<k>_<j>,...,src<k>_corrupt``; the flag column replaces the last coordinate."""
    header = ["label"]
    for k, dk in enumerate(ds.source_dims):
        header += [f"src{k}_{j}" for j in range(dk - 1)] + [f"src{k}_corrupt"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [str(int(ds.labels[i]))]
            for k, src in enumerate(ds.sources):
                row += [_fmt(v) for v in src[i, :-1]] + ["1" if ds.corrupted[i, k] else "0"]
            w.writerow(row)


_COL = re.compile(r"^src(\d+)_(\d+|corrupt)$")


def _parse_header(header: list[str], path) -> list[int]:
    if not header or header[0] != "label":
        raise DataFormatError(f"{path}:1: first column must be 'label'")
    dims: list[int] = []
    expect_k, expect_j = 0, 0
    for col in header[1:]:
        m = _COL.match(col)
        if not m:
            raise DataFormatError(f"{path}:1: unknown header column {col!r}")
        k, j = int(m.group(1)), m.group(2)
        if k != expect_k or (j != "corrupt" and int(j) != expect_j):
            raise DataFormatError(f"{path}:1: unexpected column {col!r} (columns must be ordered)")
        if j == "corrupt":
            dims.append(expect_j + 1)
            expect_k, expect_j = expect_k + 1, 0
        else:
            expect_j += 1
    if expect_j != 0:
        raise DataFormatError(f"{path}:1: source {expect_k} lacks a src{expect_k}_corrupt column")
    if not dims:
        raise DataFormatError(f"{path}:1: no source columns")
    return dims


def load_csv_dataset(path, num_classes: int | None = None) -> MultiSourceDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    dims = _parse_header(rows[0], path)
    width = 1 + sum(dims)
    labels, corrupted, values = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            label = int(row[0])
            nums = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if label < 0:
            raise DataFormatError(f"{path}:{lineno}: negative label")
        if not np.isfinite(nums).all():
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        flags, pos = [], 0
        for dk in dims:
            flag = nums[pos + dk - 1]
            if flag not in (0.0, 1.0):
                raise DataFormatError(f"{path}:{lineno}: corrupt flag must be 0 or 1")
            flags.append(flag == 1.0)
            pos += dk
        labels.append(label)
        corrupted.append(flags)
        values.append(nums)
    if not labels:
        raise DataFormatError(f"{path}: no samples")
    arr = np.array(values)
    sources, pos = [], 0
    for dk in dims:
        sources.append(arr[:, pos:pos + dk].copy())
        pos += dk
    labels = np.array(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    if labels.max() >= c:
        raise DataFormatError(f"{path}: label {labels.max()} >= num_classes {c}")
    return MultiSourceDataset(sources, labels, np.array(corrupted, dtype=bool), c)


# ---------------------------------------------------------------- edge lists

def save_edge_list(ds: GraphDataset, path) -> None:
    lines = []
    for gid, ((a, x), label) in enumerate(zip(ds.graphs, ds.labels)):
        lines.append(f"graph {gid} {int(label)}")
        for i, row in enumerate(x):
            lines.append(f"node {i} " + " ".join(_fmt(v) for v in row))
        for i, j in zip(*np.nonzero(np.triu(a))):
            lines.append(f"edge {i} {j}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def load_edge_list(path, num_classes: int | None = None) -> GraphDataset:
    text = Path(path).read_text()
    graphs, labels = [], []
    n_feat = None
    current = None

    def close(lineno):
        nonlocal current
        if current is None:
            return
        nodes, edges, label = current["nodes"], current["edges"], current["label"]
        if not nodes:
            raise DataFormatError(f"{path}:{lineno}: graph {current['id']} has no nodes")
        size = len(nodes)
        a = np.zeros((size, size))
        for ln, i, j in edges:
            if not (0 <= i < size and 0 <= j < size):
                raise DataFormatError(f"{path}:{ln}: edge ({i}, {j}) references a missing node")
            if i == j:
                raise DataFormatError(f"{path}:{ln}: self-loop on node {i}")
            a[i, j] = a[j, i] = 1.0
        graphs.append((a, np.array(nodes)))
        labels.append(label)
        current = None

    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            close(lineno)
            continue
        kind = parts[0]
        try:
            if kind == "graph":
                close(lineno)
                if len(parts) != 3:
                    raise DataFormatError(f"{path}:{lineno}: expected 'graph <id> <label>'")
                current = {"id": parts[1], "label": int(parts[2]), "nodes": [], "edges": []}
            elif current is None:
                raise DataFormatError(f"{path}:{lineno}: {kind!r} line outside a graph block")
            elif kind == "node":
                idx = int(parts[1])
                if idx != len(current["nodes"]):
                    raise DataFormatError(f"{path}:{lineno}: node ids must be 0, 1, ... in order")
                feats = [float(v) for v in parts[2:]]
                if n_feat is None:
                    n_feat = len(feats)
                if len(feats) != n_feat or n_feat == 0:
                    raise DataFormatError(f"{path}:{lineno}: expected {n_feat} features, got {len(feats)}")
                current["nodes"].append(feats)
            elif kind == "edge":
                if len(parts) != 3:
                    raise DataFormatError(f"{path}:{lineno}: expected 'edge <i> <j>'")
                current["edges"].append((lineno, int(parts[1]), int(parts[2])))
            else:
                raise DataFormatError(f"{path}:{lineno}: unknown record {kind!r}")
        except ValueError as exc:
            if isinstance(exc, DataFormatError):
                raise
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    close(lineno + 1)
    if not graphs:
        raise DataFormatError(f"{path}: no graphs")
    labels = np.array(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataFormatError(f"{path}: negative label")
    c = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    return GraphDataset(graphs, labels, n_feat, c)
