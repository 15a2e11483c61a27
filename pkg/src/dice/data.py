"""Per-node data shards, synthetic generators, corruption and replayable batch sampling."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import Batch

CLEAN, LABEL_FLIP, FEATURE_NOISE = "clean", "label-flip", "feature-noise"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RngStream:
    """A named, replayable random stream.

    The stream is a value: ``generator()`` always starts from the same state,
    so drawing twice from one stream reproduces the draw. Keys are mixed into a
    ``SeedSequence`` feeding a counter-based Philox generator.
    """

    seed: int
    key: tuple = ()

    def child(self, *key) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def generator(self) -> np.random.Generator:
        words = [_key_word(k) for k in self.key]
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(words))
        return np.random.Generator(np.random.Philox(ss))


def _key_word(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


@dataclass(frozen=True)
class CorruptionTag:
    kind: str = CLEAN
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (CLEAN, LABEL_FLIP, FEATURE_NOISE):
            raise DataError(f"unknown corruption {self.kind!r}")
        if self.params.get("variance", 0.0) < 0:
            raise DataError("noise variance must be >= 0")


@dataclass(frozen=True)
class NodeDataset:
    node: int
    x: np.ndarray
    y: np.ndarray
    corruption: CorruptionTag = field(default_factory=CorruptionTag)
    ids: np.ndarray | None = None  # global sample ids, for disjointness checks

    def __post_init__(self):
        if len(self.x) == 0:
            raise DataError(f"node {self.node} has an empty shard")
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise DataError(f"node {self.node}: features {self.x.shape} vs labels {self.y.shape}")

    def __len__(self):
        return len(self.x)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.x, self.y)
        return Batch(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class EvalSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) == 0:
            raise DataError("evaluation set is empty")

    def __len__(self):
        return len(self.x)

    def batch(self) -> Batch:
        return Batch(self.x, self.y)


def synth_classification(
    n_nodes: int,
    per_node: int,
    dims: int,
    classes: int,
    seed: int,
    n_eval: int = 256,
    separation: float = 3.0,
    noise: float = 1.0,
) -> tuple[list[NodeDataset], EvalSet]:
    """Gaussian clusters, one mean per class, i.i.d. split across nodes.

    All samples are drawn in one pool and dealt out, so shards and the
    evaluation set never share a sample.
    """
    if min(n_nodes, per_node, dims, classes, n_eval) < 1:
        raise DataError("all counts must be positive")
    rng = RngStream(seed).child("synth").generator()
    means = rng.standard_normal((classes, dims))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    total = n_nodes * per_node + n_eval
    y = rng.integers(0, classes, size=total)
    x = means[y] + noise * rng.standard_normal((total, dims))
    shards = []
    for k in range(n_nodes):
        sl = slice(k * per_node, (k + 1) * per_node)
        ids = np.arange(sl.start, sl.stop)
        shards.append(NodeDataset(k, x[sl], y[sl].astype(np.float64), ids=ids))
    ev = slice(n_nodes * per_node, total)
    return shards, EvalSet(x[ev], y[ev].astype(np.float64))


def synth_regression(
    n_nodes: int,
    per_node: int,
    dims: int,
    seed: int,
    n_eval: int = 64,
    noise: float = 0.1,
) -> tuple[list[NodeDataset], EvalSet]:
    """Linear targets ``y = x @ w_true + noise``; desk-scale stand-in for the linear experiments."""
    rng = RngStream(seed).child("synth-reg").generator()
    w_true = rng.standard_normal(dims)
    total = n_nodes * per_node + n_eval
    x = rng.standard_normal((total, dims))
    y = x @ w_true + noise * rng.standard_normal(total)
    shards = [
        NodeDataset(k, x[k * per_node : (k + 1) * per_node], y[k * per_node : (k + 1) * per_node],
                    ids=np.arange(k * per_node, (k + 1) * per_node))
        for k in range(n_nodes)
    ]
    return shards, EvalSet(x[n_nodes * per_node :], y[n_nodes * per_node :])


def flip_labels(d: NodeDataset, fraction: float = 1.0, seed: int = 0, classes: int | None = None) -> NodeDataset:
    """Replace the labels of a random ``fraction`` of samples by a different class, uniformly."""
    if not 0 < fraction <= 1:
        raise DataError(f"flip fraction must be in (0, 1], got {fraction}")
    labels = d.y.astype(np.int64)
    n_classes = classes if classes is not None else int(labels.max()) + 1
    if n_classes < 2:
        raise DataError("cannot flip labels of a single-class dataset")
    rng = RngStream(seed).child("flip", d.node).generator()
    n_flip = int(round(fraction * len(d)))
    idx = np.sort(rng.choice(len(d), size=n_flip, replace=False))
    # offset in [1, C) guarantees a different class
    offsets = rng.integers(1, n_classes, size=n_flip)
    y = d.y.copy()
    y[idx] = (labels[idx] + offsets) % n_classes
    tag = CorruptionTag(LABEL_FLIP, {"fraction": fraction, "seed": seed})
    return replace(d, y=y, corruption=tag)


def add_feature_noise(d: NodeDataset, variance: float, seed: int = 0) -> NodeDataset:
    if variance < 0:
        raise DataError("noise variance must be >= 0")
    tag = CorruptionTag(FEATURE_NOISE, {"variance": variance, "seed": seed})
    if variance == 0:
        return replace(d, corruption=tag)
    rng = RngStream(seed).child("noise", d.node).generator()
    x = d.x + np.sqrt(variance) * rng.standard_normal(d.x.shape)
    return replace(d, x=x, corruption=tag)


def sample_batch(d: NodeDataset, size: int, stream: RngStream) -> tuple[Batch, np.ndarray]:
    """Without-replacement draw of ``size`` indices from ``stream``."""
    if not 0 < size <= len(d):
        raise DataError(f"batch size {size} not in [1, {len(d)}] for node {d.node}")
    idx = stream.generator().permutation(len(d))[:size]
    return d.batch(idx), idx


def load_csv(path: str | Path, node: int = 0) -> NodeDataset:
    """Header row, feature columns, label in the last column."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    arr = np.array([[float(v) for v in r] for r in rows[1:]])
    return NodeDataset(node, arr[:, :-1], arr[:, -1])


def save_csv(d: NodeDataset | EvalSet, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(d.x.shape[1])] + ["label"])
        for xi, yi in zip(d.x, d.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
