"""Communication graphs, mixing matrices, multi-hop neighborhoods and walk sets.

Edge convention: ``(k, j)`` in ``Topology.edges`` means node ``j`` sends its
parameters to node ``k``, i.e. ``W[k, j]`` may be positive. The out-neighbors
of ``j`` are therefore the receivers ``{k : (k, j) in edges}``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

ROW_SUM_TOL = 1e-9
LOAD_ROW_SUM_TOL = 1e-6
DEFAULT_PATH_CAP = 10**6


class TopologyError(ValueError):
    pass


class MixingValidationError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class PathBudgetExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(
            f"walk set has {count} sequences, above the cap of {cap}; use a smaller radius"
        )
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class Topology:
    n: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n < 1:
            raise TopologyError(f"node count must be >= 1, got {self.n}")
        for k, j in self.edges:
            if not (0 <= k < self.n and 0 <= j < self.n):
                raise TopologyError(f"edge ({k}, {j}) outside [0, {self.n})")

    @property
    def self_loops(self) -> tuple[bool, ...]:
        return tuple((i, i) in self.edges for i in range(self.n))

    def out_neighbors(self, j: int, include_self: bool = True) -> list[int]:
        return sorted(k for k, src in self.edges if src == j and (include_self or k != j))

    def in_neighbors(self, k: int, include_self: bool = True) -> list[int]:
        return sorted(j for dst, j in self.edges if dst == k and (include_self or j != k))

    def adjacency(self) -> np.ndarray:
        """0/1 matrix with ``A[k, j] = 1`` iff ``j`` sends to ``k`` (same layout as W)."""
        a = np.zeros((self.n, self.n), dtype=np.int64)
        for k, j in self.edges:
            a[k, j] = 1
        return a

    def to_json(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_json(cls, obj: dict) -> "Topology":
        return cls(int(obj["n"]), frozenset((int(k), int(j)) for k, j in obj["edges"]))

    @classmethod
    def from_matrix(cls, w: np.ndarray) -> "Topology":
        w = np.asarray(w)
        ks, js = np.nonzero(w > 0)
        return cls(w.shape[0], frozenset(zip(ks.tolist(), js.tolist())))


def _with_self_loops(n: int, pairs) -> Topology:
    edges = set(pairs)
    edges.update((i, i) for i in range(n))
    return Topology(n, frozenset(edges))


def build_ring(n: int) -> Topology:
    if n < 2:
        raise TopologyError(f"ring needs n >= 2, got {n}")
    pairs = []
    for i in range(n):
        for k in ((i + 1) % n, (i - 1) % n):
            pairs.append((k, i))
    return _with_self_loops(n, pairs)


def build_exponential(n: int) -> Topology:
    """Node ``i`` sends to ``(i + 2**m) % n`` for ``m = 0 .. floor(log2(n - 1))``."""
    if n < 2:
        raise TopologyError(f"exponential graph needs n >= 2, got {n}")
    offsets = [2**m for m in range(int(math.floor(math.log2(n - 1))) + 1)]
    pairs = [((i + off) % n, i) for i in range(n) for off in offsets]
    return _with_self_loops(n, pairs)


def build_fully_connected(n: int) -> Topology:
    if n < 1:
        raise TopologyError(f"n must be >= 1, got {n}")
    return Topology(n, frozenset((k, j) for k in range(n) for j in range(n)))


BUILDERS = {
    "ring": build_ring,
    "exponential": build_exponential,
    "fully_connected": build_fully_connected,
}


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray
    time_index: int | None = None

    def __post_init__(self):
        w = np.array(self.entries, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "entries", w)
        validate_mixing(w, tol=LOAD_ROW_SUM_TOL)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, idx):
        return self.entries[idx]

    def support_within(self, topo: Topology) -> bool:
        ks, js = np.nonzero(self.entries > 0)
        return all(k == j or (k, j) in topo.edges for k, j in zip(ks.tolist(), js.tolist()))


def validate_mixing(w: np.ndarray, tol: float = LOAD_ROW_SUM_TOL) -> None:
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise MixingValidationError(f"mixing matrix must be square, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise MixingValidationError("mixing matrix has non-finite entries")
    for k, row in enumerate(w):
        if np.any(row < 0) or np.any(row > 1):
            raise MixingValidationError(f"row {k} has entries outside [0, 1]", row=k)
        s = float(row.sum())
        if abs(s - 1.0) > tol:
            raise MixingValidationError(f"row {k} sums to {s!r}, not 1", row=k)


def uniform_mixing(topo: Topology) -> MixingMatrix:
    """Row ``k`` puts ``1 / |N_in(k) + {k}|`` on every in-neighbor and on itself."""
    w = np.zeros((topo.n, topo.n))
    for k in range(topo.n):
        senders = set(topo.in_neighbors(k)) | {k}
        for j in senders:
            w[k, j] = 1.0 / len(senders)
    return MixingMatrix(w)


def dominant_mixing(topo: Topology, dominant: Sequence[int], weight: float = 0.5) -> MixingMatrix:
    """Every node gives ``weight`` (split evenly) to the dominant senders, the rest uniformly.

    Dominant nodes are added as senders of every node, so their columns carry
    far more than unit mass. Dominant nodes themselves keep uniform rows.
    """
    if not 0 < weight < 1:
        raise ValueError("dominant weight must lie in (0, 1)")
    dominant = sorted(set(dominant))
    w = np.zeros((topo.n, topo.n))
    for k in range(topo.n):
        if k in dominant:
            senders = set(topo.in_neighbors(k)) | {k}
            for j in senders:
                w[k, j] = 1.0 / len(senders)
            continue
        others = (set(topo.in_neighbors(k)) | {k}) - set(dominant)
        for j in dominant:
            w[k, j] += weight / len(dominant)
        for j in others:
            w[k, j] += (1.0 - weight) / len(others)
    return MixingMatrix(w)


def load_mixing(path: str | Path) -> MixingMatrix:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append([float(x) for x in line.split()])
    widths = {len(r) for r in rows}
    if not rows or len(widths) != 1 or widths.pop() != len(rows):
        raise MixingValidationError(f"{path}: matrix is not square")
    return MixingMatrix(np.array(rows))


def save_mixing(w: MixingMatrix | np.ndarray, path: str | Path) -> None:
    arr = w.entries if isinstance(w, MixingMatrix) else np.asarray(w)
    Path(path).write_text("\n".join(" ".join(repr(float(x)) for x in row) for row in arr) + "\n")


def is_row_stochastic(w: MixingMatrix | np.ndarray, tol: float = ROW_SUM_TOL) -> bool:
    arr = w.entries if isinstance(w, MixingMatrix) else np.asarray(w)
    return bool(np.all(arr >= 0) and np.all(np.abs(arr.sum(axis=1) - 1.0) <= tol))


def is_doubly_stochastic(w: MixingMatrix | np.ndarray, tol: float = ROW_SUM_TOL) -> bool:
    arr = w.entries if isinstance(w, MixingMatrix) else np.asarray(w)
    return is_row_stochastic(arr, tol) and bool(np.all(np.abs(arr.sum(axis=0) - 1.0) <= tol))


def distances_from(topo: Topology, j: int) -> dict[int, int]:
    """BFS hop distances along out-edges; self-loops never shorten anything."""
    dist = {j: 0}
    queue = deque([j])
    while queue:
        u = queue.popleft()
        for v in topo.out_neighbors(u, include_self=False):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def r_hop_neighbors(topo: Topology, j: int, r: int) -> set[int]:
    if r < 1:
        raise ValueError("r must be >= 1")
    if not 0 <= j < topo.n:
        raise TopologyError(f"node {j} outside [0, {topo.n})")
    return {k for k, d in distances_from(topo, j).items() if d == r}


@dataclass(frozen=True)
class PathSet:
    origin: int
    length: int
    sequences: list[tuple[int, ...]] = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self.sequences)


def count_walks(topo: Topology, j: int, length: int) -> int:
    """Number of length-``length`` out-neighbor walks from ``j`` (exact integers)."""
    counts = [0] * topo.n
    counts[j] = 1
    outs = [topo.out_neighbors(u) for u in range(topo.n)]
    for _ in range(length):
        nxt = [0] * topo.n
        for u, c in enumerate(counts):
            if c:
                for v in outs[u]:
                    nxt[v] += c
        counts = nxt
    return sum(counts)


def enumerate_paths(topo: Topology, j: int, length: int, cap: int = DEFAULT_PATH_CAP) -> PathSet:
    """All walks ``(k_1, ..., k_length)`` with ``k_s`` an out-neighbor of ``k_{s-1}``, ``k_0 = j``.

    Self-loop steps and revisits are included. Sequences come out in
    lexicographic order.
    """
    if length < 0:
        raise ValueError("length must be >= 0")
    if not 0 <= j < topo.n:
        raise TopologyError(f"node {j} outside [0, {topo.n})")
    total = count_walks(topo, j, length)
    if total > cap:
        raise PathBudgetExceeded(total, cap)
    outs = [topo.out_neighbors(u) for u in range(topo.n)]
    seqs: list[tuple[int, ...]] = []

    def walk(prefix: tuple[int, ...], last: int):
        if len(prefix) == length:
            seqs.append(prefix)
            return
        for v in outs[last]:
            walk(prefix + (v,), v)

    walk((), j)
    return PathSet(j, length, seqs)


def topology_to_json_file(topo: Topology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topo.to_json()))
