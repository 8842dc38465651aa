"""Skeleton topology, spatial partitioning and the normalized adjacency stack."""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_GROUPS = 3
SELF, CENTRIPETAL, CENTRIFUGAL = 0, 1, 2

# OpenPose 18-joint body model as released with the Kinetics skeletons.
KINETICS18_EDGES = [
    (4, 3), (3, 2), (7, 6), (6, 5), (13, 12), (12, 11), (10, 9), (9, 8),
    (11, 5), (8, 2), (5, 1), (2, 1), (0, 1), (15, 0), (14, 0), (17, 15), (16, 14),
]
KINETICS18_CENTER = 1  # neck

# Kinect v2 25-joint body model, zero-based.
NTU25_EDGES = [
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6), (8, 20), (9, 8),
    (10, 9), (11, 10), (12, 0), (13, 12), (14, 13), (15, 14), (16, 0), (17, 16), (18, 17),
    (19, 18), (21, 22), (22, 7), (23, 24), (24, 11),
]
NTU25_CENTER = 20  # spine at shoulder height

_CHAIN = re.compile(r"chain(\d+)$")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int
    hop_distance: np.ndarray = field(repr=False, compare=False)
    name: str = "custom"

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 one-hop adjacency without self-loops."""
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def neighbors(self, i: int) -> list[int]:
        return [j for a, b in self.edges for j in ((b,) if a == i else (a,) if b == i else ())]


def _hop_distances(n: int, edges) -> np.ndarray:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    hop = np.full((n, n), np.inf)
    for src in range(n):
        hop[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if hop[src, v] == np.inf:
                    hop[src, v] = hop[src, u] + 1
                    queue.append(v)
    return hop


def build_skeleton(topology, center_joint: int | None = None, num_joints: int | None = None) -> Skeleton:
    """Build a :class:`Skeleton` from a preset name, an edge-list file, or explicit edges.

    Presets: ``kinetics18``, ``ntu25`` and ``chainN`` (a path graph of N joints,
    centered on joint ``N // 2``). Anything else that names an existing file
    is read with :func:`load_edge_list`.
    """
    name = "custom"
    if isinstance(topology, str):
        name = topology
        if topology == "kinetics18":
            n, edges, default_center = 18, KINETICS18_EDGES, KINETICS18_CENTER
        elif topology == "ntu25":
            n, edges, default_center = 25, NTU25_EDGES, NTU25_CENTER
        elif (m := _CHAIN.match(topology)) is not None:
            n = int(m.group(1))
            if n < 1:
                raise GraphError("chain topology needs at least one joint")
            edges = [(i, i + 1) for i in range(n - 1)]
            default_center = n // 2
        elif Path(topology).is_file():
            n, default_center, edges = load_edge_list(topology)
        else:
            raise GraphError(f"unknown topology {topology!r}")
        center = default_center if center_joint is None else center_joint
    else:
        edges = [tuple(int(v) for v in e) for e in topology]
        n = num_joints if num_joints is not None else 1 + max((max(e) for e in edges), default=0)
        center = 0 if center_joint is None else center_joint

    edges = tuple((int(i), int(j)) for i, j in edges)
    if not 0 <= center < n:
        raise GraphError(f"center joint {center} outside [0, {n})")
    seen = set()
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge ({i}, {j}) references a joint outside [0, {n})")
        if i == j:
            raise GraphError(f"self-loop on joint {i}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)

    hop = _hop_distances(n, edges)
    unreachable = np.flatnonzero(np.isinf(hop[0]))
    if unreachable.size:
        raise GraphError(f"skeleton graph is disconnected; unreachable from joint 0: {unreachable.tolist()}")
    return Skeleton(n, edges, center, hop.astype(np.int64), name)


def load_edge_list(path) -> tuple[int, int, list[tuple[int, int]]]:
    """Read ``N center`` on the first line, then one ``i j`` pair per line."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError(f"{path}: empty edge-list file")
    try:
        n, center = (int(v) for v in lines[0].split())
        edges = [tuple(int(v) for v in ln.split()) for ln in lines[1:]]
    except ValueError as exc:
        raise GraphError(f"{path}: malformed edge-list file ({exc})") from exc
    if any(len(e) != 2 for e in edges):
        raise GraphError(f"{path}: every edge line needs exactly two joint indices")
    return n, center, edges


def save_edge_list(skeleton: Skeleton, path) -> None:
    rows = [f"{skeleton.num_joints} {skeleton.center_joint}"]
    rows += [f"{i} {j}" for i, j in skeleton.edges]
    Path(path).write_text("\n".join(rows) + "\n")


def partition_neighbors(skeleton: Skeleton) -> np.ndarray:
    """Group index for every (target i, neighbor j) pair; -1 where j is not in B_i.

    Group 0 is the joint itself, group 1 holds neighbors closer to the center
    joint than the target, group 2 everything else in the one-hop neighborhood.
    """
    n = skeleton.num_joints
    hop = skeleton.hop_distance
    to_center = hop[:, skeleton.center_joint]
    groups = np.full((n, n), -1, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                groups[i, j] = SELF
            elif hop[i, j] == 1:
                groups[i, j] = CENTRIPETAL if to_center[j] < to_center[i] else CENTRIFUGAL
    return groups


@dataclass(frozen=True)
class PartitionedAdjacency:
    raw: np.ndarray  # (K, N, N) binary, row = target joint
    normalized: np.ndarray  # (K, N, N)
    alpha: float

    @property
    def num_joints(self) -> int:
        return self.raw.shape[-1]


def normalized_adjacency(skeleton: Skeleton, alpha: float = 0.001) -> PartitionedAdjacency:
    if alpha <= 0:
        raise GraphError("alpha must be positive")
    groups = partition_neighbors(skeleton)
    n = skeleton.num_joints
    raw = np.zeros((NUM_GROUPS, n, n))
    for k in range(NUM_GROUPS):
        raw[k][groups == k] = 1.0
    degree = raw.sum(axis=2) + alpha  # (K, N)
    inv_sqrt = degree ** -0.5
    normalized = inv_sqrt[:, :, None] * raw * inv_sqrt[:, None, :]
    raw.setflags(write=False)
    normalized.setflags(write=False)
    return PartitionedAdjacency(raw, normalized, alpha)
