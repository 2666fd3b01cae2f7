"""Grouping nearby users for joint decoding."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

MAX_CLUSTER = 3


@dataclass(frozen=True)
class Cluster:
    members: tuple[int, ...]
    centroid: tuple[float, float]

    @property
    def size(self) -> int:
        return len(self.members)


def _diameter(pos: np.ndarray, members) -> float:
    if len(members) < 2:
        return 0.0
    return max(math.dist(pos[a], pos[b]) for a, b in itertools.combinations(members, 2))


def cluster_users(positions, threshold: float = 1.0, max_size: int = MAX_CLUSTER) -> list[Cluster]:
    """Greedy agglomeration into groups of at most ``max_size`` users whose
    pairwise distances are all within ``threshold``.

    At every step the two groups whose union has the smallest diameter are
    merged, as long as that union is admissible. Users nobody can join stay
    singletons. Output clusters are ordered by their smallest member.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    groups: list[tuple[int, ...]] = [(i,) for i in range(len(pos))]
    while True:
        best = None
        for a, b in itertools.combinations(range(len(groups)), 2):
            merged = groups[a] + groups[b]
            if len(merged) > max_size:
                continue
            d = _diameter(pos, merged)
            if d > threshold:
                continue
            key = (d, min(merged))
            if best is None or key < best[0]:
                best = (key, a, b)
        if best is None:
            break
        _, a, b = best
        merged = tuple(sorted(groups[a] + groups[b]))
        groups = [g for i, g in enumerate(groups) if i not in (a, b)] + [merged]
    groups.sort(key=min)
    return [Cluster(g, tuple(float(v) for v in pos[list(g)].mean(axis=0))) for g in groups]
