"""Brute-force references for the contour matcher."""

import math
from functools import lru_cache

import numpy as np


def closed(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return np.vstack([p, p[:1]])


def random_loop(rng, n_vertices):
    ang = np.sort(rng.uniform(0, 2 * math.pi, n_vertices))
    r = rng.uniform(0.5, 1.5, n_vertices)
    return closed(np.c_[r * np.cos(ang), r * np.sin(ang)])


def _cost(a, b, k, l, i, j) -> float:
    ds = a.arc[i] - b.arc[j]
    dt = a.turning[(k + i) % a.n] - b.turning[(l + j) % b.n]
    return ds * ds + dt * dt


def oracle_recursive(a, b) -> float:
    """Minimum over every start pair (k, l) of the best monotone path, by plain recursion."""
    best = math.inf
    for k in range(a.n):
        for l in range(b.n):
            @lru_cache(maxsize=None)
            def acc(i, j, k=k, l=l):
                if i == 0 and j == 0:
                    return _cost(a, b, k, l, 0, 0) + 0.0
                prev = []
                if i > 0 and j > 0:
                    prev.append(acc(i - 1, j - 1))
                if i > 0:
                    prev.append(acc(i - 1, j))
                if j > 0:
                    prev.append(acc(i, j - 1))
                return _cost(a, b, k, l, i, j) + min(prev)
            best = min(best, acc(a.n - 1, b.n - 1))
    return best


def _paths(na, nb):
    """Every monotone (1,0)/(0,1)/(1,1) path from (0,0) to (na-1, nb-1)."""
    def walk(i, j):
        if (i, j) == (na - 1, nb - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < na and j + dj < nb:
                for rest in walk(i + di, j + dj):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def oracle_enumerate(a, b) -> float:
    paths = _paths(a.n, b.n)
    width = max(len(p) for p in paths)
    # pad with a sentinel cell holding cost 0 so cumsum adds nothing past the path end
    ii = np.array([[i for i, _ in p] + [a.n] * (width - len(p)) for p in paths])
    jj = np.array([[j for _, j in p] + [0] * (width - len(p)) for p in paths])
    best = math.inf
    for k in range(a.n):
        for l in range(b.n):
            cost = np.array([[_cost(a, b, k, l, i, j) for j in range(b.n)] for i in range(a.n)] + [[0.0] * b.n])
            # cumsum accumulates left to right, the same order as a walk along the path
            totals = np.cumsum(cost[ii, jj], axis=1)[:, -1]
            best = min(best, float(totals.min()))
    return best
