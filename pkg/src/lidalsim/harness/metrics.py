"""Counting and localization metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mape(actual, estimated):
    """Mean absolute percentage error of counts, in percent. Actual counts must be >= 1."""
    a = np.asarray(actual, float)
    e = np.asarray(estimated, float)
    if a.shape != e.shape:
        raise ValueError("actual and estimated differ in length")
    if a.size == 0:
        raise ValueError("no samples")
    if np.any(a < 1):
        raise ValueError("actual counts must be at least 1")
    return float(100.0 * np.mean(np.abs(a - e) / a))


@dataclass(frozen=True)
class Matching:
    pairs: list  # (true index, estimate index, distance)
    unmatched_true: list
    unmatched_estimated: list

    @property
    def distances(self):
        return np.array([d for *_, d in self.pairs])


def match_positions(true_positions, estimated_positions):
    """Greedy assignment: repeatedly pair the closest remaining true/estimate points."""
    T = np.asarray(true_positions, float).reshape(-1, 2)
    E = np.asarray(estimated_positions, float).reshape(-1, 2)
    if not len(T) or not len(E):
        return Matching([], list(range(len(T))), list(range(len(E))))
    D = np.linalg.norm(T[:, None] - E[None], axis=2)
    order = np.argsort(D, axis=None, kind="stable")
    used_t, used_e, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), len(E))
        if i in used_t or j in used_e:
            continue
        used_t.add(i)
        used_e.add(j)
        pairs.append((i, j, float(D[i, j])))
        if len(pairs) == min(len(T), len(E)):
            break
    return Matching(pairs, [i for i in range(len(T)) if i not in used_t],
                    [j for j in range(len(E)) if j not in used_e])


def drmse(true_positions, estimated_positions):
    """Root-mean-square distance over matched pairs (nan when nothing matches)."""
    d = match_positions(true_positions, estimated_positions).distances
    if d.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(d**2)))


@dataclass(frozen=True)
class Cdf:
    values: np.ndarray  # sorted samples
    fractions: np.ndarray  # cumulative fraction at each sample

    def percentile(self, q):
        """Smallest sample with cumulative fraction >= q/100 (nearest-rank)."""
        if not 0 < q <= 100:
            raise ValueError("percentile must lie in (0, 100]")
        k = int(np.ceil(q / 100.0 * self.values.size)) - 1
        return float(self.values[max(k, 0)])

    def __call__(self, x):
        return float(np.searchsorted(self.values, x, side="right") / self.values.size)

    def curve(self):
        return list(zip(self.values.tolist(), self.fractions.tolist()))


def cdf(samples):
    v = np.sort(np.asarray(samples, float).ravel())
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("cdf needs at least one finite sample")
    return Cdf(v, np.arange(1, v.size + 1) / v.size)
