"""Per-link stateful wrappers that turn each method into ``detect(snapshot) -> bits``.

By default BSM differences consecutive snapshots and CCM correlates the
consecutive pairs of a sliding window, so both see motion only. Given
calibration references, BSM subtracts the empty-room scan instead and CCM
correlates against a reference that adapts to lasting changes. ``candidates`` tells the
positioning stage how to read the bits: every set bit is an echo ("bits")
or only the first slot of each run ("runs"), since a change detector
flags the whole extent of a moving echo.
"""

from __future__ import annotations

from collections import deque
from pathlib import Path

import numpy as np

from .. import constants as K
from ..lidal import candidate_slots
from .ann import Mlp, ann_detect
from .change import (
    CCM_GATE, CCM_THRESHOLD, HOLD, bsm_detect, ccm_coefficients, ccm_detect, difference_threshold,
)


def _zeros(snapshot):
    return np.zeros(len(snapshot.blocks()), np.uint8)


class BsmDistinguisher:
    """Subtracts a fixed empty-room reference recorded at calibration.

    Without a reference for a link, the previous snapshot of that link is
    used instead (plain consecutive differencing).
    """

    candidates = "runs"

    def __init__(self, sigma, references=None, k=3.0, threshold=None):
        self.sigma, self.k, self.threshold = sigma, k, threshold
        self.references = dict(references or {})
        self._prev = {}

    def reset(self):
        self._prev.clear()

    def detect(self, snapshot):
        prev = self.references.get(snapshot.link, self._prev.get(snapshot.link))
        self._prev[snapshot.link] = snapshot
        if prev is None:
            return _zeros(snapshot)
        thr = self.threshold
        if thr is None:
            thr = difference_threshold(self.sigma, snapshot.blocks().shape[1], self.k)
        return bsm_detect(prev, snapshot, thr)


class CcmDistinguisher:
    """Correlation change detector.

    Without references: the consecutive pairs of the last `hold` snapshots,
    so a target that stands still for `hold - 1` snapshots drops out.
    With references: each block is correlated against the calibration scan,
    and a block that stays decorrelated for more than `hold` snapshots is
    absorbed into the reference (a furniture move is forgotten after that,
    and so is a person who stands still).
    """

    candidates = "runs"

    def __init__(self, sigma, references=None, threshold=CCM_THRESHOLD, hold=HOLD, gate=CCM_GATE):
        if hold < 1:
            raise ValueError("hold must be at least one snapshot")
        self.sigma, self.threshold, self.hold, self.gate = sigma, threshold, hold, gate
        self.references = {k: np.array(v.blocks(), float) for k, v in (references or {}).items()}
        self._ref, self._age, self._window = {}, {}, {}

    def reset(self):
        self._ref.clear()
        self._age.clear()
        self._window.clear()

    def detect(self, snapshot):
        cur = np.asarray(snapshot.blocks(), float)
        link = snapshot.link
        base = self.references.get(link)
        if base is None:
            win = self._window.setdefault(link, deque(maxlen=max(self.hold, 2)))
            win.append(cur)
            if len(win) < 2:
                return _zeros(snapshot)
            return ccm_detect(list(win), self.threshold, self.sigma, self.gate)
        if link not in self._ref:
            self._ref[link] = base.copy()
            self._age[link] = np.zeros(len(cur), int)
        ref, age = self._ref[link], self._age[link]
        hit = ccm_coefficients(ref, cur, self.sigma, self.gate) < 1.0 - self.threshold
        age[:] = np.where(hit, age + 1, 0)
        stale = age > self.hold
        ref[stale] = cur[stale]
        age[stale] = 0
        return (hit & ~stale).astype(np.uint8)


class AnnDistinguisher:
    """One trained network per link; stateless."""

    candidates = "bits"

    def __init__(self, models: dict, threshold=K.OUTPUT_THRESHOLD):
        self.models = dict(models)
        self.threshold = threshold

    def reset(self):
        pass

    def detect(self, snapshot):
        net = self.models.get(snapshot.link)
        if net is None:
            raise KeyError(f"no model for link {snapshot.link}")
        return ann_detect(net, snapshot, self.threshold)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for (kind, rx, tx), net in sorted(self.models.items()):
            net.save(d / f"{kind}_{rx}_{tx}.json")

    @classmethod
    def load(cls, directory, threshold=K.OUTPUT_THRESHOLD):
        models = {}
        files = sorted(Path(directory).glob("*_*_*.json"))
        if not files:
            raise FileNotFoundError(f"no model files in {directory}")
        for f in files:
            kind, rx, tx = f.stem.split("_")
            models[(kind, int(rx), int(tx))] = Mlp.load(f)
        return cls(models, threshold)


def slot_errors(truth, bits, mode="bits", tolerance=1):
    """(missed, phantom) echoes: predicted echoes paired with true ones within `tolerance` slots."""
    true = [int(i) for i in np.flatnonzero(truth)]
    pred = candidate_slots(bits, mode)
    free = list(pred)
    missed = 0
    for t in true:
        near = [p for p in free if abs(p - t) <= tolerance]
        if near:
            free.remove(min(near, key=lambda p: (abs(p - t), p)))
        else:
            missed += 1
    return missed, len(free)


def distinguishing_error(truth, bits, mode="bits", tolerance=1):
    """True when the output misses a target or reports a phantom."""
    missed, phantom = slot_errors(truth, bits, mode, tolerance)
    return bool(missed or phantom)


__all__ = ["AnnDistinguisher", "BsmDistinguisher", "CcmDistinguisher",
           "distinguishing_error", "slot_errors"]
