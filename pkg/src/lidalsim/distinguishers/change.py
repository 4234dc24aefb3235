"""Change detectors: background subtraction (BSM) and cross-correlation (CCM).

Both work on per-slot (MIMO) or per-pixel (MISO) sample blocks, given as
2-D arrays or anything with a ``blocks()`` method.
"""

from __future__ import annotations

import math

import numpy as np

CCM_THRESHOLD = 0.15
CCM_GATE = 3.0  # a block is active when its sample variance exceeds this many sigma^2
HOLD = 6  # snapshots in the CCM window (five consecutive pairs)


def _blocks(s):
    b = s.blocks() if hasattr(s, "blocks") else s
    b = np.asarray(b, float)
    if b.ndim != 2:
        raise ValueError("expected a (blocks, samples) array")
    return b


def difference_threshold(sigma, samples_per_block, k=3.0):
    """k times the std of a block sum of the difference of two noisy snapshots."""
    return k * sigma * math.sqrt(2.0 * samples_per_block)


def bsm_detect(prev, curr, threshold):
    """Bit per block where |sum(curr - prev)| exceeds the threshold."""
    a, b = _blocks(prev), _blocks(curr)
    if a.shape != b.shape:
        raise ValueError("snapshots differ in shape")
    return (np.abs((b - a).sum(axis=1)) > threshold).astype(np.uint8)


def ccm_coefficients(prev, curr, sigma=0.0, gate=CCM_GATE):
    """Pearson coefficient per block; 1 where neither block rises above the noise.

    With sigma > 0 the block variances are corrected for the known noise
    variance, so an unchanged noisy block scores close to 1 instead of
    S / (S + sigma^2).
    """
    a, b = _blocks(prev), _blocks(curr)
    if a.shape != b.shape:
        raise ValueError("snapshots differ in shape")
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    va, vb = (a * a).mean(axis=1), (b * b).mean(axis=1)
    rho = np.ones(len(a))
    noise = sigma**2
    active = (np.maximum(va, vb) > gate * noise) & (va > 0) & (vb > 0)
    ca = np.maximum(va - noise, 0.5 * va)[active]
    cb = np.maximum(vb - noise, 0.5 * vb)[active]
    rho[active] = (a[active] * b[active]).mean(axis=1) / np.sqrt(ca * cb)
    return np.clip(rho, -1.0, 1.0)


def ccm_detect(window, threshold=CCM_THRESHOLD, sigma=0.0, gate=CCM_GATE):
    """Bit per block where any consecutive pair in the window decorrelates."""
    if len(window) < 2:
        raise ValueError("CCM needs at least two snapshots")
    bits = None
    for prev, curr in zip(window[:-1], window[1:]):
        hit = ccm_coefficients(prev, curr, sigma, gate) < 1.0 - threshold
        bits = hit if bits is None else bits | hit
    return bits.astype(np.uint8)
