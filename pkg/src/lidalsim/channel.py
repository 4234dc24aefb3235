"""Diffuse optical channel: impulse responses, pulse shaping, receiver noise.

The channel is a one-bounce (optionally two-bounce) Lambertian patch
model. The emitter has a generalized Lambertian pattern of order m; every
surface patch re-radiates as an ideal diffuser; the detector collects
through either a CPC (acceptance-angle gate plus ideal concentrator gain)
or an imaging-lens pixel (field-of-view gate plus floor-footprint gate).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import constants as K
from .scene import Patches, Scene, box_patches


class ChannelError(ValueError):
    pass


def lambertian_order(semi_angle):
    """Lambertian mode number for a half-power semi-angle in degrees."""
    if not 0.0 < semi_angle < 90.0:
        raise ChannelError("semi-angle must lie strictly between 0 and 90 degrees")
    return -math.log(2.0) / math.log(math.cos(math.radians(semi_angle)))


def pointing(elevation, azimuth):
    """Unit vector for an (elevation, azimuth) pair; elevation 90 points at the floor."""
    el, az = math.radians(elevation), math.radians(azimuth)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), -math.sin(el)])


@dataclass(frozen=True)
class Emitter:
    position: tuple
    elevation: float = K.TX_ELEVATION
    azimuth: float = K.TX_AZIMUTH
    semi_angle: float = K.TX_SEMI_ANGLE
    optical_power: float = K.TX_POWER
    pulse_width: float = K.PULSE_WIDTH

    def __post_init__(self):
        if not 0.0 < self.semi_angle < 90.0:
            raise ChannelError("emitter semi-angle must lie in (0, 90) degrees")

    @property
    def normal(self):
        return pointing(self.elevation, self.azimuth)

    @property
    def order(self):
        return lambertian_order(self.semi_angle)


@dataclass(frozen=True)
class CPC:
    acceptance_semi_angle: float = K.MIMO_ACCEPTANCE
    refractive_index: float = K.CPC_INDEX

    @property
    def peak_gain(self):
        return self.refractive_index**2 / math.sin(math.radians(self.acceptance_semi_angle)) ** 2

    def gain(self, cos_psi, xy):
        ok = cos_psi >= math.cos(math.radians(self.acceptance_semi_angle))
        return np.where(ok, self.peak_gain, 0.0)


@dataclass(frozen=True)
class LensPixel:
    """Imaging pixel: sees patches above its floor cell inside the lens FOV.

    The lens maps its whole aperture onto the pixel, so the optical gain is
    aperture_area / pixel area.
    """

    fov_semi_angle: float = K.IMG_FOV
    footprint: tuple = (0.0, 0.0, K.PIXEL_SIZE, K.PIXEL_SIZE)  # x0, y0, x1, y1
    aperture_area: float = K.IMG_APERTURE_AREA

    def in_footprint(self, xy):
        x0, y0, x1, y1 = self.footprint
        return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)

    def gain(self, cos_psi, xy, area=K.IMG_PIXEL_AREA):
        ok = (cos_psi >= math.cos(math.radians(self.fov_semi_angle))) & self.in_footprint(xy)
        return np.where(ok, self.aperture_area / area, 0.0)


@dataclass(frozen=True)
class Detector:
    position: tuple
    area: float = K.MIMO_PD_AREA
    responsivity: float = K.RESPONSIVITY
    optics: object = field(default_factory=CPC)
    noise_density: float = K.MIMO_NOISE_DENSITY
    elevation: float = 90.0
    azimuth: float = 0.0

    @property
    def normal(self):
        return pointing(self.elevation, self.azimuth)

    def optical_gain(self, cos_psi, xy):
        if isinstance(self.optics, LensPixel):
            return self.optics.gain(cos_psi, xy, self.area)
        return self.optics.gain(cos_psi, xy)


@dataclass
class ImpulseResponse:
    bins: np.ndarray
    bin_duration: float = K.BIN_DURATION
    origin_time: float = 0.0

    @property
    def times(self):
        return self.origin_time + np.arange(self.bins.size) * self.bin_duration

    def energy(self, pulse_width):
        """Received optical energy for a rectangular pulse of the given width."""
        return float(self.bins.sum() * pulse_width)

    def to_csv(self, path):
        _dump_csv(path, self.times, self.bins, ("time_s", "power_w"))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_period: float = K.SAMPLE_PERIOD
    slot_width: float = K.SLOT_WIDTH
    start_time: float = 0.0

    @property
    def samples_per_slot(self):
        return _ratio(self.slot_width, self.sample_period, "slot width", "sample period")

    @property
    def n_slots(self):
        return self.samples.size // self.samples_per_slot

    @property
    def times(self):
        return self.start_time + np.arange(self.samples.size) * self.sample_period

    def to_csv(self, path):
        _dump_csv(path, self.times, self.samples, ("time_s", "current_a"))


def _dump_csv(path, t, v, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a, b in zip(t, v):
            w.writerow([repr(float(a)), repr(float(b))])


def _ratio(a, b, what_a, what_b):
    r = a / b
    n = int(round(r))
    if n < 1 or abs(r - n) > 1e-6 * max(1.0, r):
        raise ChannelError(f"{what_a} must be an integer multiple of {what_b}")
    return n


def observation_slots(room, slot_width=K.SLOT_WIDTH):
    """Slots needed to hold the longest round trip across the room diagonal."""
    return int(math.ceil(2.0 * room.diagonal / K.C / slot_width))


# geometry ---------------------------------------------------------------------

def segments_blocked(a, b, boxes, eps=1e-6):
    """Boolean mask: segment a[i] -> b[i] passes through the interior of any box.

    Touching a face or starting/ending on a box surface does not count.
    """
    a = np.broadcast_to(np.asarray(a, float), np.shape(b))
    b = np.asarray(b, float)
    blocked = np.zeros(b.shape[0], dtype=bool)
    if not len(boxes) or not b.shape[0]:
        return blocked
    d = b - a
    zero = np.abs(d) < 1e-15
    safe = np.where(zero, 1.0, d)
    for lo, hi in boxes:
        t1 = (lo - a) / safe
        t2 = (hi - a) / safe
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        inside = (a > lo) & (a < hi)
        tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
        t_in = np.maximum(tmin.max(axis=1), 0.0)
        t_out = np.minimum(tmax.min(axis=1), 1.0)
        blocked |= (t_out - t_in > 1e-9) & (t_out > eps) & (t_in < 1.0 - eps)
    return blocked


def _emitter_side(p: Patches, emitter: Emitter):
    """Power landing on each patch and the emitter->patch distance."""
    tx = np.asarray(emitter.position, float)
    v = p.center - tx
    d = np.linalg.norm(v, axis=1)
    u = v / d[:, None]
    cos_e = u @ emitter.normal
    cos_in = -np.einsum("ij,ij->i", u, p.normal)
    ok = (cos_e > 0) & (cos_in > 0)
    m = emitter.order
    power = np.where(
        ok,
        emitter.optical_power * (m + 1) / (2 * np.pi * d**2)
        * np.clip(cos_e, 0, None) ** m * np.clip(cos_in, 0, None) * p.area,
        0.0,
    )
    return power, d


def _detector_side(centers, normals, rx_pos, rx_normal):
    v = np.asarray(rx_pos, float) - centers
    d = np.linalg.norm(v, axis=1)
    u = v / d[:, None]
    cos_out = np.einsum("ij,ij->i", u, normals)
    cos_psi = -(u @ rx_normal)
    return d, cos_out, cos_psi


def _patch_to_detector(p_power, rho, centers, normals, detector: Detector):
    d2, cos_out, cos_psi = _detector_side(centers, normals, detector.position, detector.normal)
    g = detector.optical_gain(cos_psi, centers)
    ok = (cos_out > 0) & (cos_psi > 0) & (g > 0)
    power = np.where(
        ok,
        p_power * rho / (np.pi * d2**2) * np.clip(cos_out, 0, None)
        * detector.area * np.clip(cos_psi, 0, None) * g,
        0.0,
    )
    return power, d2


def _histogram(power, delay, n_bins, bin_duration):
    idx = np.floor(delay / bin_duration).astype(np.int64)
    keep = (power > 0) & (idx >= 0) & (idx < n_bins)
    return np.bincount(idx[keep], weights=power[keep], minlength=n_bins).astype(float)


def impulse_response_patches(patches: Patches, emitter, detector, boxes=(), n_bins=None,
                             bin_duration=K.BIN_DURATION, max_bounces=1, chunk=512):
    """Impulse response over an explicit patch set with `boxes` as occluders."""
    if max_bounces not in (1, 2):
        raise ChannelError("max_bounces must be 1 or 2")
    if n_bins is None:
        raise ChannelError("n_bins is required")
    tx = np.asarray(emitter.position, float)
    rx = np.asarray(detector.position, float)
    p_in, d1 = _emitter_side(patches, emitter)
    vis = p_in > 0
    vis[vis] = ~segments_blocked(tx, patches.center[vis], boxes)
    p_in = np.where(vis, p_in, 0.0)

    p_out, d2 = _patch_to_detector(p_in, patches.rho, patches.center, patches.normal, detector)
    seen = p_out > 0
    seen[seen] = ~segments_blocked(patches.center[seen], np.broadcast_to(rx, (seen.sum(), 3)), boxes)
    h = _histogram(np.where(seen, p_out, 0.0), (d1 + d2) / K.C, n_bins, bin_duration)

    if max_bounces == 2:
        # second bounce: emitter -> i -> j -> detector, chunked over i
        q_out, _ = _patch_to_detector(np.ones(len(patches)), patches.rho, patches.center,
                                      patches.normal, detector)
        j_ok = np.flatnonzero((q_out > 0) & seen)
        src = np.flatnonzero(p_in > 0)
        cj, nj = patches.center[j_ok], patches.normal[j_ok]
        for start in range(0, src.size, chunk):
            i = src[start:start + chunk]
            v = cj[None, :, :] - patches.center[i][:, None, :]
            dij = np.linalg.norm(v, axis=2)
            dij = np.where(dij > 0, dij, np.inf)
            u = v / dij[..., None]
            cos_o = np.einsum("ijk,ik->ij", u, patches.normal[i])
            cos_i = -np.einsum("ijk,jk->ij", u, nj)
            ok = (cos_o > 0) & (cos_i > 0)
            if not ok.any():
                continue
            ii, jj = np.nonzero(ok)
            a, b = patches.center[i][ii], cj[jj]
            free = ~segments_blocked(a, b, boxes)
            ii, jj = ii[free], jj[free]
            pj = (p_in[i][ii] * patches.rho[i][ii] / (np.pi * dij[ii, jj] ** 2)
                  * cos_o[ii, jj] * cos_i[ii, jj] * patches.area[j_ok][jj])
            pr = pj * q_out[j_ok][jj]
            delay = (d1[i][ii] + dij[ii, jj] + d2[j_ok][jj]) / K.C
            h += _histogram(pr, delay, n_bins, bin_duration)
    return ImpulseResponse(h, bin_duration)


def impulse_response(scene: Scene, emitter, detector, max_bounces=1, n_bins=None,
                     bin_duration=K.BIN_DURATION):
    """Received optical power per delay bin for one emitter/detector pair."""
    lo, hi = scene.room.bounds
    for what, pos in (("emitter", emitter.position), ("detector", detector.position)):
        if not (np.all(np.asarray(pos) >= lo - 1e-9) and np.all(np.asarray(pos) <= hi + 1e-9)):
            raise ChannelError(f"{what} is outside the room")
    if n_bins is None:
        n_bins = observation_slots(scene.room) * _ratio(K.SLOT_WIDTH, bin_duration, "slot", "bin")
    boxes = scene.obstacle_boxes() + scene.target_boxes()
    return impulse_response_patches(scene.patches(), emitter, detector, boxes, n_bins,
                                    bin_duration, max_bounces)


def shaped_samples(bins, pulse_bins, step, responsivity):
    """Rectangular-pulse convolution of (..., n_bins) power rows, point-sampled every `step` bins."""
    bins = np.asarray(bins, float)
    s = np.concatenate([np.zeros(bins.shape[:-1] + (1,)), np.cumsum(bins, axis=-1)], axis=-1)
    n = np.arange(bins.shape[-1])
    shaped = s[..., n + 1] - s[..., np.maximum(n + 1 - pulse_bins, 0)]
    return responsivity * shaped[..., ::step]


def received_waveform(ir: ImpulseResponse, emitter: Emitter, detector: Detector,
                      sample_period=K.SAMPLE_PERIOD, slot_width=K.SLOT_WIDTH):
    """Rectangular-pulse response as detector photocurrent sampled every sample_period."""
    n_pulse = _ratio(emitter.pulse_width, ir.bin_duration, "pulse width", "bin duration")
    step = _ratio(sample_period, ir.bin_duration, "sample period", "bin duration")
    _ratio(slot_width, sample_period, "slot width", "sample period")
    samples = shaped_samples(ir.bins, n_pulse, step, detector.responsivity)
    return Waveform(samples, sample_period, slot_width, ir.origin_time)


def noise_sigma(detector, bandwidth=K.NOISE_BANDWIDTH):
    if not bandwidth > 0:
        raise ChannelError("bandwidth must be positive")
    return detector.noise_density * math.sqrt(bandwidth)


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def add_noise(w: Waveform, detector, bandwidth=K.NOISE_BANDWIDTH, seed=None):
    """Add white Gaussian receiver noise with sigma = density * sqrt(bandwidth)."""
    sigma = noise_sigma(detector, bandwidth)
    if sigma == 0.0:
        return Waveform(w.samples.copy(), w.sample_period, w.slot_width, w.start_time)
    rng = _as_rng(seed)
    noisy = w.samples + rng.normal(0.0, sigma, size=w.samples.shape)
    return Waveform(noisy, w.sample_period, w.slot_width, w.start_time)


def slot_energies(w: Waveform):
    """Per-slot sums of |samples| and the (n_slots, samples_per_slot) raw blocks."""
    sps = w.samples_per_slot
    if w.samples.size % sps:
        raise ChannelError("waveform length is not a whole number of slots")
    blocks = w.samples.reshape(-1, sps)
    return np.abs(blocks).sum(axis=1), blocks


# cached rendering ---------------------------------------------------------------

class LinkRenderer:
    """Impulse responses of one emitter and several co-located detectors.

    The static background (room plus furniture) is computed once; each call
    to `render` adds target patches and removes background paths shadowed
    by the targets. Results match `impulse_response` on the full scene.
    """

    def __init__(self, scene: Scene, emitter: Emitter, detectors, n_bins=None,
                 bin_duration=K.BIN_DURATION):
        self.scene = scene.with_targets(())
        self.emitter = emitter
        self.detectors = list(detectors)
        self.bin_duration = bin_duration
        if n_bins is None:
            n_bins = observation_slots(scene.room) * _ratio(K.SLOT_WIDTH, bin_duration, "slot", "bin")
        self.n_bins = n_bins
        self.furniture = self.scene.obstacle_boxes()
        self._tx = np.asarray(emitter.position, float)

        p = self.scene.static_patches()
        p_in, d1 = _emitter_side(p, emitter)
        vis = p_in > 0
        vis[vis] = ~segments_blocked(self._tx, p.center[vis], self.furniture)
        self._bg = []
        for det in self.detectors:
            p_out, d2 = _patch_to_detector(np.where(vis, p_in, 0.0), p.rho, p.center, p.normal, det)
            seen = p_out > 0
            rx = np.asarray(det.position, float)
            seen[seen] = ~segments_blocked(p.center[seen], np.broadcast_to(rx, (seen.sum(), 3)),
                                           self.furniture)
            idx = np.flatnonzero(seen)
            bins = np.floor((d1[idx] + d2[idx]) / K.C / bin_duration).astype(np.int64)
            inwin = bins < n_bins
            idx, bins = idx[inwin], bins[inwin]
            power = p_out[idx]
            hist = np.bincount(bins, weights=power, minlength=n_bins).astype(float)
            self._bg.append((p.center[idx], power, bins, hist, rx))

    def background(self):
        return [ImpulseResponse(h.copy(), self.bin_duration) for *_, h, _ in self._bg]

    def render(self, targets, echoes=False):
        """One ImpulseResponse per detector for the static scene plus `targets`.

        With echoes=True also returns, per detector, an (n_targets, n_bins)
        array of the power each target reflects into that detector.
        """
        if not targets:
            irs = self.background()
            return (irs, [np.zeros((0, self.n_bins)) for _ in irs]) if echoes else irs
        tboxes = [t.box for t in targets]
        occluders = self.furniture + tboxes
        parts = [box_patches(*t.box, t.reflectivity, self.scene.patch_size) for t in targets]
        owner = np.concatenate([np.full(len(p), k) for k, p in enumerate(parts)])
        tp = Patches.concat(parts)
        t_in, t_d1 = _emitter_side(tp, self.emitter)
        vis = t_in > 0
        vis[vis] = ~segments_blocked(self._tx, tp.center[vis], occluders)
        t_in = np.where(vis, t_in, 0.0)
        out, own = [], []
        for det, (centers, power, bins, hist, rx) in zip(self.detectors, self._bg):
            h = hist.copy()
            if len(centers):
                sh = segments_blocked(self._tx, centers, tboxes) | segments_blocked(centers, np.broadcast_to(rx, centers.shape), tboxes)
                if sh.any():
                    h -= np.bincount(bins[sh], weights=power[sh], minlength=self.n_bins).astype(float)
                    np.maximum(h, 0.0, out=h)
            p_out, d2 = _patch_to_detector(t_in, tp.rho, tp.center, tp.normal, det)
            seen = p_out > 0
            seen[seen] = ~segments_blocked(tp.center[seen], np.broadcast_to(rx, (seen.sum(), 3)),
                                           occluders)
            p_out = np.where(seen, p_out, 0.0)
            delay = (t_d1 + d2) / K.C
            h += _histogram(p_out, delay, self.n_bins, self.bin_duration)
            out.append(ImpulseResponse(h, self.bin_duration))
            if echoes:
                b = np.floor(delay / self.bin_duration).astype(np.int64)
                keep = (p_out > 0) & (b < self.n_bins)
                own.append(np.bincount(owner[keep] * self.n_bins + b[keep], weights=p_out[keep],
                                       minlength=len(targets) * self.n_bins)
                           .reshape(len(targets), -1).astype(float))
        return (out, own) if echoes else out
