"""The two sensing architectures.

MIMO: eight ceiling transceivers. Each unit ranges targets in its zone by
time of arrival on its own echo plus two bistatic echoes from neighbouring
emitters, then the three path lengths are triangulated.

MISO: one ceiling imaging receiver with 128 pixels split into eight groups
of 16; group g listens while transmitter g fires. An occupied pixel
localizes its target to the pixel's 0.5 m floor cell.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from scipy.sparse.csgraph import connected_components

from . import constants as K
from .channel import (
    CPC, Detector, Emitter, LensPixel, LinkRenderer, add_noise, noise_sigma, observation_slots,
    received_waveform, shaped_samples,
)
from .scene import Scene, Target

HEAD_HEIGHT = K.TARGET_DIMS[2]
LABEL_SNR = 3.0  # a target is labelled once its own echo reaches this many window sigmas
WINDOW_LEAD = 1.2e-9  # pixel window opens this long before the head-height echo
MAX_RESIDUAL = 0.3  # rms path residual (m) above which a fix is rejected
ZONE_MARGIN = 0.5  # search area around a zone
ACCEPT_MARGIN = 0.2  # fixes kept up to zone_radius + this; covers the room's gaps
DEDUP_TOLERANCE = K.RANGE_RESOLUTION
CYCLE_DEDUP_TOLERANCE = 1.0
PATH_BIAS = 0.36  # a labelled (peak) slot centre runs this far (m) past the head path


# hardware ------------------------------------------------------------------------

@dataclass(frozen=True)
class TransceiverUnit:
    id: int
    emitter: Emitter
    detector: Detector
    zone_radius: float = K.ZONE_RADIUS

    @property
    def position(self):
        return np.asarray(self.emitter.position, float)


def default_units(acceptance=K.MIMO_ACCEPTANCE, positions=K.UNIT_POSITIONS):
    return tuple(
        TransceiverUnit(i, Emitter(tuple(p)), Detector(tuple(p), optics=CPC(acceptance)))
        for i, p in enumerate(positions)
    )


def neighbors(units, n, count=2):
    """Nearest units to n (ties by id); the pair is kept non-collinear with n."""
    p = units[n].position[:2]
    order = sorted((u.id for u in units if u.id != n),
                   key=lambda k: (round(float(np.linalg.norm(units[k].position[:2] - p)), 9), k))
    if count != 2 or len(order) < 2:
        return tuple(order[:count])
    a = order[0]
    for b in order[1:]:
        u, v = units[a].position[:2] - p, units[b].position[:2] - p
        if abs(u[0] * v[1] - u[1] * v[0]) > 1e-9:
            return (a, b)
    return (a, order[1])


@dataclass(frozen=True)
class ImagingReceiver:
    """Pixel p = row * cols + col; col runs along x, row along y."""

    position: tuple = K.IMG_POSITION
    cols: int = K.IMG_COLS
    rows: int = K.IMG_ROWS
    cell: float = K.PIXEL_SIZE
    n_groups: int = K.N_GROUPS

    @property
    def n_pixels(self):
        return self.cols * self.rows

    def cell_rect(self, p):
        r, c = divmod(p, self.cols)
        return (c * self.cell, r * self.cell, (c + 1) * self.cell, (r + 1) * self.cell)

    def cell_center(self, p):
        x0, y0, x1, y1 = self.cell_rect(p)
        return ((x0 + x1) / 2, (y0 + y1) / 2)

    def pixel_at(self, xy):
        c, r = int(math.floor(xy[0] / self.cell)), int(math.floor(xy[1] / self.cell))
        if 0 <= c < self.cols and 0 <= r < self.rows:
            return r * self.cols + c
        return None

    def group_of(self, p):
        r, c = divmod(p, self.cols)
        per_x = self.cols // 2
        per_y = self.rows // (self.n_groups // 2)
        return (c // per_x) * (self.n_groups // 2) + r // per_y

    def group_pixels(self, g):
        return tuple(p for p in range(self.n_pixels) if self.group_of(p) == g)

    def pixel(self, p):
        return Detector(tuple(self.position), area=K.IMG_PIXEL_AREA, optics=LensPixel(footprint=self.cell_rect(p)),
                        noise_density=K.IMG_NOISE_DENSITY)


# snapshots and reports -----------------------------------------------------------

@dataclass
class Snapshot:
    kind: str  # "mimo" or "miso"
    rx: int  # receiving unit (mimo) or pixel group (miso)
    tx: int
    waveforms: list
    timestamp: float = 0.0
    windows: tuple = ()  # miso: first sample of each pixel's window
    window_length: int = K.PIXEL_SAMPLES
    labels: np.ndarray | None = None  # ground truth when simulated

    @property
    def link(self):
        return (self.kind, self.rx, self.tx)

    def blocks(self):
        if self.kind == "mimo":
            w = self.waveforms[0]
            return w.samples.reshape(-1, w.samples_per_slot)
        n = self.window_length
        return np.stack([w.samples[s:s + n] for w, s in zip(self.waveforms, self.windows)])

    def vector(self):
        return self.blocks().ravel()


def bit_runs(bits):
    """(start, stop) of every maximal run of set bits."""
    b = np.concatenate(([0], np.asarray(bits, np.int8) != 0, [0])).astype(np.int8)
    d = np.diff(b)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def leading_slots(bits):
    return [int(s) for s, _ in bit_runs(bits)]


@dataclass
class DetectionReport:
    occupancy: dict = field(default_factory=dict)  # link -> bits
    ranges: list = field(default_factory=list)  # monostatic candidate ranges (m)
    positions: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    seed: object = None
    timestamp: float = 0.0

    @property
    def count(self):
        return len(self.positions)

    def csv_row(self):
        pos = ";".join(f"{x!r}:{y!r}" for x, y in self.positions)
        res = ";".join(repr(float(r)) for r in self.residuals)
        return [str(self.seed), repr(self.timestamp), self.count, pos, res]

    HEADER = ("seed", "timestamp", "count", "positions", "residuals")


def write_reports(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DetectionReport.HEADER)
        for r in reports:
            w.writerow(r.csv_row())


# systems -------------------------------------------------------------------------

class _System:
    kind = ""

    def __init__(self, scene: Scene, bandwidth=K.NOISE_BANDWIDTH):
        self.scene = scene.with_targets(())
        self.bandwidth = bandwidth
        self.n_slots = observation_slots(scene.room)
        self.n_bins = self.n_slots * int(round(K.SLOT_WIDTH / K.BIN_DURATION))
        self._renderers = {}
        self._background = {}

    def _rng(self, seed):
        if seed is None or isinstance(seed, np.random.Generator):
            return seed
        return np.random.default_rng(seed)

    def _waveform(self, ir, emitter, det, rng):
        w = received_waveform(ir, emitter, det)
        return w if rng is None else add_noise(w, det, self.bandwidth, rng)

    def input_scale(self, link):
        """Largest noiseless background sample of a link; normalizes ANN inputs."""
        bg = self.background_snapshot(link)
        m = max(float(np.abs(w.samples).max()) for w in bg.waveforms)
        return m if m > 0 else 1e-6

    def calibration(self, link, seed):
        """One noisy empty-room scan, the reference BSM and CCM compare against."""
        return self.scan((), *link[1:], seed=seed)

    def background_snapshot(self, link):
        if link not in self._background:
            self._background[link] = self.scan((), *link[1:], seed=None)
        return self._background[link]

    def sigma(self):
        return noise_sigma(self.detector_for_noise(), self.bandwidth)


class MimoLidal(_System):
    kind = "mimo"

    def __init__(self, scene, units=None, bandwidth=K.NOISE_BANDWIDTH):
        super().__init__(scene, bandwidth)
        self.units = tuple(units) if units is not None else default_units()
        self._neighbors = {u.id: neighbors(self.units, u.id) for u in self.units}

    def detector_for_noise(self):
        return self.units[0].detector

    def neighbors(self, n):
        return self._neighbors[n]

    def links(self, rx=None):
        rxs = [u.id for u in self.units] if rx is None else [rx]
        return [("mimo", r, t) for r in rxs for t in (r, *self._neighbors[r])]

    def renderer(self, tx):
        if tx not in self._renderers:
            self._renderers[tx] = LinkRenderer(self.scene, self.units[tx].emitter,
                                               [u.detector for u in self.units], self.n_bins)
        return self._renderers[tx]

    def echo_slots(self, echo, rx, tx):
        """Per-target slot sums (A * samples) of each target's own echo, shape (n_targets, n_slots)."""
        pulse = int(round(self.units[tx].emitter.pulse_width / K.BIN_DURATION))
        step = int(round(K.SAMPLE_PERIOD / K.BIN_DURATION))
        w = shaped_samples(echo, pulse, step, self.units[rx].detector.responsivity)
        return w.reshape(len(echo), self.n_slots, K.SAMPLES_PER_SLOT).sum(axis=2)

    def label(self, echo, rx, tx):
        """Ground truth: each target's strongest slot, if it clears LABEL_SNR slot sigmas."""
        bits = np.zeros(self.n_slots, np.uint8)
        floor = LABEL_SNR * self.sigma() * math.sqrt(K.SAMPLES_PER_SLOT)
        for row in self.echo_slots(echo, rx, tx):
            if row.size and row.max() >= floor:
                bits[int(np.argmax(row))] = 1
        return bits

    def scan_tx(self, targets, tx, rxs, seeds=None, timestamp=0.0):
        """Snapshots at several receivers for one emission; seeds maps rx -> seed or None."""
        irs, echoes = self.renderer(tx).render(list(targets), echoes=True)
        out = {}
        for rx in rxs:
            seed = None if seeds is None else seeds[rx]
            w = self._waveform(irs[rx], self.units[tx].emitter, self.units[rx].detector, self._rng(seed))
            out[rx] = Snapshot("mimo", rx, tx, [w], timestamp, labels=self.label(echoes[rx], rx, tx))
        return out

    def scan(self, targets, rx, tx, seed=None, timestamp=0.0):
        return self.scan_tx(targets, tx, [rx], {rx: seed}, timestamp)[rx]

    def scan_all(self, targets, seed=None, timestamp=0.0, links=None):
        """Every link of the cycle (or just `links`), keyed by link. seed=None is noiseless."""
        by_tx = {}
        for _, rx, tx in links or self.links():
            by_tx.setdefault(tx, []).append(rx)
        out = {}
        for tx, rxs in sorted(by_tx.items()):
            seeds = None if seed is None else {rx: _link_seed(seed, rx, tx) for rx in rxs}
            for rx, s in self.scan_tx(targets, tx, rxs, seeds, timestamp).items():
                out[("mimo", rx, tx)] = s
        return out


class MisoLidal(_System):
    kind = "miso"

    def __init__(self, scene, receiver=None, units=None, bandwidth=K.NOISE_BANDWIDTH):
        super().__init__(scene, bandwidth)
        self.receiver = receiver or ImagingReceiver()
        self.units = tuple(units) if units is not None else default_units()
        self._pixels = {g: self.receiver.group_pixels(g) for g in range(self.receiver.n_groups)}
        self._windows = {g: self._window_starts(g) for g in self._pixels}

    def detector_for_noise(self):
        return self.receiver.pixel(0)

    def links(self):
        return [("miso", g, g) for g in range(self.receiver.n_groups)]

    def pixels(self, g):
        return self._pixels[g]

    def _window_starts(self, g):
        """Per pixel, the window start that captures most of a reference
        target's echo when it stands at the cell centre."""
        tx = self.units[g].position
        rx = np.asarray(self.receiver.position, float)
        n_total = self.n_slots * K.SAMPLES_PER_SLOT
        pulse = int(round(self.units[g].emitter.pulse_width / K.BIN_DURATION))
        step = int(round(K.SAMPLE_PERIOD / K.BIN_DURATION))
        starts = []
        for i, p in enumerate(self._pixels[g]):
            ref = Target(0, self.receiver.cell_center(p), K.TARGET_RHO_MEAN)
            _, echoes = self.renderer(g).render([ref], echoes=True)
            w = shaped_samples(echoes[i][0], pulse, step, 1.0)
            if w.any():
                run = np.convolve(w, np.ones(K.PIXEL_SAMPLES), "valid")
                s = int(np.argmax(run))
            else:  # nothing reaches the pixel: fall back to the head-height delay
                c = np.array([*self.receiver.cell_center(p), HEAD_HEIGHT])
                t = (np.linalg.norm(c - tx) + np.linalg.norm(rx - c)) / K.C - WINDOW_LEAD
                s = int(math.floor(t / K.SAMPLE_PERIOD))
            starts.append(min(max(s, 0), n_total - K.PIXEL_SAMPLES))
        return tuple(starts)

    def renderer(self, g):
        if g not in self._renderers:
            dets = [self.receiver.pixel(p) for p in self._pixels[g]]
            self._renderers[g] = LinkRenderer(self.scene, self.units[g].emitter, dets, self.n_bins)
        return self._renderers[g]

    def occupied_cells(self, targets):
        """Pixels whose floor cell holds a target's centre."""
        occ = np.zeros(self.receiver.n_pixels, np.uint8)
        for t in targets:
            p = self.receiver.pixel_at(t.position)
            if p is not None:
                occ[p] = 1
        return occ

    def label(self, targets, echoes, g):
        """Ground truth: each target's centre cell, if its own echo in that pixel's
        window clears LABEL_SNR window sigmas."""
        pix = self._pixels[g]
        bits = np.zeros(len(pix), np.uint8)
        floor = LABEL_SNR * self.sigma() * math.sqrt(K.PIXEL_SAMPLES)
        pulse = int(round(self.units[g].emitter.pulse_width / K.BIN_DURATION))
        step = int(round(K.SAMPLE_PERIOD / K.BIN_DURATION))
        for k, t in enumerate(targets):
            p = self.receiver.pixel_at(t.position)
            if p is None or p not in pix:
                continue
            i = pix.index(p)
            w = shaped_samples(echoes[i][k], pulse, step, self.receiver.pixel(p).responsivity)
            s = self._windows[g][i]
            if w[s:s + K.PIXEL_SAMPLES].sum() >= floor:
                bits[i] = 1
        return bits

    def scan(self, targets, rx, tx=None, seed=None, timestamp=0.0):
        g = rx
        if tx is not None and tx != g:
            raise ValueError("pixel group g listens to transmitter g only")
        targets = list(targets)
        irs, echoes = self.renderer(g).render(targets, echoes=True)
        rng = self._rng(seed)
        ws = [self._waveform(ir, self.units[g].emitter, self.receiver.pixel(p), rng)
              for ir, p in zip(irs, self._pixels[g])]
        labels = self.label(targets, echoes, g)
        return Snapshot("miso", g, g, ws, timestamp, self._windows[g], labels=labels)

    def scan_all(self, targets, seed=None, timestamp=0.0, links=None):
        out = {}
        for link in links or self.links():
            g = link[1]
            s = None if seed is None else _link_seed(seed, g, g)
            out[link] = self.scan(targets, g, seed=s, timestamp=timestamp)
        return out

    def assemble(self, bits_by_group):
        occ = np.zeros(self.receiver.n_pixels, np.uint8)
        for g, bits in bits_by_group.items():
            occ[list(self._pixels[g])] = bits
        return occ


def _link_seed(seed, rx, tx):
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return [*base, int(rx), int(tx)]


_SYSTEMS = {}


def units_from_config(config):
    """Transceiver units from a scenario's optional "units" entry; None means the default grid."""
    spec = (config or {}).get("units")
    if spec is None:
        return None
    positions = tuple(tuple(map(float, p)) for p in spec["positions"])
    units = default_units(float(spec.get("acceptance", K.MIMO_ACCEPTANCE)), positions)
    radius = spec.get("zone_radius")
    if radius is not None:
        units = tuple(replace(u, zone_radius=float(radius)) for u in units)
    return units


def system_for(scene: Scene, kind, units=None):
    """Cached system for a furniture layout (and unit set)."""
    key = (kind, scene.layout_key(), repr(units))
    if key not in _SYSTEMS:
        if len(_SYSTEMS) > 16:
            _SYSTEMS.clear()
        _SYSTEMS[key] = MimoLidal(scene, units) if kind == "mimo" else MisoLidal(scene)
    return _SYSTEMS[key]


def mimo_scan(scene, receiving_unit, emitting_unit, seed=None):
    """One MIMO snapshot; seed None means noiseless."""
    return system_for(scene, "mimo").scan(scene.targets, receiving_unit, emitting_unit, seed)


def miso_snapshot(scene, tx_index, seed=None):
    """One pixel-group snapshot; tx_index counts from 1."""
    if not 1 <= tx_index <= K.N_GROUPS:
        raise ValueError("tx_index must lie in [1, 8]")
    return system_for(scene, "miso").scan(scene.targets, tx_index - 1, seed=seed)


# ranging and positioning ---------------------------------------------------------------

def toa_range(slot_index, mode="monostatic", slot_width=K.SLOT_WIDTH):
    """Range (monostatic) or total path length (bistatic) at the slot centre."""
    if slot_index < 0:
        raise ValueError("slot index must be non-negative")
    path = K.C * (slot_index + 0.5) * slot_width
    if mode == "monostatic":
        return path / 2.0
    if mode == "bistatic":
        return path
    raise ValueError("mode is 'monostatic' or 'bistatic'")


def echo_range(slot_index, mode="monostatic"):
    """Range or path of a labelled echo slot, corrected for the peak-slot lag."""
    bias = PATH_BIAS / 2 if mode == "monostatic" else PATH_BIAS
    return toa_range(slot_index, mode) - bias


@dataclass(frozen=True)
class Fix:
    position: tuple
    residual: float  # rms path residual, metres
    ok: bool
    links: int = 3  # independent constraints behind the fix


def _paths(xy, constraints, height):
    h = height(xy) if callable(height) else np.full(len(xy), float(height))
    pts = np.column_stack([xy, h])
    out = []
    for tx, rx, _ in constraints:
        out.append(np.linalg.norm(pts - tx, axis=1) + np.linalg.norm(pts - rx, axis=1))
    return np.stack(out, axis=1)


def triangulate(constraints, height=0.0, bounds=None, grid=0.05, max_residual=MAX_RESIDUAL):
    """Least-squares floor point for (tx, rx, path) constraints.

    A monostatic range r enters as (u, u, 2r). The target point sits at
    `height`, a number or a callable mapping (n, 2) floor points to heights. A coarse grid over `bounds` (x0, y0, x1, y1) seeds a local
    refinement; the fix is flagged when the rms residual exceeds max_residual
    or the point leaves the bounds.
    """
    cons = [(np.asarray(t, float), np.asarray(r, float), float(p)) for t, r, p in constraints]
    if len(cons) < 2:
        raise ValueError("need at least two constraints")
    target = np.array([c[2] for c in cons])
    if bounds is None:
        xy = np.array([c[i][:2] for c in cons for i in (0, 1)])
        reach = target.max() / 2
        bounds = (*(xy.min(0) - reach), *(xy.max(0) + reach))
    x0, y0, x1, y1 = bounds
    gx = np.arange(x0, x1 + grid / 2, grid)
    gy = np.arange(y0, y1 + grid / 2, grid)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    cost = ((_paths(pts, cons, height) - target) ** 2).sum(axis=1)
    start = pts[int(np.argmin(cost))]

    def fun(p):
        return _paths(p[None, :], cons, height)[0] - target

    sol = least_squares(fun, start, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    p = sol.x
    if not np.all(np.isfinite(p)):
        return Fix((float("nan"), float("nan")), float("inf"), False)
    rms = float(np.sqrt(np.mean(fun(p) ** 2)))
    inside = x0 - 1e-9 <= p[0] <= x1 + 1e-9 and y0 - 1e-9 <= p[1] <= y1 + 1e-9
    return Fix((float(p[0]), float(p[1])), rms, bool(inside and rms <= max_residual))


def deduplicate(positions, tolerance=DEDUP_TOLERANCE):
    """Merge positions linked by chains of gaps <= tolerance into centroids.

    Repeats on the merged centroids until nothing changes, so the result is
    idempotent.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    pts = [np.asarray(p, float) for p in positions]
    weights = [1.0] * len(pts)
    while len(pts) > 1:
        P = np.array(pts)
        d = np.linalg.norm(P[:, None] - P[None], axis=2)
        n, lab = connected_components(d <= tolerance, directed=False)
        if n == len(pts):
            break
        w = np.array(weights)
        new_pts, new_w = [], []
        for k in range(n):
            m = lab == k
            new_pts.append((P[m] * w[m, None]).sum(0) / w[m].sum())
            new_w.append(w[m].sum())
        order = np.argsort([np.flatnonzero(lab == k)[0] for k in range(n)], kind="stable")
        pts = [new_pts[k] for k in order]
        weights = [new_w[k] for k in order]
    return [tuple(map(float, p)) for p in pts]


def merge_fixes(positions, sources, tolerance=CYCLE_DEDUP_TOLERANCE, quality=None):
    """Single-linkage merge that never joins two fixes from the same receiver.

    One receiver resolved its fixes as separate echoes, so they stay apart.
    Pairs are joined closest first; each cluster becomes the centroid of its
    highest-quality members.
    """
    P = np.asarray(positions, float).reshape(-1, 2)
    q = np.ones(len(P)) if quality is None else np.asarray(quality, float)
    label = list(range(len(P)))
    members = {i: [i] for i in range(len(P))}
    pairs = sorted((float(np.linalg.norm(P[i] - P[j])), j, i)
                   for i in range(len(P)) for j in range(i))
    for d, i, j in pairs:
        if d > tolerance:
            break
        a, b = label[i], label[j]
        if a == b or {sources[k] for k in members[a]} & {sources[k] for k in members[b]}:
            continue
        a, b = min(a, b), max(a, b)
        for k in members[b]:
            label[k] = a
        members[a] += members.pop(b)
    out = []
    for _, m in sorted(members.items()):
        m = np.array(m)
        best = m[q[m] == q[m].max()]
        out.append(tuple(map(float, P[best].mean(axis=0))))
    return out


def doa_localize(occupancy, receiver: ImagingReceiver | None = None):
    """Centroid of every 4-connected group of occupied cells."""
    rc = receiver or ImagingReceiver()
    occ = np.asarray(occupancy)
    if occ.size != rc.n_pixels:
        raise ValueError(f"expected {rc.n_pixels} occupancy bits")
    lab, n = ndimage.label(occ.reshape(rc.rows, rc.cols) != 0)
    out = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(lab == k)
        out.append((float(((cols + 0.5) * rc.cell).mean()), float(((rows + 0.5) * rc.cell).mean())))
    return out


# distinguishers as used by the cycles -----------------------------------------------------

class PerfectDistinguisher:
    """Returns the simulator's ground-truth bits."""

    candidates = "bits"

    def detect(self, snapshot):
        return np.asarray(snapshot.labels, np.uint8)

    def reset(self):
        pass


def _zone_bounds(unit, room, margin=ZONE_MARGIN):
    x, y = unit.position[:2]
    r = unit.zone_radius + margin
    return (max(0.0, x - r), max(0.0, y - r), min(room.width, x + r), min(room.length, y + r))


def visible_height(unit: TransceiverUnit, top=HEAD_HEIGHT):
    """Height of the first point of a person the unit's CPC can see, per floor point.

    Inside the acceptance cone this is the head; further out the cone edge
    cuts the body lower down.
    """
    rx = unit.position
    tan_a = math.tan(math.radians(unit.detector.optics.acceptance_semi_angle))

    def h(xy):
        r = np.hypot(xy[:, 0] - rx[0], xy[:, 1] - rx[1])
        return np.clip(rx[2] - r / tan_a, 0.0, top)

    return h


def candidate_slots(bits, mode="runs"):
    """Echo slots from occupancy bits: every set bit, or the first slot of each run."""
    if mode == "bits":
        return [int(i) for i in np.flatnonzero(bits)]
    if mode == "runs":
        return leading_slots(bits)
    raise ValueError("mode is 'bits' or 'runs'")


def _mirror(p, a, b):
    """Reflection of p across the line through a and b."""
    p, a, b = (np.asarray(v, float) for v in (p, a, b))
    d = (b - a) / np.linalg.norm(b - a)
    v = p - a
    return a + 2 * (v @ d) * d - v


def associate(system: MimoLidal, rx, bits_by_tx, mode="runs", max_residual=MAX_RESIDUAL):
    """Fixes seen by one receiver.

    Every (monostatic, bistatic, bistatic) echo triple is triangulated; the
    best-fitting triples are taken greedily with each echo used once; a
    leftover monostatic echo then borrows one bistatic echo or pairs with a
    single free bistatic echo (two constraints; the neighbour that saw
    nothing decides between the two mirror solutions).
    """
    nb = system.neighbors(rx)
    u = system.units
    mono = candidate_slots(bits_by_tx[rx], mode)
    bi = [candidate_slots(bits_by_tx[t], mode) for t in nb]
    bounds = _zone_bounds(u[rx], system.scene.room)
    height = visible_height(u[rx])
    reach = u[rx].zone_radius + ACCEPT_MARGIN
    me = u[rx].position

    def near(f):
        return f.ok and math.dist(f.position, me[:2]) <= reach

    def path(slot):
        return echo_range(slot, "bistatic")

    trials = []
    if len(nb) == 2:
        for s0 in mono:
            for s1 in bi[0]:
                for s2 in bi[1]:
                    cons = [(me, me, path(s0)), (u[nb[0]].position, me, path(s1)),
                            (u[nb[1]].position, me, path(s2))]
                    f = triangulate(cons, height, bounds, grid=0.1, max_residual=max_residual)
                    if near(f):
                        trials.append((f.residual, s0, s1, s2, f))
    trials.sort(key=lambda t: t[:4])
    fixes, used = [], set()
    for _, s0, s1, s2, f in trials:
        keys = {(0, s0), (1, s1), (2, s2)}
        if not keys & used:
            used |= keys
            fixes.append(f)
    for _, s0, s1, s2, f in trials:
        if (0, s0) in used or ((1, s1) in used and (2, s2) in used):
            continue
        used |= {(0, s0), (1, s1), (2, s2)}
        fixes.append(f)
    # pairs of one monostatic and one bistatic echo; the silent neighbour picks the mirror side
    pairs = []
    for s0 in mono:
        if (0, s0) in used:
            continue
        for k, t in enumerate(nb):
            for s in bi[k]:
                if (k + 1, s) in used:
                    continue
                cons = [(me, me, path(s0)), (u[t].position, me, path(s))]
                f = triangulate(cons, height, bounds, grid=0.1, max_residual=max_residual)
                if not f.ok:
                    continue
                others = [u[o].position[:2] for o in nb if o != t]
                m = _mirror(f.position, me[:2], u[t].position[:2])
                room = system.scene.room
                if others and 0 <= m[0] <= room.width and 0 <= m[1] <= room.length:
                    if min(math.dist(m, o) for o in others) > min(math.dist(f.position, o) for o in others):
                        f = replace(f, position=(float(m[0]), float(m[1])))
                f = replace(f, links=2)
                if near(f):
                    pairs.append((f.residual, s0, k + 1, s, f))
    for _, s0, k, s, f in sorted(pairs, key=lambda t: t[:4]):
        if (0, s0) in used or (k, s) in used:
            continue
        used |= {(0, s0), (k, s)}
        fixes.append(f)
    return fixes, [toa_range(s) for s in mono]


def run_mimo_cycle(scene: Scene, distinguisher, seed, system=None, timestamp=0.0,
                   dedup_tolerance=CYCLE_DEDUP_TOLERANCE, snapshots=None):
    """Scan every link, detect, triangulate per receiver and merge overlaps."""
    system = system or system_for(scene, "mimo")
    if snapshots is None:
        snapshots = system.scan_all(scene.targets, seed, timestamp)
    report = DetectionReport(seed=seed, timestamp=timestamp)
    fixes, sources = [], []
    for u in system.units:
        bits = {}
        for link in system.links(u.id):
            bits[link[2]] = distinguisher.detect(snapshots[link])
            report.occupancy[link] = bits[link[2]]
        f, r = associate(system, u.id, bits, getattr(distinguisher, "candidates", "runs"))
        fixes += f
        sources += [u.id] * len(f)
        report.ranges += r
    report.positions = merge_fixes([f.position for f in fixes], sources, dedup_tolerance,
                                   [f.links for f in fixes])
    report.residuals = [f.residual for f in fixes]
    return report


def run_miso_cycle(scene: Scene, distinguisher, seed, system=None, timestamp=0.0, snapshots=None):
    """Eight group snapshots, assembled into one image, then DOA."""
    system = system or system_for(scene, "miso")
    if snapshots is None:
        snapshots = system.scan_all(scene.targets, seed, timestamp)
    report = DetectionReport(seed=seed, timestamp=timestamp)
    groups = {}
    for link in system.links():
        groups[link[1]] = distinguisher.detect(snapshots[link])
        report.occupancy[link] = groups[link[1]]
    report.positions = doa_localize(system.assemble(groups), system.receiver)
    return report
