import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidalsim import constants as K
from lidalsim.channel import (
    CPC, ChannelError, Detector, Emitter, ImpulseResponse, LinkRenderer, Waveform, add_noise,
    impulse_response, impulse_response_patches, lambertian_order, noise_sigma, received_waveform,
    slot_energies,
)
from lidalsim.scene import Patches, Room, Scene, Target, build_scene, default_config


@pytest.mark.parametrize("angle,m", [(60, 1.0), (75, 0.5128), (30, 4.82)])
def test_lambertian_order(angle, m):
    assert lambertian_order(angle) == pytest.approx(m, abs=5e-3)


@pytest.mark.parametrize("angle", [0, 90, -5, 120])
def test_lambertian_order_range(angle):
    with pytest.raises(ChannelError):
        lambertian_order(angle)


def _single_patch(area=0.1, rho=1.0, z=0.0):
    return Patches(np.array([[2.0, 2.0, z]]), np.array([[0.0, 0.0, 1.0]]), np.array([area]),
                   np.array([rho]))


def test_single_patch_energy_lands_at_round_trip_bin():
    tx = Emitter((2.0, 2.0, 2.0))
    rx = Detector((2.0, 2.0, 2.0))
    ir = impulse_response_patches(_single_patch(), tx, rx, n_bins=3000)
    peak = int(np.argmax(ir.bins))
    assert peak == int(2 * 2.0 / K.C / K.BIN_DURATION)
    assert ir.bins[peak] == pytest.approx(ir.bins.sum())
    assert peak * K.BIN_DURATION == pytest.approx(13.34e-9, abs=0.01e-9)


def test_narrow_acceptance_sees_nothing():
    s = build_scene({"obstacles": []})
    rx = Detector((2.0, 4.0, 3.0), optics=CPC(0.1), elevation=-90.0)  # facing the ceiling
    ir = impulse_response(s, Emitter((2.0, 4.0, 3.0)), rx)
    assert ir.bins.sum() == 0.0


def test_passivity_unit_reflectivity():
    room = Room(rho_walls=1.0, rho_floor=1.0, rho_ceiling=1.0)
    s = Scene(room)
    tx = Emitter((2.0, 4.0, 3.0))
    rx = Detector((2.0, 4.0, 3.0), area=1.0, optics=CPC(89.0, 1.0))
    ir = impulse_response(s, tx, rx)
    assert ir.energy(tx.pulse_width) <= tx.optical_power * tx.pulse_width


def test_reciprocity_on_single_patch():
    a, b = (1.5, 2.0, 2.0), (2.5, 2.0, 2.0)
    p = _single_patch()
    e_ab = impulse_response_patches(p, Emitter(a, semi_angle=60), Detector(b, area=1e-4, optics=CPC(80, 1.0)), n_bins=3000).bins.sum()
    e_ba = impulse_response_patches(p, Emitter(b, semi_angle=60), Detector(a, area=1e-4, optics=CPC(80, 1.0)), n_bins=3000).bins.sum()
    assert e_ab == pytest.approx(e_ba, rel=1e-12)


def test_zero_ir_gives_zero_waveform():
    w = received_waveform(ImpulseResponse(np.zeros(6400)), Emitter((0, 0, 3)), Detector((0, 0, 3)))
    assert not w.samples.any()
    assert w.samples.size == 640


def test_impulse_gives_rectangle():
    bins = np.zeros(2000)
    bins[300] = 2.0
    w = received_waveform(ImpulseResponse(bins), Emitter((0, 0, 3)), Detector((0, 0, 3)))
    nz = np.flatnonzero(w.samples)
    assert nz.size == int(K.PULSE_WIDTH / K.SAMPLE_PERIOD)
    assert nz[0] == 30 and np.all(np.diff(nz) == 1)
    assert np.allclose(w.samples[nz], K.RESPONSIVITY * 2.0)


def test_two_separated_impulses_do_not_overlap():
    bins = np.zeros(2000)
    bins[100] = 1.0
    bins[500] = 3.0
    w = received_waveform(ImpulseResponse(bins), Emitter((0, 0, 3)), Detector((0, 0, 3)))
    nz = np.flatnonzero(w.samples)
    assert nz.size == 40
    assert set(w.samples[nz]) == {K.RESPONSIVITY * 1.0, K.RESPONSIVITY * 3.0}


def test_pulse_width_must_be_whole_bins():
    with pytest.raises(ChannelError):
        received_waveform(ImpulseResponse(np.zeros(100)), Emitter((0, 0, 3), pulse_width=2.005e-9),
                          Detector((0, 0, 3)))


def test_noise_statistics_and_determinism():
    det = Detector((0, 0, 3))
    w = Waveform(np.zeros(1_000_000))
    n = add_noise(w, det, 500e6, seed=1)
    assert noise_sigma(det) == pytest.approx(55.9e-9, rel=1e-3)
    assert n.samples.std() == pytest.approx(55.9e-9, rel=0.01)
    assert np.array_equal(n.samples, add_noise(w, det, 500e6, seed=1).samples)
    quiet = add_noise(Waveform(np.ones(10)), Detector((0, 0, 3), noise_density=0.0), seed=1)
    assert np.array_equal(quiet.samples, np.ones(10))
    with pytest.raises(ChannelError):
        add_noise(w, det, 0.0)


def test_slot_energies():
    agg, blocks = slot_energies(Waveform(np.ones(60)))
    assert agg.tolist() == [20, 20, 20]
    assert blocks.shape == (3, 20)
    x = np.zeros(60)
    x[45] = -2.0
    agg, _ = slot_energies(Waveform(x))
    assert agg.tolist() == [0, 0, 2]
    with pytest.raises(ChannelError):
        slot_energies(Waveform(np.ones(61)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31))
def test_slot_energies_match_resummation(n, seed):
    x = np.random.default_rng(seed).normal(size=20 * n)
    agg, _ = slot_energies(Waveform(x))
    brute = [sum(abs(v) for v in x[20 * k:20 * k + 20]) for k in range(n)]
    assert np.allclose(agg, brute, rtol=1e-12)


def test_renderer_matches_direct_impulse_response():
    s = build_scene(default_config())
    t = Target(0, (2.0, 3.4), 0.7)
    tx = Emitter((1.0, 3.0, 3.0))
    dets = [Detector((1.0, 3.0, 3.0)), Detector((3.0, 3.0, 3.0))]
    r = LinkRenderer(s, tx, dets)
    for det, ir in zip(dets, r.render([t])):
        direct = impulse_response(s.with_targets([t]), tx, det)
        assert np.allclose(ir.bins, direct.bins, rtol=1e-9, atol=1e-18)


def test_patch_size_halving_keeps_peak_slot():
    from lidalsim.lidal import MimoLidal

    t = Target(0, (1.3, 1.2), 0.7)
    peaks = []
    for ps in (0.1, 0.05):
        s = build_scene({**default_config(), "patch_size": ps})
        sysm = MimoLidal(s)
        snap = sysm.scan([t], 0, 0)
        peaks.append(int(np.argmax(snap.labels)))
    assert peaks[0] == peaks[1]


@settings(max_examples=8, deadline=None)
@given(st.floats(0.3, 3.7), st.floats(0.3, 7.7), st.floats(0.0, 1.0))
def test_passivity_random_target(x, y, rho):
    room = Room(rho_walls=1.0, rho_floor=1.0, rho_ceiling=1.0)
    try:
        s = Scene(room, (), (Target(0, (x, y), rho),), patch_size=0.25)
    except ValueError:
        return
    tx = Emitter((2.0, 4.0, 3.0))
    rx = Detector((2.0, 4.0, 3.0), area=1.0, optics=CPC(89.0, 1.0))
    assert impulse_response(s, tx, rx).energy(tx.pulse_width) <= tx.optical_power * tx.pulse_width
