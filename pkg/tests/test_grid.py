import math
import pickle

import numpy as np
import pytest

from lapkit.grid import (FREQUENCY, Field, GridError, GridSpec, RepresentationError, SingularSymbolError,
                         apply_multiplier, field_from_bytes, field_to_bytes, from_radial, gaussian,
                         helmholtz_symbol, load_field, lp_norm, pairing, plane_wave, radius,
                         resolvent_symbol, save_field, sobolev_symbol, to_frequency, to_physical,
                         xi_squared)


def rand_field(spec, seed=0):
    rng = np.random.default_rng(seed)
    return Field(spec, rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape))


def test_gridspec_validation():
    with pytest.raises(GridError):
        GridSpec(4, 16, 1.0)
    with pytest.raises(GridError):
        GridSpec(2, 14, 1.0)
    with pytest.raises(GridError):
        GridSpec(2, 16, -1.0)
    s = GridSpec(3, 48, 24)
    assert s.h == 0.5 and s.size == 48 ** 3


def test_field_is_immutable():
    f = rand_field(GridSpec(2, 8, 4.0))
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0
    with pytest.raises(AttributeError):
        f.spec = None


def test_constant_field_goes_to_dc():
    s = GridSpec(2, 16, 8.0)
    F = to_frequency(Field(s, np.ones(s.shape)))
    assert F.rep == FREQUENCY
    dc = F.values[0, 0]
    assert abs(dc - s.n ** (s.d / 2)) < 1e-12
    assert np.abs(F.values).sum() - abs(dc) < 1e-10


def test_round_trip_and_parseval():
    s = GridSpec(3, 16, 6.0)
    f = rand_field(s, 1)
    F = to_frequency(f)
    assert np.max(np.abs(to_physical(F).values - f.values)) < 1e-12
    freq_l2 = math.sqrt(np.sum(np.abs(F.values) ** 2) * s.cell_volume)
    assert abs(freq_l2 - lp_norm(f, 2)) / freq_l2 < 1e-12


def test_wrong_representation_rejected():
    s = GridSpec(2, 8, 4.0)
    f = rand_field(s)
    with pytest.raises(RepresentationError):
        to_physical(f)
    with pytest.raises(RepresentationError):
        to_frequency(to_frequency(f))


def test_plane_wave_single_coefficient():
    s = GridSpec(2, 16, 2 * math.pi)
    F = to_frequency(plane_wave(s, (2, -3)))
    big = np.abs(F.values) > 1e-9
    assert big.sum() == 1


def test_sobolev_identities():
    s = GridSpec(2, 32, 10.0)
    f = rand_field(s, 2)
    assert np.allclose(apply_multiplier(f, sobolev_symbol(0)).values, f.values, atol=1e-13)
    back = apply_multiplier(apply_multiplier(f, sobolev_symbol(1.3)), sobolev_symbol(-1.3))
    assert np.max(np.abs(back.values - f.values)) < 1e-12
    pw = plane_wave(s, (1, 2))
    xi2 = (2 * math.pi / s.box) ** 2 * 5
    out = apply_multiplier(pw, sobolev_symbol(2))
    assert np.max(np.abs(out.values - (1 + xi2) * pw.values)) < 1e-11


def test_multiplier_composition_is_exact():
    s = GridSpec(2, 16, 5.0)
    f = rand_field(s, 3)
    m1, m2 = sobolev_symbol(0.7), resolvent_symbol(1 + 0.2j)
    a = apply_multiplier(apply_multiplier(f, m1), m2)
    b = apply_multiplier(f, m1 * m2)
    c = apply_multiplier(apply_multiplier(f, m2), m1)
    assert np.max(np.abs(a.values - b.values)) < 1e-13
    assert np.max(np.abs(a.values - c.values)) < 1e-13


def test_singular_symbol_raises():
    s = GridSpec(2, 16, 2 * math.pi)
    f = rand_field(s)
    with pytest.raises(SingularSymbolError):
        apply_multiplier(f, resolvent_symbol(1.0))       # |xi|^2 = 1 is a lattice value
    apply_multiplier(f, resolvent_symbol(1.0 + 1e-3j))


def test_helmholtz_inverts_resolvent():
    s = GridSpec(3, 16, 8.0)
    f = rand_field(s, 4)
    z = 0.9 + 0.05j
    g = apply_multiplier(apply_multiplier(f, resolvent_symbol(z)), helmholtz_symbol(z))
    assert np.max(np.abs(g.values - f.values)) < 1e-12


def test_pairing_properties():
    s = GridSpec(2, 16, 8.0)
    u, v, f = rand_field(s, 5), rand_field(s, 6), rand_field(s, 7)
    assert pairing(f, f).real >= 0 and abs(pairing(f, f).imag) < 1e-12
    assert abs(pairing(f, f).real - lp_norm(f, 2) ** 2) < 1e-9
    a, b = 0.3 - 1.2j, 2.0 + 0.5j
    assert abs(pairing(a * u + b * v, f) - (a * pairing(u, f) + b * pairing(v, f))) < 1e-10
    assert abs(pairing(f, a * u) - np.conj(a) * pairing(f, u)) < 1e-10
    lhs = pairing(apply_multiplier(u, sobolev_symbol(0.8)), apply_multiplier(f, sobolev_symbol(-0.8)))
    assert abs(lhs - pairing(u, f)) < 1e-10 * abs(pairing(u, f))
    with pytest.raises(GridError):
        pairing(u, rand_field(GridSpec(2, 8, 8.0)))


def test_lp_norm_examples():
    s = GridSpec(3, 64, 4.0)
    ball = from_radial(s, lambda r: (r <= 1).astype(float))
    assert abs(lp_norm(ball, 1) - 4 * math.pi / 3) < 0.1
    s2 = GridSpec(2, 16, 2 * math.pi)
    assert abs(lp_norm(plane_wave(s2, (1, 1)), np.inf) - 1) < 1e-12
    s3 = GridSpec(2, 64, 16.0)
    g = from_radial(s3, lambda r: np.exp(-r ** 2))
    assert abs(lp_norm(g, 2) - math.sqrt(math.pi / 2)) < 1e-6
    with pytest.raises(ValueError):
        lp_norm(g, 0.5)


def test_lapf1_round_trip(tmp_path):
    s = GridSpec(3, 8, 3.0)
    f = rand_field(s, 8)
    raw = field_to_bytes(f)
    assert raw[:5] == b"LAPF\x01"
    assert len(raw) == 5 + 4 + 4 + 8 + 1 + 16 * s.size
    back = field_from_bytes(raw)
    assert back.spec == s and np.array_equal(back.values, f.values)
    save_field(tmp_path / "f.lapf", to_frequency(f))
    g = load_field(tmp_path / "f.lapf")
    assert g.rep == FREQUENCY
    with pytest.raises(GridError):
        field_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(GridError):
        field_from_bytes(raw[:-3])


def test_coordinates_and_xi():
    s = GridSpec(2, 8, 4.0)
    r = radius(s)
    assert r[s.origin_index] == 0.0
    assert xi_squared(s)[0, 0] == 0.0
    g = gaussian(s, 1.0)
    assert abs(g.values[s.origin_index] - 1) < 1e-15


def test_field_pickle_round_trip():
    s = GridSpec(2, 8, 4.0)
    f = Field(s, np.arange(64) * (1 + 2j), FREQUENCY)
    g = pickle.loads(pickle.dumps(f))
    assert g.spec == s and g.rep == FREQUENCY
    assert np.array_equal(g.values, f.values) and not g.values.flags.writeable
