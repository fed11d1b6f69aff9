import math

import mpmath as mp
import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import hankel1

from lapkit.grid import Field, GridSpec, apply_multiplier, from_radial, gaussian, plane_wave, radius, \
    resolvent_symbol, to_frequency
from lapkit.special import (BranchCutError, KernelParams, SingularityError, bessel_k,
                            evaluate_ghat_on_sphere, free_kernel, herglotz_radial, herglotz_wave,
                            interior_mask, kernel_bound_constants, radial_kernel, sampled_kernel_offsets,
                            sphere_quadrature)
from lapkit.grid import fd_laplacian, linear_convolve


def test_bessel_half_integer():
    assert abs(bessel_k(0.5, 1.0) - math.sqrt(math.pi / 2) * math.exp(-1)) < 1e-15


def test_bessel_k0_integral_oracle():
    # the integrand is below 1e-300 past t = 7, and underflows to zero past t = 8
    ref, _ = quad(lambda t: math.exp(-math.cosh(t)), 0, 8, epsabs=0, epsrel=1e-13, limit=200)
    assert abs(bessel_k(0.0, 1.0) - ref) / ref < 1e-10


def test_bessel_against_mpmath():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(400):
        nu = rng.uniform(0, 5)
        mod = 10 ** rng.uniform(-3, 3)
        arg = rng.uniform(-0.95, 0.95) * math.pi
        w = mod * complex(math.cos(arg), math.sin(arg))
        ref = complex(mp.besselk(nu, w))
        if not 1e-290 < abs(ref) < 1e290:
            continue                         # subnormal or overflowing double, no relative digits left
        worst = max(worst, abs(bessel_k(nu, w) - ref) / abs(ref))
    assert worst < 1e-10


@pytest.mark.parametrize("mod", [6.0, 8.0, 10.0, 19.0, 21.0])
def test_bessel_crossover_band(mod):
    # both sides of every regime switch agree with the oracle
    for arg in (0.0, 1.0, 2.5, -2.9):
        for nu in (0.0, 0.5, 1.7):
            w = mod * complex(math.cos(arg), math.sin(arg))
            ref = complex(mp.besselk(nu, w))
            assert abs(bessel_k(nu, w) - ref) / abs(ref) < 1e-10


def test_bessel_reflection_and_recurrence():
    rng = np.random.default_rng(1)
    for _ in range(100):
        nu = rng.uniform(1, 4)
        w = complex(rng.uniform(0.1, 20), rng.uniform(-20, 20))
        assert abs(bessel_k(nu, w.conjugate()) - np.conj(bessel_k(nu, w))) <= 1e-13 * abs(bessel_k(nu, w))
        lhs = bessel_k(nu + 1, w)
        rhs = bessel_k(nu - 1, w) + 2 * nu / w * bessel_k(nu, w)
        assert abs(lhs - rhs) <= 1e-9 * abs(lhs)


def test_bessel_errors():
    with pytest.raises(SingularityError):
        bessel_k(0.0, 0.0)
    with pytest.raises(BranchCutError):
        bessel_k(0.0, -1.0)


def test_kernel_d3_examples():
    v = radial_kernel(np.array([1.0]), KernelParams(1.0, 3, side="+"))[0]
    assert abs(v - complex(math.cos(1), math.sin(1)) / (4 * math.pi)) < 1e-14
    assert abs(v - complex(0.042996, 0.066962)) < 1e-6
    r = np.linspace(0.1, 5, 40)
    yuk = radial_kernel(r, KernelParams(-1.0, 3))
    assert np.all(np.abs(yuk.imag) < 1e-15) and np.all(yuk.real > 0)
    assert np.allclose(yuk.real, np.exp(-r) / (4 * math.pi * r), rtol=1e-12)
    with pytest.raises(ValueError):
        KernelParams(1.0, 3)                 # boundary value needs a side


def _root(z, side):
    k = np.sqrt(complex(z))
    if complex(z).imag == 0 and complex(z).real > 0:
        return k if side == "+" else -k
    return k if k.imag > 0 else -k


def test_kernel_d3_closed_form_band():
    r = np.linspace(0.1, 5, 50)
    for z in (0.5, 1.0, 2.0, 1.2 - 0.5j, 1.5j, -0.7):
        for side in ("+", "-"):
            k = _root(z, side)
            ref = np.exp(1j * k * r) / (4 * math.pi * r)
            got = radial_kernel(r, KernelParams(z, 3, side))
            assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-9


def test_kernel_d2_hankel_boundary_value():
    r = np.linspace(0.1, 5, 50)
    for lam in (0.5, 1.0, 2.0):
        got = radial_kernel(r, KernelParams(lam, 2, "+"))
        ref = 0.25j * hankel1(0, math.sqrt(lam) * r)
        assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-9
        minus = radial_kernel(r, KernelParams(lam, 2, "-"))
        assert np.allclose(minus, np.conj(got), rtol=1e-12)


def test_kernel_d2_oscillatory_quadrature_oracle():
    z = mp.mpc(1, 0.5)
    for r in (0.5, 2.0):
        f = lambda p: mp.besselj(0, p * r) * p / (p * p - z)
        ref = complex(mp.quadosc(f, [0, mp.inf], omega=r) / (2 * mp.pi))
        got = radial_kernel(np.array([r]), KernelParams(complex(1, 0.5), 2))[0]
        assert abs(got - ref) / abs(ref) < 1e-6


def test_kernel_radial_symmetry_and_origin():
    p = KernelParams(0.8 + 0.1j, 3)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    e1 = np.zeros_like(x)
    e1[:, 0] = np.linalg.norm(x, axis=1)
    assert np.array_equal(free_kernel(x, p), free_kernel(e1, p))
    with pytest.raises(SingularityError):
        free_kernel(np.zeros((1, 3)), p)


def test_kernel_bound_constants_finite():
    for d in (2, 3):
        c = kernel_bound_constants(d, 0.5, n_z=8, n_r=30)
        assert math.isfinite(c["constant"]) and c["constant"] > 0


def test_kernel_matches_grid_resolvent():
    # direct-sum convolution with the continuum kernel against the periodic multiplier
    s = GridSpec(3, 48, 24.0)
    z = 1.0 + 0.5j
    g = from_radial(s, lambda r: np.exp(-r ** 2))
    grid = apply_multiplier(g, resolvent_symbol(z)).values
    direct = linear_convolve(g.values, sampled_kernel_offsets(s, KernelParams(z, 3)), s)
    core = radius(s) <= 4
    err = np.max(np.abs(direct[core] - grid[core])) / np.max(np.abs(grid))
    assert err < 5e-2


def test_sphere_quadrature_measure():
    for lam in (0.3, 1.0, 2.5):
        q2 = sphere_quadrature(lam, 2, 17)
        q3 = sphere_quadrature(lam, 3, 9)
        assert abs(q2.weights.sum() - 2 * math.pi * math.sqrt(lam)) < 1e-12
        assert abs(q3.weights.sum() - 4 * math.pi * lam) < 1e-10
        assert np.allclose(np.linalg.norm(q3.nodes, axis=1), math.sqrt(lam))
    with pytest.raises(ValueError):
        sphere_quadrature(0.0, 2)


def test_gaussian_restriction_integral():
    # unitary transform-free convention: g-hat = h^d sum g e^{-ix.xi}; for exp(-|x|^2),
    # g-hat(xi) = pi^{d/2} exp(-|xi|^2/4)
    for d, n, box in ((2, 64, 16.0), (3, 32, 12.0)):
        s = GridSpec(d, n, box)
        g = gaussian(s, 1.0)
        lam = 1.3
        qd = sphere_quadrature(lam, d, 24)
        val = qd.integrate(np.abs(evaluate_ghat_on_sphere(g, qd)) ** 2).real
        area = 2 * math.pi * math.sqrt(lam) if d == 2 else 4 * math.pi * lam
        ref = area * math.pi ** d * math.exp(-lam / 2)
        assert abs(val - ref) / ref < 1e-8


def test_ghat_examples():
    s = GridSpec(2, 48, 16.0)
    delta = np.zeros(s.shape)
    delta[s.origin_index] = 1.0 / s.cell_volume
    qd = sphere_quadrature(1.0, 2, 16)
    vals = evaluate_ghat_on_sphere(Field(s, delta), qd)
    assert np.max(np.abs(vals - 1)) < 1e-12
    even = gaussian(s, 1.3)
    assert np.max(np.abs(evaluate_ghat_on_sphere(even, qd).imag)) < 1e-10
    pw = plane_wave(s, (2, 1))
    xi = 2 * math.pi / s.box * np.array([[2.0, 1.0]])
    q = type(qd)(1.0, 2, xi, np.ones(1))
    direct = evaluate_ghat_on_sphere(pw, q)[0]
    F = to_frequency(pw).values
    assert abs(abs(direct) - s.box ** 2) < 1e-9
    assert abs(np.max(np.abs(F)) * s.cell_volume * s.n - abs(direct)) < 1e-9


def test_herglotz_examples():
    s3 = GridSpec(3, 32, 16.0)
    u = herglotz_wave(s3, 1.0)
    assert abs(u.values[s3.origin_index] - 4 * math.pi) < 1e-10
    ref = herglotz_radial(radius(s3), 1.0, 3)
    assert np.max(np.abs(u.values - ref)) < 1e-8
    s2 = GridSpec(2, 256, 64.0)
    u2 = herglotz_wave(s2, 1.0)
    assert abs(u2.values[s2.origin_index] - 2 * math.pi) < 1e-10
    assert np.max(np.abs(u2.values - herglotz_radial(radius(s2), 1.0, 2))) < 1e-8
    lap = fd_laplacian(u2).values
    m = interior_mask(s2, 0.1, pad=8)
    resid = np.linalg.norm((lap + u2.values)[m]) / np.linalg.norm(u2.values[m])
    assert resid < 1e-8
