"""Independent reference computations shared by the test modules."""

import math

from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import spherical_jn, spherical_kn


def well_ground_state(V0, R=1.0):
    """Lowest s-wave energy of -Lap - V0 1_{|x|<=R} in R^3, or None if unbound.

    Matching sin(kr)/r to exp(-kappa r)/r at r = R gives k cot(kR) = -kappa
    with k^2 + kappa^2 = V0.
    """
    if V0 * R * R <= (math.pi / 2) ** 2:
        return None

    def mismatch(kappa):
        k = math.sqrt(V0 - kappa * kappa)
        return k * math.cos(k * R) + kappa * math.sin(k * R)

    top = math.sqrt(V0)
    kappa = brentq(mismatch, 1e-12, top * (1 - 1e-12), xtol=1e-14)
    return -kappa * kappa


def well_p_state(V0, R=1.0):
    """Lowest l = 1 energy of the same well, or None if unbound.

    Inside j_1(kr), outside the decaying k_1(kappa r); the logarithmic
    derivatives agree at r = R.
    """
    if V0 * R * R <= math.pi ** 2:
        return None

    def mismatch(kappa):
        k = math.sqrt(V0 - kappa * kappa)
        inner = k * spherical_jn(1, k * R, derivative=True) / spherical_jn(1, k * R)
        outer = kappa * spherical_kn(1, kappa * R, derivative=True) / spherical_kn(1, kappa * R)
        return inner - outer

    # the lowest l = 1 state has k R between pi and the first zero of j_1
    z1 = 4.493409457909064
    lo = math.sqrt(max(V0 - (z1 / R) ** 2, 0.0)) + 1e-9
    hi = math.sqrt(V0 - (math.pi / R) ** 2) * (1 - 1e-12)
    return -brentq(mismatch, lo, hi, xtol=1e-14) ** 2


def gaussian_trace_d2(lam, eps=1e-7):
    """Im <R0(lam + i eps) g, g> for g = exp(-|x|^2) in d = 2, by 1-D radial quadrature.

    The transform gives |g-hat|^2 = exp(-rho^2/2)/4 in the unitary convention,
    and Im 1/(rho^2 - lam - i eps) tends to pi delta(rho^2 - lam).
    """
    k = math.sqrt(lam)
    f = lambda rho: 2 * math.pi * rho * 0.25 * math.exp(-rho ** 2 / 2) * eps / ((rho ** 2 - lam) ** 2 + eps ** 2)
    pts = [k - 1e-4, k - 1e-6, k, k + 1e-6, k + 1e-4]
    return sum(quad(f, a, b, limit=400, epsabs=0, epsrel=1e-10)[0]
               for a, b in zip([0.0] + pts, pts + [12.0]))
