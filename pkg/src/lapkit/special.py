"""Special functions: complex Bessel K, the free Helmholtz kernel, sphere
quadrature and the Herglotz wave."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Field, GridSpec, PHYSICAL, axis_points, radius

# Taylor coefficients of 1/Gamma(1+x) about 0 (computed to 20 digits).
_RGAMMA = np.array([
    1.0, 0.57721566490153286061, -0.65587807152025388108, -0.042002635034095235529,
    0.1665386113822914895, -0.042197734555544336748, -0.0096219715278769735621,
    0.0072189432466630995424, -0.0011651675918590651121, -0.00021524167411495097282,
    0.00012805028238811618615, -0.000020134854780788238656, -1.2504934821426706573e-6,
    1.1330272319816958824e-6, -2.0563384169776071035e-7, 6.1160951044814158179e-9,
    5.0020076444692229301e-9, -1.1812745704870201446e-9, 1.0434267116911005105e-10,
    7.782263439905071254e-12, -3.6968056186422057082e-12, 5.100370287454475979e-13,
    -2.0583260535665067832e-14, -5.3481225394230179824e-15, 1.2267786282382607902e-15,
    -1.1812593016974587695e-16, 1.1866922547516003326e-18, 1.4123806553180317816e-18,
    -2.2987456844353702066e-19, 1.7144063219273374334e-20, 1.3373517304936931149e-22,
])

# Right half plane: Temme series for |w| <= SERIES_MAX, Steed's continued
# fraction up to ASYMPTOTIC_MIN, the asymptotic expansion beyond. The continued
# fraction diverges for Re w < 0, where the series is used up to LEFT_SERIES_MAX.
SERIES_MAX = 2.0
ASYMPTOTIC_MIN = 20.0
LEFT_SERIES_MAX = 12.0
_EPS = 1e-16
_MAX_ITER = 2000


class SingularityError(ValueError):
    """Evaluation at the singular point of a kernel or special function."""


class BranchCutError(ValueError):
    """Argument on the branch cut of a multivalued function."""


def _gam12(mu: float) -> tuple[float, float, float, float]:
    odd = _RGAMMA[1::2]
    even = _RGAMMA[0::2]
    gam1 = -float(np.polyval(odd[::-1], mu * mu))
    gam2 = float(np.polyval(even[::-1], mu * mu))
    return gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1


def _temme(mu: float, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """K_mu(w), K_{mu+1}(w) by Temme's series (small |w|), |mu| <= 1/2."""
    gam1, gam2, gampl, gammi = _gam12(mu)
    x2 = 0.5 * w
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < 1e-300 else pimu / math.sin(pimu)
    d = -np.log(x2)
    e = mu * d
    small = np.abs(e) < 1e-8
    es = np.where(small, 1.0, e)
    fact2 = np.where(small, 1.0 + e * e / 6.0, np.sinh(es) / es)
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee / gampl
    q = 0.5 / (ee * gammi)
    c = np.ones_like(w)
    dd = x2 * x2
    total1 = p.copy()
    mu2 = mu * mu
    for i in range(1, _MAX_ITER):
        ff = (i * ff + p + q) / (i * i - mu2)
        c = c * dd / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total = total + delta
        total1 = total1 + c * (p - i * ff)
        if np.all(np.abs(delta) <= _EPS * np.abs(total)):
            break
    return total, total1 * 2.0 / w


def _steed(mu: float, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """K_mu(w), K_{mu+1}(w) by Steed's continued fraction, |w| >= 2."""
    mu2 = mu * mu
    b = 2.0 * (1.0 + w)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(w)
    q2 = np.ones_like(w)
    a1 = 0.25 - mu2
    q = np.full_like(w, a1)
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAX_ITER):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        if np.all(np.abs(dels) <= _EPS * np.abs(s)):
            break
    h = a1 * h
    kmu = np.sqrt(np.pi / (2.0 * w)) * np.exp(-w) / s
    k1 = kmu * (mu + w + 0.5 - h) / w
    return kmu, k1


def _asymptotic(nu: float, w: np.ndarray) -> np.ndarray:
    """Large-|w| expansion sqrt(pi/2w) e^-w sum a_k(nu) w^-k."""
    four_nu2 = 4.0 * nu * nu
    term = np.ones_like(w)
    total = np.ones_like(w)
    prev = np.full(w.shape, np.inf)
    for k in range(1, 60):
        term = term * (four_nu2 - (2 * k - 1) ** 2) / (k * 8.0 * w)
        mag = np.abs(term)
        # stop at the smallest term (optimal truncation) or at convergence
        grow = mag > prev
        term = np.where(grow, 0.0, term)
        total = total + term
        prev = np.where(grow, 0.0, mag)
        if np.all(mag <= _EPS * np.abs(total)) or np.all(term == 0):
            break
    return np.sqrt(np.pi / (2.0 * w)) * np.exp(-w) * total


def bessel_k(nu: float, w) -> np.ndarray | complex:
    """Modified Bessel function of the second kind K_nu(w), complex w.

    Real order 0 <= |nu| <= 5 (K_{-nu} = K_nu), |arg w| < pi. For Re w >= 0:
    Temme series for |w| <= 2, Steed's continued fraction for 2 < |w| < 20 and
    the asymptotic expansion beyond (for Re w < 0 the series runs to |w| = 12).
    Orders above 1/2 by upward recurrence. Evaluated in the
    closed upper half plane and reflected, so K_nu(conj w) = conj K_nu(w)
    holds exactly.
    """
    nu = abs(float(nu))
    scalar = np.ndim(w) == 0
    w = np.atleast_1d(np.asarray(w, dtype=np.complex128))
    if np.any(w == 0):
        raise SingularityError("K_nu is singular at w = 0")
    if np.any((w.imag == 0) & (w.real < 0)):
        raise BranchCutError("K_nu: argument on the branch cut arg w = pi")
    if not np.all(np.isfinite(w)):
        raise ValueError("K_nu: non-finite argument")
    lower = w.imag < 0
    wu = np.where(lower, np.conj(w), w)
    out = np.empty_like(wu)
    nl = int(math.floor(nu + 0.5))
    mu = nu - nl
    aw = np.abs(wu)
    left = wu.real < 0
    big = np.where(left, aw > LEFT_SERIES_MAX, aw >= ASYMPTOTIC_MIN)
    series = np.where(left, aw <= LEFT_SERIES_MAX, aw <= SERIES_MAX)
    if np.any(big):
        out[big] = _asymptotic(nu, wu[big])
    for mask, kernel in ((series, _temme), (~series & ~big, _steed)):
        if not np.any(mask):
            continue
        ww = wu[mask]
        kmu, k1 = kernel(mu, ww)
        for i in range(1, nl + 1):
            kmu, k1 = k1, kmu + 2.0 * (mu + i) / ww * k1
        out[mask] = kmu
    out = np.where(wu.imag == 0, out.real + 0j, out)
    out = np.where(lower, np.conj(out), out)
    return complex(out[0]) if scalar else out


@dataclass(frozen=True)
class KernelParams:
    """Spectral parameter z for the kernel of (-Laplacian - z)^(-1) in R^d.

    ``side`` ('+' or '-') selects the boundary value z +- i0 when z is real
    and nonnegative; otherwise it is ignored.
    """

    z: complex
    d: int
    side: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "z", complex(self.z))
        if self.d not in (2, 3):
            raise ValueError("kernel dimension must be 2 or 3")
        if self.side not in (None, "+", "-"):
            raise ValueError("side must be '+', '-' or None")
        if self.z.imag == 0 and self.z.real >= 0 and self.side is None:
            raise ValueError("real nonnegative z needs a declared side")
        if self.z == 0:
            raise SingularityError("z = 0 is excluded")

    @property
    def upper(self) -> bool:
        """True when the kernel is evaluated directly (upper half plane)."""
        if self.z.imag != 0:
            return self.z.imag > 0
        return self.z.real < 0 or self.side == "+"

    @property
    def upper_root(self) -> complex:
        """Root with Im >= 0 of z (or of conj z on the lower side)."""
        zz = self.z if self.upper else self.z.conjugate()
        r = complex(np.sqrt(zz))
        return -r if r.imag < 0 else r

    @property
    def sqrt_z(self) -> complex:
        """Root of z with Im >= 0; -sqrt(lam) for the boundary value lam - i0."""
        r = self.upper_root
        return r if self.upper else -r.conjugate()

    @property
    def nu(self) -> float:
        return (self.d - 2) / 2.0


def radial_kernel(r, params: KernelParams) -> np.ndarray | complex:
    """R_z(r) = (2 pi)^(-d/2) (k/r)^nu K_nu(k r), k = -i sqrt(z), nu = (d-2)/2.

    This is the inverse Fourier transform of (|xi|^2 - z)^(-1) under the
    unitary convention, e.g. e^{i sqrt(z) r}/(4 pi r) in three dimensions.
    """
    scalar = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r <= 0):
        raise SingularityError("the free kernel is singular at x = 0")
    upper = params.upper
    k = -1j * params.upper_root
    nu = params.nu
    d = params.d
    val = (2 * math.pi) ** (-d / 2) * bessel_k(nu, k * r)
    if nu != 0:
        val = val * (k / r) ** nu
    if not upper:
        val = np.conj(val)
    return complex(val[0]) if scalar else val


def free_kernel(x, params: KernelParams):
    """Free resolvent kernel at points ``x`` (array of shape (..., d))."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.d:
        raise ValueError("points must have d components")
    return radial_kernel(np.linalg.norm(x, axis=-1), params)


def kernel_bound_constants(d: int, delta: float, n_z: int = 24, n_r: int = 80) -> dict:
    """Measure the kernel magnitude constants on a (z, r) sample grid.

    Far field |R_z| r^{(d-1)/2} for r >= 1; near field |R_z| r^{d-2} (d=3) or
    |R_z| / log(2/r) (d=2) for r <= 1; |z| in [delta, 1/delta], Im z >= 0.
    """
    mags = np.geomspace(delta, 1.0 / delta, n_z)
    args = np.linspace(0.0, math.pi, 7)
    r_far = np.geomspace(1.0, 1e3, n_r)
    r_near = np.geomspace(1e-3, 1.0, n_r)
    far = near = 0.0
    for m in mags:
        for a in args:
            z = m * complex(math.cos(a), math.sin(a))
            if abs(z.imag) < 1e-14:
                z = complex(z.real, 0.0)
            p = KernelParams(z, d, side="+")
            kf = np.abs(radial_kernel(r_far, p))
            kn = np.abs(radial_kernel(r_near, p))
            far = max(far, float(np.max(kf * r_far ** ((d - 1) / 2))))
            ref = r_near ** (-(d - 2)) if d == 3 else np.log(2.0 / r_near)
            near = max(near, float(np.max(kn / ref)))
    return {"d": d, "delta": delta, "far_constant": far, "near_constant": near,
            "constant": max(far, near)}


# Cell integrals of the singular kernels over the unit cell [-1/2, 1/2]^d.
CUBE_INVERSE_RADIUS = 2.38007736397955350664   # int 1/|x|
SQUARE_LOG_RADIUS = -1.06117542688252434509    # int log|x|
EULER_GAMMA = 0.57721566490153286061


def origin_cell_value(spec: GridSpec, params: KernelParams) -> complex:
    """Cell-averaged kernel on the origin cell, for Riemann-sum convolution."""
    h = spec.h
    k = -1j * params.upper_root
    if spec.d == 3:
        v = CUBE_INVERSE_RADIUS / (4 * math.pi * h) - k / (4 * math.pi)
    else:
        v = (-math.log(h) - SQUARE_LOG_RADIUS - np.log(k / 2.0) - EULER_GAMMA) / (2 * math.pi)
    v = complex(v)
    return v if params.upper else v.conjugate()


def sampled_kernel_offsets(spec: GridSpec, params: KernelParams) -> np.ndarray:
    """Kernel on the doubled offset lattice (see grid.linear_convolve)."""
    from .grid import offset_radius

    r = offset_radius(spec)
    out = np.empty(r.shape, dtype=np.complex128)
    nz = r > 0
    out[nz] = radial_kernel(r[nz], params)
    out[~nz] = origin_cell_value(spec, params)
    return out


@dataclass(frozen=True, eq=False)
class SphereQuadrature:
    """Nodes and positive weights on the sphere of radius sqrt(lam) in R^d."""

    lam: float
    d: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def radius(self) -> float:
        return math.sqrt(self.lam)

    def integrate(self, values) -> complex:
        return complex(np.sum(self.weights * np.asarray(values)))


def sphere_quadrature(lam: float, d: int, resolution: int = 32) -> SphereQuadrature:
    """Trapezoid rule on the circle (d=2) or Gauss-Legendre x trapezoid (d=3)."""
    if not lam > 0:
        raise ValueError("sphere quadrature needs lam > 0")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    k = math.sqrt(lam)
    if d == 2:
        m = resolution
        phi = 2 * math.pi * np.arange(m) / m
        nodes = k * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        weights = np.full(m, 2 * math.pi * k / m)
    elif d == 3:
        ct, wt = np.polynomial.legendre.leggauss(resolution)
        mphi = 2 * resolution
        phi = 2 * math.pi * np.arange(mphi) / mphi
        st = np.sqrt(1.0 - ct**2)
        nodes = k * np.stack([
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.repeat(ct, mphi),
        ], axis=-1)
        weights = np.repeat(wt, mphi) * (2 * math.pi / mphi) * lam
    else:
        raise ValueError("sphere quadrature supports d = 2, 3")
    return SphereQuadrature(float(lam), d, nodes, weights)


def _separable_sum(values: np.ndarray, spec: GridSpec, nodes: np.ndarray, sign: float) -> np.ndarray:
    """sum_x values(x) exp(sign i x.xi_m) for every node xi_m, via axis contractions."""
    x = axis_points(spec)
    mats = [np.exp(sign * 1j * np.outer(x, nodes[:, a])) for a in range(spec.d)]
    n = spec.n
    acc = values.reshape(-1, n) @ mats[-1]            # (n^{d-1}, M)
    if spec.d == 3:
        acc = np.einsum("jm,ijm->im", mats[1], acc.reshape(n, n, -1))
    return np.einsum("im,im->m", mats[0], acc)


def evaluate_ghat_on_sphere(g: Field, quad: SphereQuadrature, chunk: int = 4096) -> np.ndarray:
    """g-hat(xi) = h^d sum_x g(x) exp(-i x.xi) at the quadrature nodes."""
    if g.rep != PHYSICAL:
        raise ValueError("evaluate_ghat_on_sphere expects a physical field")
    if quad.d != g.spec.d:
        raise ValueError("quadrature and grid dimension differ")
    out = np.empty(len(quad.weights), dtype=np.complex128)
    for s in range(0, len(out), chunk):
        out[s:s + chunk] = _separable_sum(g.values, g.spec, quad.nodes[s:s + chunk], -1.0)
    return out * g.spec.cell_volume


def herglotz_resolution(spec: GridSpec, lam: float) -> int:
    # trapezoid error ~ J_m(k r_max) needs m > e k r_max / 2; Gauss-Legendre
    # of degree m integrates polynomials of degree 2m - 1 exactly
    kr = math.sqrt(spec.d) * spec.box / 2 * math.sqrt(lam)
    if spec.d == 2:
        return int(math.ceil(1.4 * kr)) + 30
    return int(math.ceil(kr)) + 20


def herglotz_wave(spec: GridSpec, lam: float, resolution: int | None = None) -> Field:
    """u(x) = integral over the sphere |xi| = sqrt(lam) of exp(-i x.xi) d sigma."""
    if not lam > 0:
        raise ValueError("herglotz_wave needs lam > 0")
    res = herglotz_resolution(spec, lam) if resolution is None else resolution
    quad = sphere_quadrature(lam, spec.d, res)
    x = axis_points(spec)
    mats = [np.exp(-1j * np.outer(x, quad.nodes[:, a])) for a in range(spec.d)]
    w = quad.weights
    if spec.d == 2:
        u = (mats[0] * w) @ mats[1].T
    else:
        n = spec.n
        u = np.empty(spec.shape, dtype=np.complex128)
        last = mats[2].T
        for i in range(n):
            u[i] = (mats[1] * (mats[0][i] * w)) @ last
    return Field(spec, u)


def herglotz_radial(r, lam: float, d: int) -> np.ndarray:
    """Closed form of the spherical mean: 2 pi k J_0(k r) (d=2), 4 pi k sin(kr)/r (d=3)."""
    from scipy.special import j0

    k = math.sqrt(lam)
    r = np.asarray(r, dtype=float)
    if d == 2:
        return 2 * math.pi * k * j0(k * r)
    return 4 * math.pi * lam * np.sinc(k * r / math.pi)


def interior_mask(spec: GridSpec, fraction: float = 0.1, pad: int = 0) -> np.ndarray:
    """Boolean mask excluding the outer ``fraction`` of the box and ``pad`` cells."""
    x = axis_points(spec)
    lim = (0.5 - fraction) * spec.box - pad * spec.h
    ok = np.abs(x) <= lim
    m = ok
    for _ in range(spec.d - 1):
        m = np.multiply.outer(m, ok)
    return m


def radius_mask(spec: GridSpec, rmax: float) -> np.ndarray:
    return radius(spec) <= rmax
