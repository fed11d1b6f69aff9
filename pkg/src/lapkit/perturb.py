"""Perturbations L (potentials and first-order terms), the weight mu_{N,gamma},
local maximal functions, Kato-type convolutions and admissibility functionals."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import fft as _sfft

from .grid import (Field, GridSpec, PHYSICAL, RepresentationError, coordinates,
                   frequencies, radius, smooth_step)
from .spaces import (ShellDecomposition, restriction_exponent, shell_l2, shell_sup,
                     shells, x_norm_upper, x_star_norm)

KATO_DELTAS = tuple(2.0 ** -k for k in range(1, 7))


class NotAdmissibleError(ValueError):
    """The perturbation failed every admissibility criterion."""


class DegenerateWeightError(ValueError):
    """The omega weight cannot be built (e.g. a vanishes identically)."""


def default_q0(d: int) -> float:
    """Local exponent: d/2 for d = 3, 9/8 for d = 2."""
    return d / 2.0 if d >= 3 else 9.0 / 8.0


# ---------------------------------------------------------------- weight

@dataclass(frozen=True)
class WeightParams:
    N: float
    gamma: float

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("weight exponent N must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("weight parameter gamma must lie in (0, 1]")


def weight_radial(r, params: WeightParams) -> np.ndarray:
    """mu(r) = ((1 + r^2) / (1 + gamma r^2))^N."""
    r2 = np.asarray(r, dtype=float) ** 2
    return ((1.0 + r2) / (1.0 + params.gamma * r2)) ** params.N


def weight_eval(x, params: WeightParams):
    """mu_{N,gamma} at points x (array (..., d)) or on the samples of a Field."""
    if isinstance(x, Field):
        return Field(x.spec, weight_radial(radius(x.spec), params))
    if isinstance(x, GridSpec):
        return weight_radial(radius(x), params)
    x = np.asarray(x, dtype=float)
    return weight_radial(np.linalg.norm(x, axis=-1), params)


def weight_log_derivatives(x, params: WeightParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(b_j, b, b~) with d_j mu = mu b_j, Lap mu = mu b, Lap mu^-1 = mu^-1 b~.

    ``x`` has shape (..., d); b_j is returned with the same shape.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    N, g = params.N, params.gamma
    r2 = np.sum(x * x, axis=-1)
    p = 1.0 + r2
    q = 1.0 + g * r2
    grad = N * (2.0 * x / p[..., None] - 2.0 * g * x / q[..., None])
    lap = N * ((2 * d / p - 4 * r2 / p**2) - (2 * d * g / q - 4 * g * g * r2 / q**2))
    g2 = np.sum(grad * grad, axis=-1)
    return grad, lap + g2, -lap + g2


def weight_bound_check(params: WeightParams, d: int, samples: int = 10000,
                       rmax: float = 1e3, seed: int = 0) -> dict:
    """Sample sup of sum|b_j|(1+|x|^2)^{1/2} + (|b| + |b~|)(1+|x|^2)."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = np.concatenate([[0.0], np.geomspace(1e-3, rmax, samples - 1)])
    x = dirs * r[:, None]
    bj, b, bt = weight_log_derivatives(x, params)
    s = 1.0 + r * r
    lhs = np.sum(np.abs(bj), axis=-1) * np.sqrt(s) + (np.abs(b) + np.abs(bt)) * s
    return {"N": params.N, "gamma": params.gamma, "sup": float(lhs.max())}


def weight_ratio_constant(N: float, d: int, samples: int = 10000, gammas: Sequence[float] | None = None,
                          seed: int = 0) -> dict:
    """Sampled sup of (mu(x)/mu(y) + mu(y)/mu(x)) / (1+|x-y|^2)^N over (x, y, gamma)."""
    rng = np.random.default_rng(seed)
    if gammas is None:
        gam = 10.0 ** rng.uniform(-6, 0, samples)
    else:
        gam = rng.choice(np.asarray(gammas, float), samples)
    scale = 10.0 ** rng.uniform(-1, 3, (samples, 1))
    x = rng.normal(size=(samples, d)) * scale
    y = rng.normal(size=(samples, d)) * 10.0 ** rng.uniform(-1, 3, (samples, 1))
    rx2 = np.sum(x * x, axis=1)
    ry2 = np.sum(y * y, axis=1)
    lmx = N * (np.log1p(rx2) - np.log1p(gam * rx2))
    lmy = N * (np.log1p(ry2) - np.log1p(gam * ry2))
    ratio = np.exp(lmx - lmy) + np.exp(lmy - lmx)
    bound = (1.0 + np.sum((x - y) ** 2, axis=1)) ** N
    vals = ratio / bound
    per_gamma = {}
    if gammas is not None:
        for gv in gammas:
            sel = gam == gv
            per_gamma[float(gv)] = float(vals[sel].max()) if np.any(sel) else 0.0
    return {"N": N, "constant": float(vals.max()), "per_gamma": per_gamma}


# ---------------------------------------------------- local convolutions

def _cell_integrals(spec: GridSpec, kernel: Callable[[np.ndarray], np.ndarray], reach: float,
                    sub: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Integrals of a radial kernel over the cells of offsets |m h| <= reach + cell diameter.

    Returns (offset index array (M, d), integrals (M,)), midpoint subsampled.
    """
    h = spec.h
    m = int(math.ceil(reach / h)) + 1
    rng = np.arange(-m, m + 1)
    grids = np.meshgrid(*([rng] * spec.d), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=-1)
    centre = np.linalg.norm(offs * h, axis=1)
    keep = centre <= reach + math.sqrt(spec.d) * h
    offs = offs[keep]
    t = (np.arange(sub) + 0.5) / sub - 0.5
    sg = np.meshgrid(*([t] * spec.d), indexing="ij")
    subpts = np.stack([g.ravel() for g in sg], axis=-1)
    pts = (offs[:, None, :] + subpts[None, :, :]) * h
    vals = kernel(np.linalg.norm(pts, axis=-1))
    return offs, vals.mean(axis=1) * h**spec.d


def _place(spec: GridSpec, offs: np.ndarray, w: np.ndarray) -> np.ndarray:
    K = np.zeros(spec.shape)
    idx = tuple((offs[:, a] % spec.n) for a in range(spec.d))
    np.add.at(K, idx, w)
    return K


@functools.lru_cache(maxsize=32)
def _ball_kernel_hat(spec: GridSpec) -> np.ndarray:
    rad = 0.5
    offs, w = _cell_integrals(spec, lambda r: (r <= rad).astype(float), rad)
    vol = math.pi / 6 if spec.d == 3 else math.pi / 4
    w = w * (vol / w.sum())
    return _sfft.fftn(_place(spec, offs, w))


def kato_kernel_total(d: int, delta: float) -> float:
    """Integral of K_{d,delta}: 2 pi delta^2 (d=3), pi delta^2 (log(1/delta) + 1/2) (d=2)."""
    if d == 3:
        return 2 * math.pi * delta**2
    return math.pi * delta**2 * (math.log(1.0 / delta) + 0.5)


@functools.lru_cache(maxsize=64)
def _kato_kernel_hat(spec: GridSpec, delta: float) -> np.ndarray:
    d = spec.d

    def k(r):
        with np.errstate(divide="ignore"):
            core = 1.0 / r if d == 3 else np.log(1.0 / r)
        return np.where((r <= delta) & (r > 0), core, 0.0)

    offs, w = _cell_integrals(spec, k, delta)
    origin = np.all(offs == 0, axis=1)
    # the origin cell carries the exact remainder of the analytic total
    w[origin] = 0.0
    w[origin] = kato_kernel_total(d, delta) - w.sum()
    return _sfft.fftn(_place(spec, offs, w))


def _convolve(values: np.ndarray, kernel_hat: np.ndarray) -> np.ndarray:
    """Convolution of nonnegative data with a nonnegative kernel.

    FFT round-off below the rounding level of the largest possible output is
    zeroed, so exact zeros survive the later q-th roots.
    """
    out = _sfft.ifftn(_sfft.fftn(values) * kernel_hat).real
    floor = 1e-13 * float(np.max(np.abs(values))) * abs(kernel_hat.flat[0])
    return np.where(out > floor, out, 0.0)


def _physical_values(f) -> tuple[GridSpec, np.ndarray]:
    if not isinstance(f, Field):
        raise TypeError("expected a Field")
    if f.rep != PHYSICAL:
        raise RepresentationError("expected a physical field")
    return f.spec, f.values


def maximal_mq(V: Field, q: float) -> Field:
    """M_q(V)(x) = (integral over |y| <= 1/2 of |V(x+y)|^q dy)^(1/q)."""
    if not q >= 1:
        raise ValueError("M_q needs q >= 1")
    spec, v = _physical_values(V)
    out = _convolve(np.abs(v) ** q, _ball_kernel_hat(spec)) ** (1.0 / q)
    return Field(spec, out)


def kato_convolve(V: Field, delta: float, power: float = 1.0) -> Field:
    """|V|^power * K_{d,delta}; K = 1_{|x|<=delta} |x|^{-1} (d=3) or log(1/|x|) (d=2)."""
    if not 0 < delta <= 0.5:
        raise ValueError("delta must lie in (0, 1/2]")
    spec, v = _physical_values(V)
    return Field(spec, _convolve(np.abs(v) ** power, _kato_kernel_hat(spec, float(delta))))


# ---------------------------------------------------------- functionals

def _shell_weights(sh: ShellDecomposition, power: float) -> np.ndarray:
    return 2.0 ** (power * np.arange(sh.count))


def complete_shells(spec: GridSpec) -> int:
    """Largest j with D_j entirely inside the box (2^j <= L/2)."""
    return max(0, int(math.floor(math.log2(spec.box / 2))))


@dataclass
class Criterion:
    """One admissibility functional with its shell profile and tail verdict."""

    name: str
    value: float
    contributions: list
    tail_ratio: float
    finite: bool
    extra: dict = field(default_factory=dict)


def _tail_verdict(contrib: np.ndarray, jc: int, tol: float = 0.9) -> tuple[float, bool]:
    """Convergence heuristic: the last complete shell's term is negligible or
    shrinks geometrically relative to its predecessor."""
    c = np.asarray(contrib, dtype=float)
    total = c.sum()
    if total == 0:
        return 0.0, True
    last = c[jc]
    prev = c[jc - 1] if jc >= 1 else 0.0
    ratio = last / prev if prev > 0 else (0.0 if last == 0 else np.inf)
    small = last <= 0.02 * total
    return float(ratio), bool(small or ratio <= tol)


def _criterion(name: str, contrib: np.ndarray, value: float, spec: GridSpec, **extra) -> Criterion:
    jc = min(complete_shells(spec), len(contrib) - 1)
    ratio, ok = _tail_verdict(contrib, jc)
    return Criterion(name, float(value), [float(c) for c in contrib], ratio,
                     bool(ok and np.isfinite(value)), extra)


def _lp_shell_contrib(values: np.ndarray, p: float, sh: ShellDecomposition) -> np.ndarray:
    """sum over D_j of |v|^p h^d per shell."""
    return np.bincount(sh.labels.reshape(-1), weights=np.abs(values.reshape(-1)) ** p,
                       minlength=sh.count) * sh.spec.cell_volume


def functional_n1(V: Field, q0: float | None = None) -> Criterion:
    """||M_{q0} V||_{L^{(d+1)/2}}."""
    spec = V.spec
    q0 = q0 or default_q0(spec.d)
    p = (spec.d + 1) / 2
    sh = shells(spec)
    c = _lp_shell_contrib(maximal_mq(V, q0).values, p, sh)
    return _criterion("N1", c, c.sum() ** (1 / p), spec, q0=q0, exponent=p)


def functional_n2(V: Field, q0: float | None = None) -> Criterion:
    """||M_{q0} V||_Y."""
    spec = V.spec
    q0 = q0 or default_q0(spec.d)
    sh = shells(spec)
    c = _shell_weights(sh, 1.0) * shell_sup(maximal_mq(V, q0), sh)
    return _criterion("N2", c, c.sum(), spec, q0=q0)


def kato_curve(V: Field, deltas: Sequence[float] = KATO_DELTAS, power: float = 1.0,
               root: float = 1.0) -> list[float]:
    sh = shells(V.spec)
    w = _shell_weights(sh, 1.0)
    out = []
    for dl in deltas:
        k = kato_convolve(V, dl, power).values.real ** root
        out.append(float(np.sum(w * shell_sup(k, sh))))
    return out


def _trend_to_zero(curve: Sequence[float]) -> bool:
    c = np.asarray(curve)
    if c[0] == 0:
        return True
    mono = bool(np.all(np.diff(c) <= 1e-12 * c[0]))
    return mono and c[-1] < 0.5 * c[0]


def functional_n3(V: Field, deltas: Sequence[float] = KATO_DELTAS) -> Criterion:
    """||(|V| * K_{d,1/2})||_Y with the delta-ladder trend."""
    spec = V.spec
    sh = shells(spec)
    c = _shell_weights(sh, 1.0) * shell_sup(kato_convolve(V, 0.5), sh)
    curve = kato_curve(V, deltas)
    crit = _criterion("N3", c, c.sum(), spec, deltas=list(deltas), curve=curve)
    crit.extra["trend_to_zero"] = _trend_to_zero(curve)
    crit.finite = bool(crit.finite and crit.extra["trend_to_zero"])
    return crit


def vector_n1(a: Field, q0: float | None = None) -> Criterion:
    """[sum_j (2^{j/2} ||M_{2 q0}(a)||_{L^{d+1}(D_j)})^{p_d}]^{1/p_d}."""
    spec = a.spec
    q0 = q0 or default_q0(spec.d)
    sh = shells(spec)
    pd = restriction_exponent(spec.d)
    base = _theta_base_lp(a, q0, sh)
    c = base**pd
    return _criterion("N1'", c, c.sum() ** (1 / pd), spec, q0=q0, exponent=pd)


def vector_n2(a: Field, q0: float | None = None) -> Criterion:
    spec = a.spec
    q0 = q0 or default_q0(spec.d)
    sh = shells(spec)
    c = _theta_base_y(a, q0, sh)
    return _criterion("N2'", c, c.sum(), spec, q0=q0)


def vector_n3(a: Field, deltas: Sequence[float] = KATO_DELTAS) -> Criterion:
    spec = a.spec
    sh = shells(spec)
    c = _theta_base_kato(a, sh)
    curve = kato_curve(a, deltas, power=2.0, root=0.5)
    crit = _criterion("N3'", c, c.sum(), spec, deltas=list(deltas), curve=curve)
    crit.extra["trend_to_zero"] = _trend_to_zero(curve)
    crit.finite = bool(crit.finite and crit.extra["trend_to_zero"])
    return crit


@dataclass
class AdmissibilityReport:
    kind: str
    criteria: dict
    passed: bool
    notes: list = field(default_factory=list)

    def value(self, name: str) -> float:
        return self.criteria[name].value

    def to_dict(self) -> dict:
        return {"kind": self.kind, "passed": self.passed, "notes": list(self.notes),
                "criteria": {k: asdict(v) for k, v in self.criteria.items()}}


def admissibility_check(P) -> AdmissibilityReport:
    """Evaluate the scalar (N1, N2, N3) or vector (N1', N2', N3') functionals."""
    if isinstance(P, ScalarPotential):
        crit = {c.name: c for c in (functional_n1(P.V, P.q0), functional_n2(P.V, P.q0),
                                    functional_n3(P.V))}
        return AdmissibilityReport("scalar", crit, any(c.finite for c in crit.values()))
    if isinstance(P, VectorPotential):
        crit = {c.name: c for c in (vector_n1(P.a, P.q0), vector_n2(P.a, P.q0), vector_n3(P.a))}
        return AdmissibilityReport(
            "first-order", crit, any(c.finite for c in crit.values()),
            ["summation exponent p(d) taken as p_d = (2d+2)/(d+3)"])
    raise TypeError(f"cannot check admissibility of {type(P).__name__}")


# ----------------------------------------------------------- omega weight

def _theta_base_lp(a: Field, q0: float, sh: ShellDecomposition) -> np.ndarray:
    m = maximal_mq(a, 2 * q0).values.real
    d = sh.spec.d
    lp = _lp_shell_contrib(m, d + 1, sh) ** (1.0 / (d + 1))
    return _shell_weights(sh, 0.5) * lp


def _theta_base_y(a: Field, q0: float, sh: ShellDecomposition) -> np.ndarray:
    return _shell_weights(sh, 1.0) * shell_sup(maximal_mq(a, 2 * q0), sh)


def _theta_base_kato(a: Field, sh: ShellDecomposition) -> np.ndarray:
    k = np.sqrt(kato_convolve(a, 0.5, power=2.0).values.real)
    return _shell_weights(sh, 1.0) * shell_sup(k, sh)


def smooth_sequence(base: np.ndarray) -> np.ndarray:
    """theta_j = sum_j' base_j' 2^{-|j - j'|}."""
    j = np.arange(len(base))
    return (2.0 ** -np.abs(j[:, None] - j[None, :])) @ np.asarray(base, float)


RECIPES = ("lp", "y", "kato")


@dataclass(frozen=True, eq=False)
class OmegaWeight:
    """omega = sum_j 2^{-j/2} omega_j 1_{D_j} built from theta_j."""

    recipe: str
    theta: np.ndarray
    omega: np.ndarray
    base: np.ndarray
    rhs: float

    def field_values(self, sh: ShellDecomposition) -> np.ndarray:
        per_shell = 2.0 ** (-0.5 * np.arange(sh.count)) * self.omega
        return per_shell[sh.labels]

    def comparability(self) -> tuple[float, float]:
        r = self.theta[1:] / self.theta[:-1]
        return float(r.min()), float(r.max())


def build_omega(a: Field, recipe: str = "lp", q0: float | None = None) -> OmegaWeight:
    """Construct the shell weight omega for a first-order coefficient a.

    recipe 'lp': theta from 2^{j/2}||M_{2q0} a||_{L^{d+1}(D_j)}, omega_j =
    theta_j^{(d+1)/(d+3)} / (sum theta^{p_d})^{(d-1)/(4(d+1))};
    'y': theta from 2^j ||M_{2q0} a||_{L^inf(D_j)}, omega_j = sqrt(theta_j);
    'kato': theta from 2^j ||(|a|^2 * K_{d,1/2})^{1/2}||_{L^inf(D_j)}, omega = sqrt(theta).
    ``rhs`` is the matching right-hand functional of the omega bounds.
    """
    spec = a.spec
    if not np.any(a.values):
        raise DegenerateWeightError("coefficient a vanishes identically")
    q0 = q0 or default_q0(spec.d)
    sh = shells(spec)
    d = spec.d
    if recipe == "lp":
        base = _theta_base_lp(a, q0, sh)
        theta = smooth_sequence(base)
        pd = restriction_exponent(d)
        omega = theta ** ((d + 1) / (d + 3)) / np.sum(theta**pd) ** ((d - 1) / (4 * (d + 1)))
        rhs = float(np.sum(base**pd) ** (1 / (2 * pd)))
    elif recipe == "y":
        base = _theta_base_y(a, q0, sh)
        theta = smooth_sequence(base)
        omega = np.sqrt(theta)
        rhs = float(np.sqrt(base.sum()))
    elif recipe == "kato":
        base = _theta_base_kato(a, sh)
        theta = smooth_sequence(base)
        omega = np.sqrt(theta)
        rhs = float(np.sqrt(base.sum()))
    else:
        raise ValueError(f"unknown omega recipe {recipe!r}; choose from {RECIPES}")
    if not np.all(omega > 0):
        raise DegenerateWeightError("omega weight has non-positive entries")
    return OmegaWeight(recipe, theta, omega, base, rhs)


# ------------------------------------------------------ perturbations

def _deriv(values: np.ndarray, spec: GridSpec, axis: int) -> np.ndarray:
    xi = frequencies(spec)[axis]
    return _sfft.ifftn(1j * xi * _sfft.fftn(values, norm="ortho"), norm="ortho")


class Perturbation:
    """Base class: a symmetric operator u -> Lu on grid fields."""

    kind = "abstract"
    spec: GridSpec

    def apply_array(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def factorization(self) -> list[tuple[Callable, Callable]]:
        raise NotImplementedError

    @property
    def multiplication(self) -> np.ndarray | None:
        """The real potential if L is a multiplication operator, else None."""
        return None

    @functools.cached_property
    def report(self) -> AdmissibilityReport:
        return admissibility_check(self)

    def support_radius(self) -> float:
        return math.inf


@dataclass(eq=False)
class ScalarPotential(Perturbation):
    """Multiplication by a real potential V."""

    V: Field
    q0: float | None = None
    name: str = "V"
    kind = "scalar"

    def __post_init__(self):
        if np.max(np.abs(self.V.values.imag)) > 0:
            raise ValueError("scalar potentials must be real")
        self.q0 = self.q0 or default_q0(self.V.spec.d)
        self._v = np.ascontiguousarray(self.V.values.real)

    @property
    def spec(self) -> GridSpec:
        return self.V.spec

    @property
    def multiplication(self) -> np.ndarray:
        return self._v

    def apply_array(self, v: np.ndarray) -> np.ndarray:
        return self._v * v

    def factorization(self):
        root = np.sqrt(np.abs(self._v))
        sroot = root * np.sign(self._v)
        return [(lambda u, r=root: r * u, lambda u, s=sroot: s * u)]

    def support_radius(self) -> float:
        r = radius(self.spec)
        nz = self._v != 0
        return float(r[nz].max()) if np.any(nz) else 0.0


@dataclass(eq=False)
class VectorPotential(Perturbation):
    """a d_k - d_k(conj(a) .) along one axis k (default the last)."""

    a: Field
    axis: int | None = None
    q0: float | None = None
    omega_recipe: str = "lp"
    name: str = "a"
    kind = "first-order"

    def __post_init__(self):
        spec = self.a.spec
        self.axis = spec.d - 1 if self.axis is None else int(self.axis)
        self.q0 = self.q0 or default_q0(spec.d)
        av = self.a.values
        self._a = np.ascontiguousarray(av)
        self._skew = av - np.conj(av)
        self._b = np.conj(av) - np.conj(av.reshape(-1)[0])

    @property
    def spec(self) -> GridSpec:
        return self.a.spec

    def apply_array(self, v: np.ndarray) -> np.ndarray:
        # a D v - D(conj(a) v) = (a - conj a) D v - (D(b v) - b D v), b = conj a - const
        spec, k = self.spec, self.axis
        dv = _deriv(v, spec, k)
        out = self._skew * dv
        if np.any(self._b):
            out = out - (_deriv(self._b * v, spec, k) - self._b * dv)
        return out

    @functools.cached_property
    def omega(self) -> OmegaWeight:
        return build_omega(self.a, self.omega_recipe, self.q0)

    def omega_field(self) -> np.ndarray:
        return self.omega.field_values(shells(self.spec))

    def factorization(self):
        w = self.omega_field()
        abar = np.conj(self._a) / w
        spec, k = self.spec, self.axis

        def a1(u):
            return abar * u

        def b1(u):
            return w * _deriv(u, spec, k)

        return [(a1, b1), (b1, a1)]

    def support_radius(self) -> float:
        r = radius(self.spec)
        nz = self._a != 0
        return float(r[nz].max()) if np.any(nz) else 0.0


@dataclass(eq=False)
class SumPerturbation(Perturbation):
    """Real linear combination of admissible perturbations."""

    terms: list
    coefficients: list | None = None
    kind = "sum"

    def __post_init__(self):
        if not self.terms:
            raise ValueError("empty perturbation sum")
        self.coefficients = [1.0] * len(self.terms) if self.coefficients is None else \
            [float(c) for c in self.coefficients]
        specs = {t.spec for t in self.terms}
        if len(specs) != 1:
            raise ValueError("terms live on different grids")

    @property
    def spec(self) -> GridSpec:
        return self.terms[0].spec

    @property
    def multiplication(self):
        if all(t.multiplication is not None for t in self.terms):
            return sum(c * t.multiplication for c, t in zip(self.coefficients, self.terms))
        return None

    def apply_array(self, v):
        return sum(c * t.apply_array(v) for c, t in zip(self.coefficients, self.terms))

    def factorization(self):
        out = []
        for c, t in zip(self.coefficients, self.terms):
            for A, B in t.factorization():
                out.append((A, (lambda u, B=B, c=c: c * B(u))))
        return out

    @functools.cached_property
    def report(self) -> AdmissibilityReport:
        reports = [t.report for t in self.terms]
        crit = {f"term{i}:{k}": v for i, r in enumerate(reports) for k, v in r.criteria.items()}
        return AdmissibilityReport("sum", crit, all(r.passed for r in reports))

    def support_radius(self) -> float:
        return max(t.support_radius() for t in self.terms)


class ZeroPerturbation(Perturbation):
    kind = "zero"

    def __init__(self, spec: GridSpec):
        self.spec = spec

    @property
    def multiplication(self):
        return np.zeros(self.spec.shape)

    def apply_array(self, v):
        return np.zeros_like(v)

    def factorization(self):
        return []

    @functools.cached_property
    def report(self) -> AdmissibilityReport:
        return AdmissibilityReport("zero", {}, True)

    def support_radius(self) -> float:
        return 0.0


def vector_field_perturbation(components: Sequence[Field | None], recipe: str = "lp",
                              q0: float | None = None) -> SumPerturbation:
    """Split a general vector potential into axis-aligned first-order pieces."""
    terms = [VectorPotential(c, axis=k, q0=q0, omega_recipe=recipe)
             for k, c in enumerate(components) if c is not None and np.any(c.values)]
    return SumPerturbation(terms)


def apply_L(u: Field, P: Perturbation, force: bool = False) -> Field:
    """Lu; refuses perturbations that fail every admissibility criterion."""
    if u.rep != PHYSICAL:
        raise RepresentationError("apply_L expects a physical field")
    if u.spec != P.spec:
        raise ValueError("field and perturbation live on different grids")
    if not force and not P.report.passed:
        raise NotAdmissibleError("perturbation is not admissible (pass force=True to override)")
    return Field(u.spec, P.apply_array(u.values))


def factorize(P: Perturbation) -> list[tuple[Callable[[Field], Field], Callable[[Field], Field]]]:
    """Field-level pairs (A_j, B_j) with <L phi, psi> = sum_j <B_j phi, A_j psi>."""
    pairs = []
    for A, B in P.factorization():
        pairs.append((lambda u, A=A: Field(u.spec, A(u.values)),
                      lambda u, B=B: Field(u.spec, B(u.values))))
    return pairs


# ----------------------------------------------------- approximation

def mollifier_bump(r) -> np.ndarray:
    """exp(1 - 1/(1 - r^2)) on r < 1, zero outside."""
    r = np.abs(np.asarray(r, dtype=float))
    inside = r < 1
    out = np.zeros_like(r)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


def truncate_mollify(V: Field, n: int) -> Field:
    """chi_n (V * phi_{1/n}): mollify at scale 1/n, cut off smoothly between n and 2n."""
    spec = V.spec
    eps = 1.0 / n
    offs, w = _cell_integrals(spec, lambda r: mollifier_bump(r / eps), eps, sub=4)
    if w.sum() <= 0:
        sm = V.values
    else:
        K = _sfft.fftn(_place(spec, offs, w / w.sum()))
        sm = _sfft.ifftn(_sfft.fftn(V.values) * K)
        if np.isrealobj(V.values) or not np.any(V.values.imag):
            sm = sm.real
    chi = 1.0 - smooth_step((radius(spec) - n) / n)
    return Field(spec, chi * sm)


_FUNCTIONALS = {"N1": functional_n1, "N2": functional_n2, "N3": functional_n3,
                "N1'": vector_n1, "N2'": vector_n2, "N3'": vector_n3}


def approximation_residuals(V: Field, name: str, ns: Sequence[int] = (1, 2, 4, 8, 16)) -> dict:
    """Functional `name` of V - V_n along the truncate-and-mollify ladder."""
    f = _FUNCTIONALS[name]
    base = f(V).value
    res = [f(V - truncate_mollify(V, n)).value for n in ns]
    rel = [r / base if base > 0 else 0.0 for r in res]
    c = np.asarray(res)
    trend = bool(np.all(np.diff(c) <= 0.05 * base + 1e-300)) if len(c) > 1 else True
    return {"functional": name, "base": base, "n": list(ns), "residual": res, "relative": rel,
            "decreasing": trend, "final_relative": rel[-1]}


# --------------------------------------------------------- catalog

CATALOG = ("square_well", "gaussian", "power_law", "coulomb", "zero", "vector_bump")


def catalog_potential(name: str, spec: GridSpec, params: dict | None = None):
    """Analytic potentials materialised on ``spec``.

    square_well: -V0 1_{|x|<=R}; gaussian: -V0 exp(-|x|^2/w^2); power_law:
    (1+|x|)^{-s}; coulomb: Z |x|^{-1} 1_{0<|x|<=R} (value at x=0 from the cell
    average); vector_bump: amplitude exp(-|x|^2/w^2) along axis d.
    """
    p = dict(params or {})
    r = radius(spec)
    q0 = p.pop("q0", None)
    if name == "square_well":
        v0 = float(p.pop("V0", 3.0))
        R = float(p.pop("R", 1.0))
        vals = np.where(r <= R, -v0, 0.0)
    elif name == "gaussian":
        v0 = float(p.pop("V0", 1.0))
        w = float(p.pop("width", 1.0))
        vals = -v0 * np.exp(-(r / w) ** 2)
    elif name == "power_law":
        s = float(p.pop("s", 2.0))
        amp = float(p.pop("amplitude", 1.0))
        vals = amp * (1.0 + r) ** (-s)
    elif name == "coulomb":
        Z = float(p.pop("Z", 1.0))
        R = float(p.pop("R", 1.0))
        h = spec.h
        with np.errstate(divide="ignore"):
            vals = np.where((r <= R) & (r > 0), Z / np.where(r > 0, r, 1.0), 0.0)
        cell = 2.38007736397955350664 / h if spec.d == 3 else -math.log(h) + 1.06117542688252434509
        vals = np.where(r == 0, Z * cell, vals)
    elif name == "zero":
        vals = np.zeros(spec.shape)
    elif name == "vector_bump":
        amp = complex(p.pop("amplitude", 1.0))
        w = float(p.pop("width", 1.0))
        axis = int(p.pop("axis", spec.d - 1))
        recipe = p.pop("recipe", "lp")
        if p:
            raise ValueError(f"unknown parameters for {name}: {sorted(p)}")
        a = Field(spec, amp * np.exp(-(r / w) ** 2))
        return VectorPotential(a, axis=axis, q0=q0, omega_recipe=recipe, name=name)
    else:
        raise KeyError(f"unknown potential {name!r}; catalog: {', '.join(CATALOG)}")
    if p:
        raise ValueError(f"unknown parameters for {name}: {sorted(p)}")
    return ScalarPotential(Field(spec, vals), q0=q0, name=name)


# ----------------------------------------- smallness decomposition

def smallness_decomposition(P: Perturbation, probes: Sequence[Field], N: float, gamma: float,
                            eps_list: Sequence[float] = (0.5, 0.1),
                            radii: Sequence[float] | None = None) -> dict:
    """Measured (A, R) with ||mu L u||_X <= eps ||mu u||_{X*} + A ||u 1_{|x|<=R}||_2 on probes."""
    spec = P.spec
    mu = weight_eval(spec, WeightParams(N, gamma))
    r = radius(spec)
    radii = radii or [2.0 ** k for k in range(0, int(math.log2(spec.box / 2)) + 1)]
    rows = []
    for u in probes:
        lu = Field(spec, mu * P.apply_array(u.values))
        lhs = x_norm_upper(lu).value
        xs = x_star_norm(Field(spec, mu * u.values))
        loc = [math.sqrt(np.sum(np.abs(u.values[r <= R]) ** 2) * spec.cell_volume) for R in radii]
        rows.append((lhs, xs, loc))
    out = {}
    for eps in eps_list:
        table = []
        for i, R in enumerate(radii):
            need = 0.0
            for lhs, xs, loc in rows:
                excess = lhs - eps * xs
                if excess > 0:
                    need = max(need, excess / loc[i] if loc[i] > 0 else math.inf)
            table.append({"R": R, "A": need})
        out[str(eps)] = table
    return {"N": N, "gamma": gamma, "decomposition": out}
