"""Free and perturbed resolvents, exceptional-set scans, a direct eigensolver
and eigenfunction decay diagnostics."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy import fft as _sfft
from scipy.special import j0 as _j0, j1 as _j1

from .grid import (Field, GridSpec, PHYSICAL, RepresentationError, SingularSymbolError,
                   fftn, ifftn, is_fft_size, linear_convolve, radius, xi_squared)
from .perturb import Perturbation, ZeroPerturbation
from .spaces import sobolev_norm
from .special import KernelParams, bessel_k, sampled_kernel_offsets

DEFAULT_LADDER = tuple(0.1 * 2.0 ** -k for k in range(7))


class BoundaryValueError(SingularSymbolError):
    """Direct multiplier use on [0, inf) without absorption."""


class ExtrapolationError(ArithmeticError):
    """The epsilon-ladder extrapolation did not converge."""


class SolverError(RuntimeError):
    """A Krylov or eigen solver failed to converge."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SpectralPoint:
    """z = lam + i eps; ``side`` is sign(eps), or declared when eps = 0."""

    lam: float
    eps: float = 0.0
    side: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "eps", float(self.eps))
        if not -1.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [-1, 1]")
        if self.side not in (None, "+", "-"):
            raise ValueError("side must be '+', '-' or None")
        if self.eps != 0:
            s = "+" if self.eps > 0 else "-"
            if self.side not in (None, s):
                raise ValueError("side disagrees with the sign of eps")
            object.__setattr__(self, "side", s)
        elif self.side is None and self.lam >= 0:
            object.__setattr__(self, "side", "+")

    @property
    def z(self) -> complex:
        return complex(self.lam, self.eps)

    @property
    def on_boundary(self) -> bool:
        return self.eps == 0 and self.lam >= 0

    def kernel_params(self, d: int) -> KernelParams:
        return KernelParams(self.z, d, self.side)

    def conjugate(self) -> "SpectralPoint":
        flip = {"+": "-", "-": "+", None: None}[self.side]
        return SpectralPoint(self.lam, -self.eps, flip)


def _as_point(pt) -> SpectralPoint:
    if isinstance(pt, SpectralPoint):
        return pt
    z = complex(pt)
    return SpectralPoint(z.real, z.imag)


# ---------------------------------------------------------------- periodic

def r0_symbol(spec: GridSpec, z: complex) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 / (xi_squared(spec) - z)


def _check_periodic(spec: GridSpec, pt: SpectralPoint) -> np.ndarray:
    if pt.on_boundary:
        on = bool(np.any(np.isclose(xi_squared(spec), pt.lam, rtol=0, atol=1e-12)))
        what = "lies on the lattice of |xi_k|^2 values" if on else "lies in [0, inf)"
        raise BoundaryValueError(
            f"lambda = {pt.lam} {what} with eps = 0; use boundary_r0 (epsilon ladder) "
            "or the free-space realization")
    sym = r0_symbol(spec, pt.z)
    if not np.all(np.isfinite(sym)):
        raise SingularSymbolError("resolvent symbol is singular on the lattice")
    return sym


def apply_r0(g: Field, pt) -> Field:
    """Exact periodic free resolvent (|xi|^2 - z)^(-1) on the grid."""
    pt = _as_point(pt)
    if g.rep != PHYSICAL:
        raise RepresentationError("apply_r0 expects a physical field")
    sym = _check_periodic(g.spec, pt)
    return Field(g.spec, ifftn(fftn(g.values) * sym))


def apply_helmholtz(u: Field, z: complex) -> Field:
    """(-Laplacian - z) u with the spectral Laplacian."""
    return Field(u.spec, ifftn(fftn(u.values) * (xi_squared(u.spec) - complex(z))))


# ---------------------------------------------------------------- free space

def next_fft_size(n: int) -> int:
    m = max(2, int(n))
    while not is_fft_size(m):
        m += 1
    return m


def _truncated_symbol_upper(s: np.ndarray, d: int, z: complex, D: float) -> np.ndarray:
    """Fourier transform of the kernel cut off at |x| = D (Im sqrt z >= 0)."""
    k = complex(np.sqrt(z))
    if k.imag < 0:
        k = -k
    with np.errstate(divide="ignore", invalid="ignore"):
        if d == 3:
            sD = D * np.sinc(s * D / np.pi)
            num = 1.0 + np.exp(1j * k * D) * (1j * k * sD - np.cos(s * D))
        else:
            a = -1j * k
            k0 = bessel_k(0, a * D)
            k1 = bessel_k(1, a * D)
            num = 1.0 + D * (s * _j1(s * D) * k0 - a * _j0(s * D) * k1)
        return num / (s * s - z)


def truncated_kernel_symbol(s: np.ndarray, params: KernelParams, D: float) -> np.ndarray:
    """Symbol of K_z 1_{|x| <= D}; removable singularities at s^2 = z are averaged."""
    zz = params.z if params.upper else params.z.conjugate()
    s = np.asarray(s, dtype=float)
    out = _truncated_symbol_upper(s, params.d, zz, D)
    bad = ~np.isfinite(out) | (np.abs(s * s - zz) < 1e-9 * max(1.0, abs(zz)))
    if np.any(bad):
        sb = s[bad]
        out[bad] = 0.5 * (_truncated_symbol_upper(sb * (1 + 1e-4), params.d, zz, D)
                          + _truncated_symbol_upper(sb * (1 - 1e-4), params.d, zz, D))
    return out if params.upper else np.conj(out)


class FreeSpaceResolvent:
    """Aperiodic R0(z) on the box: convolution with the kernel of R^d.

    The kernel truncated at the box diameter D has a closed-form transform; on a
    zero-padded torus of side >= L + D no periodic image reaches the box, so the
    result equals the continuum convolution with the trigonometric interpolant
    of the source. Real z >= 0 is allowed with a declared side (the boundary
    value z +- i0).
    """

    def __init__(self, spec: GridSpec, pt):
        pt = _as_point(pt)
        self.spec = spec
        self.point = pt
        self.params = pt.kernel_params(spec.d)
        self.diameter = math.sqrt(spec.d) * spec.box
        n_pad = next_fft_size(int(math.ceil((spec.box + self.diameter) / spec.h)) + 1)
        self.padded = GridSpec(spec.d, n_pad, n_pad * spec.h)
        s = np.sqrt(xi_squared(self.padded))
        self.symbol = truncated_kernel_symbol(s, self.params, self.diameter)

    def _pad(self, v: np.ndarray) -> np.ndarray:
        return np.pad(v, [(0, self.padded.n - self.spec.n)] * self.spec.d)

    def _crop(self, v: np.ndarray) -> np.ndarray:
        return v[tuple(slice(0, self.spec.n) for _ in range(self.spec.d))]

    def apply_array(self, v: np.ndarray) -> np.ndarray:
        w = _sfft.fftn(self._pad(np.asarray(v, dtype=np.complex128)))
        return self._crop(_sfft.ifftn(w * self.symbol))

    def apply(self, g: Field) -> Field:
        if g.rep != PHYSICAL:
            raise RepresentationError("expected a physical field")
        return Field(self.spec, self.apply_array(g.values))

    def residual(self, v: np.ndarray) -> np.ndarray:
        """(-Laplacian - z) R0 v - v on the box, evaluated spectrally on the padded torus."""
        w = _sfft.fftn(self._pad(v))
        zz = self.point.z
        sym = self.symbol * (xi_squared(self.padded) - zz) - 1.0
        return self._crop(_sfft.ifftn(w * sym))


@functools.lru_cache(maxsize=6)
def free_resolvent(spec: GridSpec, pt: SpectralPoint) -> FreeSpaceResolvent:
    return FreeSpaceResolvent(spec, pt)


def apply_r0_free(g: Field, pt) -> Field:
    return free_resolvent(g.spec, _as_point(pt)).apply(g)


def _r0_operator(spec: GridSpec, pt: SpectralPoint, realization: str):
    if realization == "periodic":
        sym = _check_periodic(spec, pt)
        return lambda v: ifftn(fftn(v) * sym)
    if realization == "free":
        return free_resolvent(spec, pt).apply_array
    raise ValueError(f"unknown realization {realization!r}")


# ----------------------------------------------------- extrapolation

def neville_extrapolate(eps: Sequence[float], values: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Polynomial extrapolation to eps = 0 through all ladder points.

    Returns (limit, error estimate); the error is the difference with the
    extrapolant that omits the largest eps.
    """
    x = np.asarray(eps, dtype=float)
    order = np.argsort(-np.abs(x))
    x = x[order]
    P = [np.asarray(values[i], dtype=np.complex128) for i in order]
    k = len(P)
    if k == 1:
        return P[0], np.full(np.shape(P[0]), np.inf)
    prev_last = None
    for m in range(1, k):
        P = [(-x[i + m] * P[i] + x[i] * P[i + 1]) / (x[i] - x[i + m]) for i in range(k - m)]
        if m == k - 2:
            prev_last = P[1]
    return P[0], np.abs(P[0] - prev_last)


@dataclass
class BoundaryValue:
    field: Field
    error: np.ndarray
    ladder: list
    side: str
    direct_deviation: float | None = None

    @property
    def max_error(self) -> float:
        return float(np.max(self.error))


def boundary_r0(g: Field, lam: float, side: str = "+", ladder: Sequence[float] = DEFAULT_LADDER,
                realization: str = "free", rtol: float = 1e-4) -> BoundaryValue:
    """R0(lam +- i0) g by extrapolating R0(lam +- i eps) g along a geometric ladder."""
    if not lam > 0:
        raise ValueError("boundary values need lam > 0")
    if side not in ("+", "-"):
        raise ValueError("side must be '+' or '-'")
    sgn = 1.0 if side == "+" else -1.0
    ladder = [abs(float(e)) for e in ladder]
    vals = [_r0_operator(g.spec, SpectralPoint(lam, sgn * e), realization)(g.values) for e in ladder]
    lim, err = neville_extrapolate(ladder, vals)
    scale = float(np.max(np.abs(lim))) or 1.0
    if float(np.max(err)) > rtol * scale:
        raise ExtrapolationError(
            f"epsilon ladder did not converge (error {np.max(err):.3e} vs scale {scale:.3e}); "
            "on a periodic grid eps must exceed the level spacing")
    dev = None
    if realization == "free":
        direct = free_resolvent(g.spec, SpectralPoint(lam, 0.0, side)).apply_array(g.values)
        dev = float(np.max(np.abs(direct - lim)) / scale)
    return BoundaryValue(Field(g.spec, lim), err, ladder, side, dev)


# --------------------------------------------------------- perturbed

@dataclass(frozen=True)
class SolverConfig:
    method: str = "gmres"
    restart: int = 50
    maxiter: int = 40
    tol: float = 1e-8
    realization: str = "periodic"


@dataclass
class BSSolve:
    """Solution of (Id + R0(z) L) u = R0(z) g with diagnostics."""

    field: Field
    iterations: int
    residual: float
    converged: bool
    method: str


def _identity_plus(spec: GridSpec, r0, P: Perturbation):
    shape = spec.shape

    def mv(x):
        v = x.reshape(shape)
        return (v + r0(P.apply_array(v))).reshape(-1)

    return mv


def dense_matrix(op, spec: GridSpec, dtype=np.complex128) -> np.ndarray:
    """Columns op(e_k) for a small grid (oracle use only)."""
    N = spec.size
    if N > 4096:
        raise ValueError("dense oracle limited to 4096 unknowns")
    M = np.empty((N, N), dtype=dtype)
    e = np.zeros(N, dtype=dtype)
    for k in range(N):
        e[k] = 1.0
        M[:, k] = np.asarray(op(e.reshape(spec.shape))).reshape(-1)
        e[k] = 0.0
    return M


def solve_perturbed(g: Field, pt, P: Perturbation, cfg: SolverConfig = SolverConfig()) -> BSSolve:
    """u = R_L(z) g = (Id + R0(z) L)^(-1) R0(z) g."""
    pt = _as_point(pt)
    spec = g.spec
    r0 = _r0_operator(spec, pt, cfg.realization)
    rhs = r0(g.values)
    if isinstance(P, ZeroPerturbation):
        return BSSolve(Field(spec, rhs), 0, 0.0, True, "identity")
    mv = _identity_plus(spec, r0, P)
    b = rhs.reshape(-1)
    bnorm = float(np.linalg.norm(b)) or 1.0
    if cfg.method == "dense":
        A = dense_matrix(lambda v: mv(v.reshape(-1)).reshape(spec.shape), spec)
        x = sla.solve(A, b)
        iters = 1
    elif cfg.method == "gmres":
        A = spla.LinearOperator((spec.size, spec.size), matvec=mv, dtype=np.complex128)
        count = [0]
        x, info = spla.gmres(A, b, rtol=cfg.tol * 1e-2, atol=0.0, restart=cfg.restart,
                             maxiter=cfg.maxiter, callback=lambda _: count.__setitem__(0, count[0] + 1),
                             callback_type="pr_norm")
        iters = count[0]
    else:
        raise ValueError(f"unknown method {cfg.method!r}")
    res = float(np.linalg.norm(mv(x) - b)) / bnorm
    ok = res <= cfg.tol
    if not ok:
        raise SolverError(
            f"Krylov solve did not reach tol {cfg.tol:g} (residual {res:.3e} after {iters} iterations); "
            "lambda may be near an exceptional point",
            {"lambda": pt.lam, "eps": pt.eps, "iterations": iters, "residual": res})
    return BSSolve(Field(spec, x.reshape(spec.shape)), iters, res, ok, cfg.method)


def apply_hamiltonian(u: Field, P: Perturbation) -> Field:
    """H u = -Laplacian u + L u."""
    lap = ifftn(fftn(u.values) * xi_squared(u.spec))
    return Field(u.spec, lap + P.apply_array(u.values))


# --------------------------------------------------- smallest singular value

@dataclass
class SingularEstimate:
    smin: float
    values: np.ndarray
    vector: Field | None
    method: str
    iterations: int = 0
    converged: bool = True


def _support_indices(v: np.ndarray) -> np.ndarray:
    return np.flatnonzero(v.reshape(-1) != 0)


def _low_rank_singular(spec: GridSpec, pt: SpectralPoint, v: np.ndarray, nvals: int) -> SingularEstimate:
    """Exact singular values of Id + R0 V for multiplication by compactly supported V."""
    sym = _check_periodic(spec, pt)
    S = _support_indices(v)
    m = len(S)
    N = spec.size
    c = _sfft.ifftn(sym)                      # R0 column at offset 0
    a = _sfft.ifftn(np.abs(sym) ** 2)         # (R0* R0) column at offset 0
    coords = np.array(np.unravel_index(S, spec.shape)).T
    diff = tuple(((coords[:, None, k] - coords[None, :, k]) % spec.n) for k in range(spec.d))
    Rss = c[diff]                             # R_{s_i, s_j} = c(s_i - s_j)
    AA = a[diff]                              # (R* R)_{ij} = a(s_i - s_j)
    Vs = v.reshape(-1)[S].astype(np.complex128)
    UU = Vs.conj()[:, None] * AA * Vs[None, :]
    UW = Vs.conj()[:, None] * Rss.conj().T
    G = np.block([[UU, UW], [UW.conj().T, np.eye(m)]])
    lam, X = np.linalg.eigh(G)
    keep = lam > 1e-12 * lam.max()
    lam, X = lam[keep], X[:, keep]
    scale = 1.0 / np.sqrt(lam)
    QU = (scale[:, None] * X.conj().T) @ G[:, :m]
    WQ = G[m:, :] @ (X * scale[None, :])
    M = np.eye(len(lam)) + QU @ WQ
    _, sv, vh = np.linalg.svd(M)
    vals = np.sort(sv)
    if len(lam) < N:
        vals = np.sort(np.concatenate([vals, [1.0]]))
    y = vh.conj().T[:, -1]
    coef = X @ (scale * y)
    cu, cw = coef[:m], coef[m:]
    src = np.zeros(N, dtype=np.complex128)
    src[S] = Vs * cu
    vec = ifftn(fftn(src.reshape(spec.shape)) * sym).reshape(-1)
    vec[S] += cw
    vec /= np.linalg.norm(vec) or 1.0
    return SingularEstimate(float(vals[0]), vals[:nvals], Field(spec, vec.reshape(spec.shape)), "low-rank")


def _inverse_iteration(spec: GridSpec, pt: SpectralPoint, P: Perturbation, realization: str,
                       tol: float, maxiter: int, nvals: int = 4, seed: int = 0) -> SingularEstimate:
    """Largest eigenvalues of (A* A)^(-1) by Lanczos; each application is two GMRES solves."""
    r0 = _r0_operator(spec, pt, realization)
    r0a = _r0_operator(spec, pt.conjugate(), realization)
    shape = spec.shape
    N = spec.size

    def mv(x):
        v = x.reshape(shape)
        return (v + r0(P.apply_array(v))).reshape(-1)

    def rmv(x):
        v = x.reshape(shape)
        return (v + P.apply_array(r0a(v))).reshape(-1)

    A = spla.LinearOperator((N, N), matvec=mv, dtype=np.complex128)
    AH = spla.LinearOperator((N, N), matvec=rmv, dtype=np.complex128)
    solves = [0]

    def inv_normal(x):
        y, i1 = spla.gmres(AH, x, rtol=1e-11, atol=0.0, restart=50, maxiter=40)
        z, i2 = spla.gmres(A, y, rtol=1e-11, atol=0.0, restart=50, maxiter=40)
        solves[0] += 1
        if i1 or i2:
            raise SolverError("inner Krylov solve failed during inverse iteration",
                              {"lambda": pt.lam, "eps": pt.eps, "applications": solves[0]})
        return z

    op = spla.LinearOperator((N, N), matvec=inv_normal, dtype=np.complex128)
    k = max(1, min(nvals, N - 2))
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=N) + 1j * rng.normal(size=N)
    try:
        mu, X = spla.eigsh(op, k=k, which="LM", v0=v0, tol=tol, maxiter=maxiter * N)
    except spla.ArpackNoConvergence as exc:
        raise SolverError("inverse iteration stagnated", {"applications": solves[0]}) from exc
    order = np.argsort(-mu)
    mu, X = mu[order], X[:, order]
    vals = 1.0 / np.sqrt(np.maximum(mu, 1e-300))
    x = X[:, 0] / np.linalg.norm(X[:, 0])
    return SingularEstimate(float(vals[0]), vals, Field(spec, x.reshape(shape)),
                            "inverse-iteration", solves[0], True)


def min_singular(pt, P: Perturbation, realization: str = "auto", nvals: int = 4,
                 tol: float = 1e-8, maxiter: int = 100) -> SingularEstimate:
    """Smallest singular value of Id + R0(z) L on the grid (l^2 sample metric)."""
    pt = _as_point(pt)
    spec = P.spec
    if isinstance(P, ZeroPerturbation):
        return SingularEstimate(1.0, np.ones(1), None, "identity")
    if realization == "auto":
        realization = "free" if pt.on_boundary else "periodic"
    v = P.multiplication
    if realization == "periodic" and v is not None:
        m = np.count_nonzero(v)
        if 0 < m <= 3000:
            return _low_rank_singular(spec, pt, np.asarray(v), nvals)
        if m == 0:
            return SingularEstimate(1.0, np.ones(1), None, "identity")
    return _inverse_iteration(spec, pt, P, realization, tol, maxiter, nvals)


@dataclass
class Dip:
    lam: float
    smin: float
    multiplicity: int
    values: list
    kernel: Field | None = None


@dataclass
class ExceptionalScan:
    lams: np.ndarray
    ladder: list
    side: str
    smin: np.ndarray                # shape (len(ladder), len(lams))
    dips: list
    threshold: float
    iters: np.ndarray | None = None
    residual: np.ndarray | None = None

    def records(self) -> list[dict]:
        out = []
        for i, e in enumerate(self.ladder):
            for j, lam in enumerate(self.lams):
                out.append({"lambda": float(lam), "eps": float(e), "side": self.side,
                            "smin": float(self.smin[i, j]),
                            "iters": int(self.iters[i, j]) if self.iters is not None else 0,
                            "residual": float(self.residual[i, j]) if self.residual is not None else 0.0})
        return out


def singular_residual(pt, P: Perturbation, est: SingularEstimate, realization: str = "periodic") -> float:
    """| ||(Id + R0 L) v|| - smin | for the returned unit singular vector v."""
    if est.vector is None:
        return 0.0
    pt = _as_point(pt)
    v = est.vector.values
    r0 = _r0_operator(P.spec, pt, realization)
    av = v + r0(P.apply_array(v))
    return abs(float(np.linalg.norm(av) / np.linalg.norm(v)) - est.smin)


def scan_exceptional(interval: tuple[float, float], P: Perturbation, resolution: float = 0.05,
                     ladder: Sequence[float] = (0.2, 0.1, 0.05, 0.025, 0.0125), side: str = "+",
                     threshold: float = 0.05, min_steps: int = 4, realization: str = "auto",
                     multiplicity_ratio: float = 3.0) -> ExceptionalScan:
    """Locate energies where Id + R0(lam +- i eps) L becomes nearly singular.

    A dip is a local minimum (in lam) of the smallest-eps curve that falls
    below ``threshold`` and decreases monotonically over at least
    ``min_steps`` consecutive ladder steps. Its multiplicity counts singular
    values within ``multiplicity_ratio`` times the smallest one.
    """
    a, b = sorted(map(float, interval))
    if a <= 0 <= b:
        raise ValueError("the scan interval must not contain 0")
    lams = np.arange(a, b + 0.5 * resolution, resolution)
    lams = lams[lams <= b + 1e-12]
    ladder = sorted((abs(float(e)) for e in ladder), reverse=True)
    sgn = 1.0 if side == "+" else -1.0
    real = realization if realization != "auto" else ("periodic" if b < 0 else "free")
    smin = np.empty((len(ladder), len(lams)))
    iters = np.zeros(smin.shape, dtype=int)
    resid = np.zeros(smin.shape)
    last = []
    for j, lam in enumerate(lams):
        for i, e in enumerate(ladder):
            pt = SpectralPoint(lam, sgn * e)
            est = min_singular(pt, P, real)
            smin[i, j] = est.smin
            iters[i, j] = est.iterations
            resid[i, j] = singular_residual(pt, P, est, real)
            if i == len(ladder) - 1:
                last.append(est)
    dips = []
    fine = smin[-1]
    for j in range(len(lams)):
        left = fine[j - 1] if j > 0 else np.inf
        right = fine[j + 1] if j + 1 < len(lams) else np.inf
        if not (fine[j] <= left and fine[j] <= right and fine[j] < threshold):
            continue
        steps = np.diff(smin[:, j])
        run = 0
        for s in steps[::-1]:
            if s < 0:
                run += 1
            else:
                break
        if run < min(min_steps, len(ladder) - 1):
            continue
        vals = np.asarray(last[j].values)
        mult = int(np.count_nonzero(vals <= multiplicity_ratio * vals[0]))
        dips.append(Dip(float(lams[j]), float(fine[j]), mult, [float(x) for x in vals], last[j].vector))
    return ExceptionalScan(lams, ladder, side, smin, dips, threshold, iters, resid)


def kernel_dimension(pt, P: Perturbation, ratio: float = 3.0, nvals: int = 6) -> tuple[int, np.ndarray]:
    """Number of singular values of Id + R0 L within ``ratio`` of the smallest."""
    est = min_singular(pt, P, "periodic", nvals=nvals)
    vals = np.asarray(est.values)
    return int(np.count_nonzero(vals <= ratio * vals[0])), vals


# ------------------------------------------------------------- eigen

@dataclass
class EigenResult:
    values: np.ndarray
    vectors: list
    residuals: np.ndarray
    method: str


DENSE_LIMIT = 4096


def _hamiltonian_matvec(spec: GridSpec, P: Perturbation):
    xi2 = xi_squared(spec)
    real = P.multiplication is not None

    def mv(X):
        X = np.asarray(X)
        single = X.ndim == 1
        cols = X.reshape(spec.size, -1)
        out = np.empty_like(cols, dtype=np.float64 if real else np.complex128)
        for k in range(cols.shape[1]):
            v = cols[:, k].reshape(spec.shape)
            lap = ifftn(fftn(v) * xi2)
            y = lap + P.apply_array(v)
            out[:, k] = (y.real if real else y).reshape(-1)
        return out[:, 0] if single else out

    return mv, real


def eigensolve_direct(P: Perturbation, count: int = 1, window: tuple[float, float] | None = None,
                      method: str = "auto", tol: float = 1e-8, seed: int = 0,
                      maxiter: int = 2000) -> EigenResult:
    """Lowest ``count`` eigenpairs of H = -Laplacian + L on the grid.

    Dense Hermitian eigensolver up to 4096 unknowns; otherwise Lanczos on
    (H + sigma)^(-1), each application a CG solve preconditioned by the FFT
    inverse of (-Laplacian + sigma). Eigenvectors are normalised
    in L^2 (sum |u|^2 h^d = 1); residuals ||Hu - lam u||_2 are in the same norm.
    """
    spec = P.spec
    mv, real = _hamiltonian_matvec(spec, P)
    N = spec.size
    if method == "auto":
        method = "dense" if N <= DENSE_LIMIT else "shift-invert"
    dtype = np.float64 if real else np.complex128
    if method == "dense":
        H = dense_matrix(lambda v: mv(v.reshape(-1)).reshape(spec.shape), spec, dtype)
        H = 0.5 * (H + H.conj().T)
        w, U = np.linalg.eigh(H)
        w, U = w[:count], U[:, :count]
    elif method == "shift-invert":
        v = P.multiplication
        sigma = 1.0 + (float(max(0.0, -np.min(v))) if v is not None else 0.0)
        xi2 = xi_squared(spec)

        def shifted(x):
            return mv(x) + sigma * x

        def prec(x):
            y = ifftn(fftn(np.asarray(x).reshape(spec.shape)) / (xi2 + sigma)).reshape(-1)
            return y.real if real else y

        A = spla.LinearOperator((N, N), matvec=shifted, dtype=dtype)
        M = spla.LinearOperator((N, N), matvec=prec, dtype=dtype)
        inner = [0]

        def solve(x):
            y, info = spla.cg(A, x, rtol=1e-13, atol=0.0, M=M, maxiter=2000)
            inner[0] += 1
            if info:
                raise SolverError("inner CG solve failed", {"applications": inner[0]})
            return y

        op = spla.LinearOperator((N, N), matvec=solve, dtype=dtype)
        rng = np.random.default_rng(seed)
        v0 = rng.normal(size=N)
        try:
            mu, U = spla.eigsh(op, k=count, which="LA", v0=v0, tol=1e-12, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise SolverError("shift-invert Lanczos did not converge", {"applications": inner[0]}) from exc
        w = 1.0 / mu - sigma
        order = np.argsort(w)
        w, U = w[order], U[:, order]
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    dv = spec.cell_volume
    vecs, res = [], []
    for k in range(len(w)):
        u = U[:, k] / math.sqrt(np.sum(np.abs(U[:, k]) ** 2) * dv)
        r_ = mv(u) - w[k] * u
        res.append(math.sqrt(np.sum(np.abs(r_) ** 2) * dv))
        vecs.append(Field(spec, u.reshape(spec.shape)))
    res = np.asarray(res)
    if np.any(res > max(tol, 1e-8) * max(1.0, float(np.max(np.abs(w))))):
        raise SolverError("eigensolver residual above tolerance", {"residuals": res.tolist()})
    w = np.asarray(w, dtype=float)
    if window is not None:
        lo, hi = window
        keep = [i for i in range(len(w)) if lo <= w[i] <= hi]
        w, vecs, res = w[keep], [vecs[i] for i in keep], res[keep]
    return EigenResult(w, vecs, res, method)


# ------------------------------------------------------------- decay

@dataclass
class DecayReport:
    lam: float
    residual: float
    representation: str
    weighted_norms: dict
    masked_norms: dict
    tail_fraction: dict
    decaying: bool
    slope: float | None
    expected_slope: float | None
    fit_range: tuple | None = None
    core_mismatch: float | None = None

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def kernel_representation(u: Field, lam: float, P: Perturbation) -> Field:
    """-h^d sum_y K_lam(x - y) (V u)(y) with the continuum kernel of R^d.

    For an eigenfunction with lam < 0 this reproduces u up to the quadrature
    error of the sum, and it carries no lattice Green's function artefacts:
    on an even grid the lattice kernel keeps a non-decaying (-1)^x line
    component from the unpaired Nyquist plane.
    """
    v = P.multiplication
    if v is None:
        raise ValueError("the kernel representation needs a multiplication operator")
    if not lam < 0:
        raise ValueError("the kernel representation is for lam < 0")
    params = KernelParams(complex(lam, 0.0), u.spec.d)
    k = sampled_kernel_offsets(u.spec, params)
    w = -linear_convolve(np.asarray(v) * u.values, k, u.spec)
    return Field(u.spec, w.real if np.isrealobj(u.values) else w)


def eigen_decay_check(u: Field, lam: float, N_list: Sequence[int] = (0, 1, 2, 3),
                      P: Perturbation | None = None, residual: float | None = None,
                      fit_range: tuple[float, float] | None = None,
                      tail_tol: float = 0.1, representation: str = "lattice") -> DecayReport:
    """Weighted Sobolev norms ||(1+|x|^2)^N u||_{W^{1,2}} and the decay rate of u.

    The box-tail diagnostic recomputes each norm with u cut to |x| <= 0.4 L;
    a large relative change flags periodisation contamination (non-decay).
    The log-slope of |u| r^{(d-1)/2} against r is compared with -sqrt(|lam|).
    With ``representation="kernel"`` the analysis runs on the continuum-kernel
    representation of u (see ``kernel_representation``) and the relative
    mismatch with u on |x| <= 2 is reported.
    """
    spec = u.spec
    if residual is None and P is not None:
        Hu = apply_hamiltonian(u, P)
        nrm = math.sqrt(np.sum(np.abs(u.values) ** 2) * spec.cell_volume)
        residual = math.sqrt(np.sum(np.abs(Hu.values - lam * u.values) ** 2) * spec.cell_volume) / nrm
    if residual is not None and residual > 1e-6:
        raise ValueError(f"eigen residual {residual:.2e} exceeds 1e-6; refusing decay analysis")
    r = radius(spec)
    mismatch = None
    if representation == "kernel":
        w = kernel_representation(u, lam, P)
        core = r <= 2.0
        mismatch = float(np.linalg.norm((w.values - u.values)[core]) / np.linalg.norm(u.values[core]))
        u = w
    elif representation != "lattice":
        raise ValueError(f"unknown representation {representation!r}")
    cut = r <= 0.4 * spec.box
    full, masked, frac = {}, {}, {}
    for N in N_list:
        w = (1.0 + r * r) ** N
        a = sobolev_norm(Field(spec, w * u.values), 1, 2)
        b = sobolev_norm(Field(spec, w * u.values * cut), 1, 2)
        full[N], masked[N] = a, b
        frac[N] = abs(a - b) / a if a > 0 else 0.0
    decaying = all(f <= tail_tol for f in frac.values())
    slope = expected = None
    if lam < 0:
        expected = -math.sqrt(-lam)
        lo, hi = fit_range or (2.0, 0.35 * spec.box)
        amp = np.abs(u.values)
        sel = (r >= lo) & (r <= hi) & (amp > 1e-13 * amp.max())
        if np.count_nonzero(sel) > 10:
            y = np.log(amp[sel] * r[sel] ** ((spec.d - 1) / 2))
            slope = float(np.polyfit(r[sel], y, 1)[0])
        fit_range = (lo, hi)
    return DecayReport(float(lam), float(residual) if residual is not None else float("nan"),
                       representation, full, masked, frac, decaying, slope, expected, fit_range, mismatch)
