"""Propagators, spectral windows, smoothing estimates and local wave operators."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .grid import Field, GridSpec, coordinates, fftn, gaussian, ifftn, lp_norm, pairing, radius, xi_squared
from .perturb import Perturbation, ZeroPerturbation
from .resolvent import DENSE_LIMIT, _hamiltonian_matvec, apply_hamiltonian
from .spaces import bstar_norm, dual_restriction_exponent, sobolev_values

_norm2 = lambda v, spec: math.sqrt(float(np.sum(np.abs(v) ** 2)) * spec.cell_volume)


class EvolutionError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class WindowError(ValueError):
    """The spectral window touches 0 or a detected eigenvalue."""


def _is_free(P) -> bool:
    return P is None or isinstance(P, ZeroPerturbation)


@dataclass(frozen=True)
class EvolutionConfig:
    dt: float = 0.02
    method: str = "auto"          # free | split-step | lanczos
    tol: float = 1e-10
    krylov_dim: int = 30

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.method not in ("auto", "free", "split-step", "lanczos"):
            raise ValueError(f"unknown evolution method {self.method!r}")


def _resolve_method(P, cfg: EvolutionConfig) -> str:
    if cfg.method != "auto":
        if cfg.method == "split-step" and not _is_free(P) and P.multiplication is None:
            raise ValueError("split-step needs a scalar potential")
        if cfg.method == "free" and not _is_free(P):
            raise ValueError("the free propagator ignores the perturbation")
        return cfg.method
    if _is_free(P):
        return "free"
    return "split-step" if P.multiplication is not None else "lanczos"


def _lanczos_step(v: np.ndarray, dt: float, P: Perturbation, m: int) -> tuple[np.ndarray, float]:
    """exp(-i dt H) v on a Krylov space of dimension m; returns (result, error estimate)."""
    spec = P.spec
    beta0 = np.linalg.norm(v)
    if beta0 == 0:
        return v, 0.0
    Q = np.empty((m + 1, v.size), dtype=np.complex128)
    a = np.zeros(m)
    b = np.zeros(m)
    Q[0] = v.reshape(-1) / beta0
    k_used = m
    for j in range(m):
        w = apply_hamiltonian(Field(spec, Q[j].reshape(spec.shape)), P).values.reshape(-1)
        a[j] = np.real(np.vdot(Q[j], w))
        w = w - a[j] * Q[j] - (b[j - 1] * Q[j - 1] if j else 0)
        w -= Q[:j + 1].T @ (Q[:j + 1].conj() @ w)       # full reorthogonalisation
        b[j] = np.linalg.norm(w)
        if b[j] < 1e-14 * beta0:
            k_used = j + 1
            break
        Q[j + 1] = w / b[j]
    T = np.diag(a[:k_used]) + np.diag(b[:k_used - 1], 1) + np.diag(b[:k_used - 1], -1)
    ev, U = np.linalg.eigh(T)
    c = U @ (np.exp(-1j * dt * ev) * U[0].conj())
    err = abs(b[k_used - 1] * c[-1]) if k_used == m else 0.0
    out = beta0 * (Q[:k_used].T @ c)
    return out.reshape(v.shape), float(err)


def evolve(f: Field, t: float, P: Perturbation | None = None, cfg: EvolutionConfig = EvolutionConfig()) -> Field:
    """e^{-itH} f for H = -Laplacian + L."""
    spec = f.spec
    method = _resolve_method(P, cfg)
    if t == 0:
        return Field(spec, f.values, f.rep)
    xi2 = xi_squared(spec)
    if method == "free":
        return Field(spec, ifftn(fftn(f.values) * np.exp(-1j * t * xi2)))
    nsteps = max(1, int(math.ceil(abs(t) / cfg.dt - 1e-9)))
    dt = t / nsteps
    u = np.asarray(f.values, dtype=np.complex128)
    n0 = _norm2(u, spec)
    if method == "split-step":
        v = np.asarray(P.multiplication, dtype=float)
        half = np.exp(-0.5j * dt * v)
        full = np.exp(-1j * dt * v)
        kin = np.exp(-1j * dt * xi2)
        u = u * half
        for k in range(nsteps):
            u = ifftn(fftn(u) * kin)
            u = u * (full if k < nsteps - 1 else half)
    else:
        for k in range(nsteps):
            u, err = _lanczos_step(u, dt, P, cfg.krylov_dim)
            if err > cfg.tol * max(n0, 1e-300):
                raise EvolutionError("Krylov step error above tolerance; reduce dt",
                                     {"step": k, "error": err, "dt": dt})
    drift = abs(_norm2(u, spec) - n0) / max(n0, 1e-300)
    if drift > 1e-6 * max(1.0, abs(t)):
        raise EvolutionError("norm drift exceeds 1e-6 per unit time", {"drift": drift, "t": t})
    return Field(spec, u)


def free_gaussian(spec: GridSpec, width: float, t: float, images: int = 0) -> Field:
    """e^{it Lap} exp(-|x|^2 / w^2) = (w^2 / (w^2 + 4it))^{d/2} exp(-|x|^2 / (w^2 + 4it)).

    ``images`` > 0 sums the periodic copies shifted by up to that many boxes
    per axis, which is the exact solution on the torus.
    """
    X = coordinates(spec)
    s = width ** 2 + 4j * t
    out = np.zeros(spec.shape, dtype=np.complex128)
    for m in itertools.product(range(-images, images + 1), repeat=spec.d):
        r2 = sum((x + k * spec.box) ** 2 for x, k in zip(X, m))
        out += np.exp(-r2 / s)
    return Field(spec, (width ** 2 / s) ** (spec.d / 2) * out)


# --------------------------------------------------------------- windows

@dataclass(frozen=True)
class SpectralWindow:
    """E(I) for I = [a, b].

    ``realization``: "chebyshev" (Jackson-damped polynomial, matrix-free),
    "dense" (eigenbasis of the assembled operator, small grids only) or "auto".
    ``degree=None`` picks the polynomial degree from the distance of I to
    {0} and the detected eigenvalues (see :func:`auto_degree`).
    The free operator always uses the exact indicator unless asked otherwise.
    """

    a: float
    b: float
    degree: int | None = None
    exceptional: tuple = ()
    realization: str = "auto"

    def __post_init__(self):
        if not self.a < self.b:
            raise WindowError("window needs a < b")
        if self.a <= 0 <= self.b:
            raise WindowError("0 must not lie in the window")
        hit = [e for e in self.exceptional if self.a <= e <= self.b]
        if hit:
            raise WindowError(f"window [{self.a}, {self.b}] contains detected eigenvalues {hit}")
        if self.degree is not None and self.degree < 1:
            raise ValueError("degree must be positive")
        if self.realization not in ("auto", "chebyshev", "dense"):
            raise ValueError(f"unknown window realization {self.realization!r}")

    @property
    def gap(self) -> float:
        """Distance from I to 0 and to the detected eigenvalues."""
        pts = [0.0, *self.exceptional]
        return min(min(abs(p - self.a), abs(p - self.b)) for p in pts)

    def degree_for(self, lo: float, hi: float) -> int:
        return self.degree if self.degree is not None else auto_degree(lo, hi, self.gap)


def auto_degree(lo: float, hi: float, gap: float, minimum: int = 200) -> int:
    """Degree whose Jackson transition width, about pi (hi - lo) / (2 D), is a quarter of ``gap``."""
    return max(minimum, int(math.ceil(2 * math.pi * (hi - lo) / gap)))


def spectral_bounds(P: Perturbation | None, spec: GridSpec, iters: int = 30, seed: int = 0) -> tuple[float, float]:
    """Enclosing interval for the spectrum of H on the grid."""
    top = float(np.max(xi_squared(spec)))
    if _is_free(P):
        return -1e-3, top * 1.001 + 1e-3
    v = P.multiplication
    if v is not None:
        return float(min(0.0, np.min(v))) - 1e-3, top + float(max(0.0, np.max(v))) + 1e-3
    rng = np.random.default_rng(seed)
    x = rng.normal(size=spec.shape) + 0j
    lam = 0.0
    for _ in range(iters):
        y = P.apply_array(x)
        lam = np.linalg.norm(y) / np.linalg.norm(x)
        x = y / np.linalg.norm(y)
    bound = 1.1 * lam + 1e-3
    return -bound, top + bound


def chebyshev_window_coefficients(a: float, b: float, lo: float, hi: float, degree: int) -> np.ndarray:
    """Jackson-damped Chebyshev coefficients of 1_[a,b] on [lo, hi]."""
    A = np.clip((2 * a - lo - hi) / (hi - lo), -1, 1)
    B = np.clip((2 * b - lo - hi) / (hi - lo), -1, 1)
    ta, tb = math.acos(A), math.acos(B)
    k = np.arange(1, degree + 1)
    c = np.empty(degree + 1)
    c[0] = (ta - tb) / math.pi
    c[1:] = 2.0 * (np.sin(k * ta) - np.sin(k * tb)) / (k * math.pi)
    D = degree + 1
    kk = np.arange(degree + 1)
    g = ((D - kk) * np.cos(math.pi * kk / D) + np.sin(math.pi * kk / D) / math.tan(math.pi / D)) / D
    return c * g


def window_polynomial(window: SpectralWindow, P: Perturbation | None, spec: GridSpec):
    """(coefficients, lo, hi) and a scalar evaluator p(x) of the Chebyshev window."""
    lo, hi = spectral_bounds(P, spec)
    c = chebyshev_window_coefficients(window.a, window.b, lo, hi, window.degree_for(lo, hi))

    def p(x):
        s = (2 * np.asarray(x, dtype=float) - lo - hi) / (hi - lo)
        return np.polynomial.chebyshev.chebval(np.clip(s, -1, 1), c)

    return c, lo, hi, p


def _chebyshev_apply(v: np.ndarray, spec: GridSpec, P, c: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if _is_free(P):
        P = ZeroPerturbation(spec)
    alpha, beta = 2.0 / (hi - lo), -(hi + lo) / (hi - lo)

    def Hs(x):
        return alpha * apply_hamiltonian(Field(spec, x), P).values + beta * x

    t0 = v
    out = c[0] * t0
    if len(c) == 1:
        return out
    t1 = Hs(v)
    out = out + c[1] * t1
    for ck in c[2:]:
        t0, t1 = t1, 2 * Hs(t1) - t0
        out = out + ck * t1
    return out


@dataclass
class ProjectionResult:
    field: Field
    idempotence_defect: float
    symmetry_defect: float
    method: str


_DENSE_CACHE: dict = {}


def _dense_eigensystem(spec: GridSpec, P: Perturbation):
    key = (spec, id(P))
    hit = _DENSE_CACHE.get(key)
    if hit is not None and hit[0] is P:
        return hit[1]
    mv, real = _hamiltonian_matvec(spec, P if not _is_free(P) else ZeroPerturbation(spec))
    M = mv(np.eye(spec.size, dtype=np.float64 if real else np.complex128))
    M = 0.5 * (M + M.conj().T)
    w, U = np.linalg.eigh(M)
    _DENSE_CACHE.clear()
    _DENSE_CACHE[key] = (P, (w, U))
    return w, U


def window_realization(window: SpectralWindow, P, spec: GridSpec, exact_free: bool = True) -> str:
    if _is_free(P) and exact_free:
        return "indicator"
    if window.realization == "dense" and spec.size > DENSE_LIMIT:
        raise ValueError(f"dense window limited to {DENSE_LIMIT} unknowns")
    if window.realization == "dense" or (window.realization == "auto" and spec.size <= DENSE_LIMIT):
        return "dense"
    return "chebyshev"


def apply_window(f: Field, window: SpectralWindow, P: Perturbation | None = None,
                 exact_free: bool = True) -> Field:
    """E(I) f without defect diagnostics."""
    spec = f.spec
    how = window_realization(window, P, spec, exact_free)
    if how == "indicator":
        xi2 = xi_squared(spec)
        return Field(spec, ifftn(fftn(f.values) * ((xi2 >= window.a) & (xi2 <= window.b))))
    if how == "dense":
        w, U = _dense_eigensystem(spec, P)
        sel = (w >= window.a) & (w <= window.b)
        Us = U[:, sel]
        v = np.asarray(f.values, np.complex128).reshape(-1)
        return Field(spec, (Us @ (Us.conj().T @ v)).reshape(spec.shape))
    c, lo, hi, _ = window_polynomial(window, P, spec)
    return Field(spec, _chebyshev_apply(np.asarray(f.values, np.complex128), spec, P, c, lo, hi))


def free_window(f: Field, window: SpectralWindow, P: Perturbation | None) -> Field:
    """p(H0) f with the same Chebyshev polynomial p used for E(I) of H (exact multiplier)."""
    spec = f.spec
    _, _, _, p = window_polynomial(window, P, spec)
    return Field(spec, ifftn(fftn(f.values) * p(xi_squared(spec))))


def spectral_project(f: Field, window: SpectralWindow, P: Perturbation | None = None,
                     exact_free: bool = True, seed: int = 0) -> ProjectionResult:
    """E(I) f with idempotence and symmetry defects measured on f and a random probe."""
    spec = f.spec
    e = lambda g: apply_window(g, window, P, exact_free)
    ef = e(f)
    nf = max(_norm2(f.values, spec), 1e-300)
    idem = _norm2(e(ef).values - ef.values, spec) / nf
    rng = np.random.default_rng(seed)
    g = Field(spec, rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape))
    eg = e(g)
    sym = abs(pairing(ef, g) - pairing(f, eg)) / (nf * _norm2(g.values, spec))
    method = window_realization(window, P, spec, exact_free)
    if method == "chebyshev":
        lo, hi = spectral_bounds(P, spec)
        method = f"chebyshev[{window.degree_for(lo, hi)}]"
    return ProjectionResult(ef, float(idem), float(sym), method)


# ------------------------------------------------------------- smoothing

@dataclass
class SmoothingReport:
    T: list
    lp_term: list          # ||S_{1/(d+1)} u||_{L^{p'}_x L^2_t}
    bstar_term: list       # ||S_1 u||_{B*_x L^2_t}
    lp_plain: list         # same without derivative weights
    bstar_plain: list
    f_norm: float
    ratio: list            # (lp_term + bstar_term) / ||f||_2

    def growth(self) -> float:
        return self.ratio[-1] / self.ratio[0] - 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def smoothing_check(f: Field, window: SpectralWindow, P: Perturbation | None = None,
                    T_list: Sequence[float] = (8.0, 16.0), dt: float = 0.05,
                    cfg: EvolutionConfig | None = None, project: bool = True) -> SmoothingReport:
    """Mixed norms of e^{itH} E(I) f over t in [-T, T], trapezoid rule in t."""
    spec = f.spec
    cfg = cfg or EvolutionConfig(dt=min(dt, 0.02))
    g = apply_window(f, window, P) if project else f
    d = spec.d
    a = 1.0 / (d + 1)
    pp = dual_restriction_exponent(d)
    Ts = sorted(float(T) for T in T_list)
    nsteps = int(round(Ts[-1] / dt))
    marks = {int(round(T / dt)): T for T in Ts}
    acc = {k: np.zeros(spec.shape) for k in ("lp", "b", "lp0", "b0")}
    out = {k: [] for k in acc}

    def add(u, w):
        acc["lp"] += w * np.abs(sobolev_values(u, spec, a)) ** 2
        acc["b"] += w * np.abs(sobolev_values(u, spec, 1)) ** 2
        acc["lp0"] += w * np.abs(u) ** 2
        acc["b0"] += w * np.abs(u) ** 2

    fwd = g.values.astype(np.complex128)
    bwd = fwd.copy()
    add(fwd, dt)                          # t = 0 counted once (both halves, weight dt/2 each)
    for k in range(1, nsteps + 1):
        fwd = evolve(Field(spec, fwd), -dt, P, cfg).values     # e^{+i t H}
        bwd = evolve(Field(spec, bwd), dt, P, cfg).values
        last = k in marks
        w = 0.5 * dt if last else dt
        add(fwd, w)
        add(bwd, w)
        if last:
            out["lp"].append(lp_norm(Field(spec, np.sqrt(acc["lp"])), pp))
            out["b"].append(bstar_norm(Field(spec, np.sqrt(acc["b"]))))
            out["lp0"].append(lp_norm(Field(spec, np.sqrt(acc["lp0"])), pp))
            out["b0"].append(bstar_norm(Field(spec, np.sqrt(acc["b0"]))))
            add(fwd, 0.5 * dt)            # restore interior weight for later marks
            add(bwd, 0.5 * dt)
    fn = _norm2(f.values, spec)
    ratio = [(x + y) / fn for x, y in zip(out["lp"], out["b"])]
    return SmoothingReport(Ts, out["lp"], out["b"], out["lp0"], out["b0"], fn, ratio)


def random_packets(spec: GridSpec, count: int, window: SpectralWindow, seed: int = 1,
                   spread: float = 3.0) -> list[Field]:
    """Gaussian packets with random centres, widths and directions, carrying momentum sqrt((a+b)/2)."""
    rng = np.random.default_rng(seed)
    X = coordinates(spec)
    k = math.sqrt(0.5 * (window.a + window.b))
    out = []
    for _ in range(count):
        c = rng.uniform(-spread, spread, spec.d)
        w = rng.uniform(1.0, 2.5)
        p = rng.normal(size=spec.d)
        p *= k / np.linalg.norm(p)
        phase = sum(pi * (x - ci) for pi, x, ci in zip(p, X, c))
        out.append(Field(spec, gaussian(spec, w, c).values * np.exp(1j * phase)))
    return out


@dataclass
class SmoothingComparison:
    T: list
    free_ratio: list        # per packet, at the largest T
    ratio: list
    growth: list            # per packet, relative change of the ratio from first to last T
    free_growth: list
    factor: float           # max over packets of max(r/r0, r0/r)

    def to_dict(self) -> dict:
        return asdict(self)


def smoothing_comparison(fs: Sequence[Field], window: SpectralWindow, P: Perturbation,
                         T_list: Sequence[float] = (8.0, 16.0), dt: float = 0.1) -> SmoothingComparison:
    """smoothing_check for each f with and without P."""
    free, pert = [], []
    for f in fs:
        free.append(smoothing_check(f, window, None, T_list, dt))
        pert.append(smoothing_check(f, window, P, T_list, dt))
    rf = [r.ratio[-1] for r in free]
    rp = [r.ratio[-1] for r in pert]
    factor = max(max(a / b, b / a) for a, b in zip(rp, rf))
    return SmoothingComparison(sorted(float(t) for t in T_list), rf, rp,
                               [r.growth() for r in pert], [r.growth() for r in free], float(factor))


# ---------------------------------------------------------- wave operator

def group_speed(window: SpectralWindow) -> float:
    """max |grad |xi|^2| over the window's frequencies."""
    return 2.0 * math.sqrt(window.b)


def mass_radius(g: Field, tail: float = 1e-6) -> float:
    """Smallest r with the L^2 mass of g outside |x| <= r at most ``tail``."""
    r = radius(g.spec).reshape(-1)
    m = np.abs(g.values.reshape(-1)) ** 2
    order = np.argsort(r)
    cum = np.cumsum(m[order][::-1])[::-1] / max(m.sum(), 1e-300)
    idx = np.flatnonzero(cum <= tail)
    return float(r[order][idx[0]]) if len(idx) else float(r.max())


def wrap_time(spec: GridSpec, window: SpectralWindow, packet_radius: float, support_radius: float) -> float:
    """Time before the periodic image of the outgoing packet reaches the potential again.

    The fastest window frequency leaves the packet's edge at speed 2 sqrt(b);
    its periodic copy re-enters the support of the perturbation after
    travelling box - packet_radius - support_radius.
    """
    return max(0.0, (spec.box - packet_radius - support_radius) / group_speed(window))


@dataclass
class WaveOperatorReport:
    side: str
    times: list
    increments: list
    isometry_defect: list
    intertwining_defect: list
    completeness_defect: list
    wrap_time: float
    cauchy: bool
    decay_factors: list
    free_exact: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def wave_operator(f: Field, window: SpectralWindow, P: Perturbation | None = None,
                  t_ladder: Sequence[float] = (4.0, 8.0, 16.0, 32.0), side: str = "+",
                  cfg: EvolutionConfig = EvolutionConfig(), completeness: bool = True) -> WaveOperatorReport:
    """W_t g = e^{itH} e^{-itH0} g, g = p(H0) f, along a t ladder.

    isometry defect  | ||p(H) W_t g|| - ||p(H0) g|| | / ||p(H0) g||
    intertwining     || V e^{-itH0} g || / ||g||   (= ||(H W_t - W_t H0) g|| / ||g||)
    completeness     || W_t p(H0) W_t* p(H) g - p(H)^2 g || / ||g||
    """
    spec = f.spec
    sgn = 1.0 if side == "+" else -1.0
    g = free_window(f, window, P)
    gn = max(_norm2(g.values, spec), 1e-300)
    pg = free_window(g, window, P)
    pgn = _norm2(pg.values, spec)
    supp = 0.0 if _is_free(P) else P.support_radius()
    tw = wrap_time(spec, window, mass_radius(f), supp if np.isfinite(supp) else spec.box / 2)
    ts = [sgn * abs(float(t)) for t in t_ladder]
    Ws, iso, inter, comp = [], [], [], []
    for t in ts:
        free_t = evolve(g, t, None)
        w = evolve(free_t, -t, P, cfg)
        Ws.append(w)
        if _is_free(P):
            iso.append(abs(_norm2(free_window(w, window, P).values, spec) - pgn) / max(pgn, 1e-300))
            inter.append(0.0)
            comp.append(0.0)
            continue
        pw = apply_window(w, window, P, exact_free=False)
        iso.append(abs(_norm2(pw.values, spec) - pgn) / max(pgn, 1e-300))
        inter.append(_norm2(P.apply_array(free_t.values), spec) / gn)
        if completeness:
            eg = apply_window(g, window, P, exact_free=False)
            back = evolve(evolve(eg, t, P, cfg), -t, None)               # W_t* p(H) g
            fwd = evolve(evolve(free_window(back, window, P), t, None), -t, P, cfg)
            eeg = apply_window(eg, window, P, exact_free=False)
            comp.append(_norm2(fwd.values - eeg.values, spec) / gn)
        else:
            comp.append(float("nan"))
    inc = [_norm2(Ws[k + 1].values - Ws[k].values, spec) / gn for k in range(len(Ws) - 1)]
    factors = [inc[k] / inc[k + 1] if inc[k + 1] > 0 else float("inf") for k in range(len(inc) - 1)]
    pre = [k for k in range(len(factors)) if abs(ts[k + 2]) <= tw]
    cauchy = all(factors[k] >= 1.5 for k in pre) if pre else False
    notes = []
    if any(abs(t) > tw for t in ts):
        notes.append(f"ladder extends past the wrap time {tw:.2f}; later entries are not asserted")
    if not _is_free(P) and not cauchy:
        notes.append("increments do not decrease by 1.5x before the wrap time")
    free_exact = None
    if _is_free(P):
        free_exact = max(_norm2(w.values - g.values, spec) for w in Ws) / gn
        cauchy = True
    return WaveOperatorReport(side, ts, inc, iso, inter, comp, tw, bool(cauchy), factors, free_exact, notes)
