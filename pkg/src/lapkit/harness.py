"""Verification experiments: probe-based operator norms, limiting-absorption
sweeps, trace identities, weighted estimates and commutator checks.

Every operator norm here is a lower bound obtained by probing.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .grid import (Field, GridSpec, annular_profile, fd_laplacian, fftn, from_radial, gaussian,
                   ifftn, lp_norm, pairing, radius, xi_squared)
from .perturb import Perturbation, WeightParams, ZeroPerturbation, mollifier_bump, weight_radial
from .resolvent import (DEFAULT_LADDER, ExtrapolationError, SolverConfig, SpectralPoint,
                        free_resolvent, neville_extrapolate, solve_perturbed)
from .spaces import (b_norm, bstar_norm, dual_restriction_exponent, restriction_exponent,
                     sobolev_norm, sobolev_values, x_norm_upper, x_star_norm)
from .special import (evaluate_ghat_on_sphere, herglotz_resolution, herglotz_wave, interior_mask,
                      sphere_quadrature)

GAMMA_LADDER = tuple(4.0 ** -k for k in range(5))      # 1, 1/4, ..., 1/256


# ----------------------------------------------------------------- norms

def make_norm(name: str, lams: Iterable[float] = ()) -> Callable[[Field], float]:
    """Norm by name: l2, b, bstar, xstar, x, lp:<p>, w:<alpha>,<p> (p may be 'pd' or 'pd*')."""
    lams = tuple(lams)

    def _p(tok: str, d: int) -> float:
        if tok == "pd":
            return restriction_exponent(d)
        if tok == "pd*":
            return dual_restriction_exponent(d)
        return float(tok)

    if name == "l2":
        return lambda f: lp_norm(f, 2)
    if name == "b":
        return b_norm
    if name == "bstar":
        return bstar_norm
    if name == "xstar":
        return x_star_norm
    if name == "x":
        return lambda f: x_norm_upper(f, lams=lams).value
    if name.startswith("lp:"):
        tok = name[3:]
        return lambda f: lp_norm(f, _p(tok, f.spec.d))
    if name.startswith("w:"):
        a, tok = name[2:].split(",")
        return lambda f: sobolev_norm(f, float(a), _p(tok, f.spec.d))
    raise ValueError(f"unknown norm {name!r}")


def _norm(n) -> Callable[[Field], float]:
    return make_norm(n) if isinstance(n, str) else n


# ---------------------------------------------------------------- probes

@dataclass
class ProbeFamily:
    name: str
    probes: list
    labels: list

    def __len__(self) -> int:
        return len(self.probes)

    def extend(self, other: "ProbeFamily") -> "ProbeFamily":
        return ProbeFamily(f"{self.name}+{other.name}", self.probes + other.probes,
                           self.labels + other.labels)

    def normalized(self, norm="l2") -> "ProbeFamily":
        nf = _norm(norm)
        out = []
        for f in self.probes:
            v = nf(f)
            out.append(f * (1.0 / v) if v > 0 else f)
        return ProbeFamily(self.name, out, list(self.labels))


def shell_bump(spec: GridSpec, j: int) -> Field:
    """Smooth radial bump supported in the dyadic shell D_j."""
    lo, hi = (0.0, 1.0) if j == 0 else (2.0 ** (j - 1), 2.0 ** j)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return from_radial(spec, lambda r: mollifier_bump((r - mid) / half) if j else mollifier_bump(r))


def build_probes(spec: GridSpec, lams: Sequence[float] = (), seed: int = 0, n_random: int = 4,
                 herglotz: bool = True) -> ProbeFamily:
    """Deterministic probe family, unit-normalised in L^2.

    Gaussians (several widths and centres), one smooth bump per complete
    dyadic shell, and for every lam > 0 sphere-concentrated packets
    chi_ann(D) applied to modulated Gaussians plus the Herglotz wave.
    """
    rng = np.random.default_rng(seed)
    probes, labels = [], []
    for w in (0.5, 1.0, 2.0, 4.0):
        probes.append(gaussian(spec, w))
        labels.append(f"gauss[w={w:g}]")
    for k in range(n_random):
        c = rng.uniform(-0.2, 0.2, spec.d) * spec.box
        w = float(rng.choice([0.7, 1.5, 3.0]))
        probes.append(gaussian(spec, w, center=c))
        labels.append(f"gauss[w={w:g},c{k}]")
    jc = int(math.floor(math.log2(spec.box / 2)))
    for j in range(0, jc + 1):
        probes.append(shell_bump(spec, j))
        labels.append(f"shell[{j}]")
    rho = np.sqrt(xi_squared(spec))
    for lam in lams:
        if lam <= 0:
            continue
        k = math.sqrt(lam)
        chi = annular_profile(rho, lam)
        for w in (spec.box / 16, spec.box / 8, spec.box / 4):
            for m in range(2):
                theta = rng.uniform(0, 2 * math.pi)
                dirv = np.zeros(spec.d)
                dirv[0], dirv[1] = math.cos(theta), math.sin(theta)
                g = gaussian(spec, w, momentum=k * dirv)
                probes.append(Field(spec, ifftn(fftn(g.values) * chi)))
                labels.append(f"packet[lam={lam:g},w={w:g},{m}]")
        if herglotz:
            probes.append(herglotz_wave(spec, lam))
            labels.append(f"herglotz[lam={lam:g}]")
    return ProbeFamily("default", probes, labels).normalized("l2")


def probe_operator_norm(op: Callable[[Field], Field], src_norm, dst_norm,
                        probes: ProbeFamily | Sequence[Field]) -> float:
    """max over probes of dst(op f) / src(f): a lower bound for the operator norm."""
    fs = probes.probes if isinstance(probes, ProbeFamily) else list(probes)
    if not fs:
        raise ValueError("empty probe family")
    s, t = _norm(src_norm), _norm(dst_norm)
    best = 0.0
    for f in fs:
        den = s(f)
        if den > 0:
            best = max(best, t(op(f)) / den)
    return best


# ----------------------------------------------------------------- sweep

@dataclass
class SweepRecord:
    lam: float
    eps: float
    side: str
    est_norm_x_to_xstar: float
    est_norm_elliptic: float
    est_norm_elliptic_box: float
    components: dict
    runtime: float
    solver_iterations: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def elliptic_symbol_sup(lam: float, eps: float, samples: int = 401) -> float:
    """max over Bloch plane waves e^{i xi.x} of ||R0 u||_{W^{1,2}} / ||u||_{W^{-1,2}}.

    A plane wave is an exact eigenvector of the free resolvent, with ratio
    (1+|xi|^2)/| |xi|^2 - z |; the radial frequencies sampled include sqrt(lam).
    """
    z = complex(lam, eps)
    top = 2.0 * math.sqrt(max(abs(lam), 1.0))
    rho = np.linspace(0.0, top, samples)
    if lam > 0:
        rho = np.append(rho, math.sqrt(lam))
    return float(np.max((1.0 + rho ** 2) / np.abs(rho ** 2 - z)))


def _component_ops(spec: GridSpec, lam: float, apply):
    d = spec.d
    chi = annular_profile(np.sqrt(xi_squared(spec)), lam)
    a = 1.0 / (d + 1)

    def comp(left, right):
        def op(f):
            v = sobolev_values(f.values, spec, right)
            v = apply(v)
            v = ifftn(fftn(v) * chi)
            return Field(spec, sobolev_values(v, spec, left))
        return op

    return {"B->B*": (comp(1, 1), "b", "bstar"),
            "Lp->Lp'": (comp(a, a), "lp:pd", "lp:pd*"),
            "Lp->B*": (comp(1, a), "lp:pd", "bstar"),
            "B->Lp'": (comp(a, 1), "b", "lp:pd*")}


def sweep_point(spec: GridSpec, lam: float, eps: float, probes: ProbeFamily,
                P: Perturbation | None = None, components: bool = True,
                x_cache: dict | None = None) -> SweepRecord:
    """Probe estimates of R0 (or R_L) at z = lam + i eps on the aperiodic box."""
    t0 = time.perf_counter()
    pt = SpectralPoint(lam, eps)
    iters = 0
    if P is None or isinstance(P, ZeroPerturbation):
        R = free_resolvent(spec, pt)
        apply = R.apply_array
    else:
        cfg = SolverConfig(realization="free")
        counter = [0]

        def apply(v):
            res = solve_perturbed(Field(spec, v), pt, P, cfg)
            counter[0] += res.iterations
            return res.field.values
    lams = (lam,) if lam > 0 else ()
    est_x = est_e = 0.0
    for k, f in enumerate(probes.probes):
        u = Field(spec, apply(f.values))
        key = (k, lam)
        if x_cache is not None and key in x_cache:
            xs = x_cache[key]
        else:
            xs = x_norm_upper(f, lams=lams).value
            if x_cache is not None:
                x_cache[key] = xs
        if xs > 0:
            est_x = max(est_x, x_star_norm(u) / xs)
        wm = sobolev_norm(f, -1, 2)
        if wm > 0:
            est_e = max(est_e, sobolev_norm(u, 1, 2) / wm)
    comps = {}
    if components and lam > 0:
        for name, (op, s, t) in _component_ops(spec, lam, apply).items():
            comps[name] = probe_operator_norm(op, s, t, probes)
    if P is not None and not isinstance(P, ZeroPerturbation):
        iters = counter[0]
        bloch = est_e
    else:
        bloch = max(est_e, elliptic_symbol_sup(lam, eps))
    return SweepRecord(float(lam), float(eps), pt.side or "+", est_x, bloch, est_e, comps,
                       time.perf_counter() - t0, iters)


def _sweep_task(args):
    spec, lam, eps, probes, P, components = args
    try:
        return sweep_point(spec, lam, eps, probes, P, components)
    except Exception as exc:       # flagged record, not a crash
        return SweepRecord(float(lam), float(eps), "+" if eps > 0 else "-", float("nan"),
                           float("nan"), float("nan"), {}, 0.0, 0, f"{type(exc).__name__}: {exc}")


def lap_sweep(spec: GridSpec, lams: Sequence[float], eps_ladder: Sequence[float],
              P: Perturbation | None = None, probes: ProbeFamily | None = None,
              components: bool = True, workers: int = 1, seed: int = 0) -> list[SweepRecord]:
    """One record per (lam, eps), ordered by (lam, eps) whatever the completion order."""
    lams = [float(l) for l in lams]
    if any(l == 0 for l in lams):
        raise ValueError("the sweep interval must not contain 0")
    if any(e == 0 for e in eps_ladder):
        raise ValueError("eps = 0 is not allowed in a sweep ladder")
    if probes is None:
        probes = build_probes(spec, [l for l in lams if l > 0][:1] + [l for l in lams if l > 0][-1:],
                              seed=seed)
    cells = [(spec, lam, float(e), probes, P, components) for lam in lams for e in eps_ladder]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            recs = list(ex.map(_sweep_task, cells))
    else:
        recs = [_sweep_task(c) for c in cells]
    return sorted(recs, key=lambda r: (r.lam, r.eps))


def plateau_ratio(records: Sequence[SweepRecord], attr: str, eps_small: float, eps_large: float) -> float:
    """sup over lam at eps_small divided by sup over lam at eps_large."""
    a = max(getattr(r, attr) for r in records if math.isclose(r.eps, eps_small))
    b = max(getattr(r, attr) for r in records if math.isclose(r.eps, eps_large))
    return a / b


# ----------------------------------------------------------------- trace

def phi_bump(r) -> np.ndarray:
    """exp(1 - 1/(1 - r^2)) on r < 1, zero outside; phi(0) = 1."""
    return mollifier_bump(r)


@dataclass
class TraceReport:
    lam: float
    side: str
    lhs: float
    lhs_error: float
    lhs_direct: float
    rhs: float
    c1: float
    relative_error: float
    sphere_integral: float
    r_values: list = field(default_factory=list)
    r_averages: list = field(default_factory=list)
    c2: float | None = None
    second_ratio: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def sphere_mass(g: Field, lam: float, resolution: int | None = None) -> float:
    """int over |xi| = sqrt(lam) of |g-hat|^2 d sigma, unitary transform."""
    res = resolution or herglotz_resolution(g.spec, lam)
    quad = sphere_quadrature(lam, g.spec.d, res)
    gh = evaluate_ghat_on_sphere(g, quad) * (2 * math.pi) ** (-g.spec.d / 2)
    return float(np.real(quad.integrate(np.abs(gh) ** 2)))


def sphere_null_probe(spec: GridSpec, lam: float, width: float = 1.0) -> Field:
    """g = (Lap + lam) phi with phi Gaussian: g-hat = (lam - |xi|^2) phi-hat vanishes on the sphere."""
    phi = gaussian(spec, width)
    return Field(spec, ifftn(fftn(phi.values) * (lam - xi_squared(spec))))


def trace_identity_check(g: Field, lam: float, side: str = "+",
                         ladder: Sequence[float] = DEFAULT_LADDER,
                         r_ladder: Sequence[float] | None = None, c2: float | None = None) -> TraceReport:
    """Im <R0(lam +- i eps) g, g> extrapolated to eps = 0 against c1 int_S |g-hat|^2.

    c1 = +-pi/(2 sqrt(lam)). The second identity is reported as the ratio
    R^{-1} int |R0(lam +- i0) g|^2 phi(x/R) dx / int_S |g-hat|^2 along r_ladder;
    if c2 is given the relative deviation from it is listed.
    """
    if not lam > 0:
        raise ValueError("trace identity needs lam > 0")
    spec = g.spec
    sgn = 1.0 if side == "+" else -1.0
    vals = []
    for e in ladder:
        u = free_resolvent(spec, SpectralPoint(lam, sgn * e)).apply_array(g.values)
        vals.append(np.imag(pairing(Field(spec, u), g)))
    lim, err = neville_extrapolate(list(ladder), [np.array(v) for v in vals])
    lhs, lhs_err = float(np.real(lim)), float(err)
    floor = 1e-8 * lp_norm(g, 2) ** 2
    if not lhs_err <= 1e-4 * max(abs(lhs), floor):
        raise ExtrapolationError(f"trace extrapolation did not settle (error {lhs_err:.2e})")
    u0 = free_resolvent(spec, SpectralPoint(lam, 0.0, side)).apply_array(g.values)
    direct = float(np.imag(pairing(Field(spec, u0), g)))
    mass = sphere_mass(g, lam)
    c1 = sgn * math.pi / (2 * math.sqrt(lam))
    rhs = c1 * mass
    scale = max(abs(rhs), abs(lhs), 1e-300)
    rep = TraceReport(lam, side, lhs, lhs_err, direct, rhs, c1, abs(lhs - rhs) / scale, mass)
    if r_ladder:
        r = radius(spec)
        for R in r_ladder:
            avg = float(np.sum(np.abs(u0) ** 2 * phi_bump(r / R)) * spec.cell_volume / R)
            rep.r_values.append(float(R))
            rep.r_averages.append(avg)
            rep.second_ratio.append(avg / mass if mass > 0 else float("nan"))
        rep.c2 = c2
    return rep


# -------------------------------------------------------------- weighted

@dataclass
class WeightedReport:
    lam: float
    N: float
    gammas: list
    ratios: list
    numerators: list
    denominators: list
    regime: str
    bounded: bool
    variation: float
    slope: float | None
    shell_radii: list
    shell_averages: list

    def to_dict(self) -> dict:
        return asdict(self)


def shell_averages(u: Field, radii: Sequence[float] | None = None, lam: float | None = None) -> tuple[list, list]:
    """R^{-1} int_{R <= |x| <= 2R} |u|^2 for R with 2R inside the inscribed ball.

    For lam > 0 the default radii are (pi/sqrt(lam)) 2^j, so every annulus
    spans whole periods of the cos^2 oscillation of a generalized eigenfunction.
    """
    spec = u.spec
    if radii is None:
        base = math.pi / math.sqrt(lam) if lam and lam > 0 else 1.0
        radii = []
        R = base
        while 2 * R <= spec.box / 2:
            radii.append(R)
            R *= 2
    r = radius(spec)
    a = np.abs(u.values) ** 2
    out = []
    for R in radii:
        m = (r >= R) & (r <= 2 * R)
        out.append(float(np.sum(a[m]) * spec.cell_volume / R))
    return list(map(float, radii)), out


def interior_residual(u: Field, lam: float) -> float:
    """||(Lap + lam) u|| / ((1 + |lam|) ||u||) on the interior mask, 16th-order stencil.

    Local, so it is meaningful for fields that are not periodic on the box.
    """
    m = interior_mask(u.spec, 0.1, pad=8)
    res = fd_laplacian(u).values + lam * u.values
    den = (1.0 + abs(lam)) * np.linalg.norm(u.values[m])
    return float(np.linalg.norm(res[m]) / den) if den > 0 else 0.0


def schwartz_pairs(spec: GridSpec, count: int = 10, seed: int = 1) -> list[Field]:
    """Modulated Gaussians u; the partner f = (Lap + lam) u is formed by the check itself."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        w = rng.uniform(0.7, 2.5)
        c = rng.uniform(-3, 3, spec.d)
        p = rng.uniform(-1.5, 1.5, spec.d)
        out.append(gaussian(spec, w, center=c, momentum=p))
    return out


def sup_ratio_variation(reports: Sequence["WeightedReport"]) -> float:
    """max/min over gamma of sup over pairs of r(gamma)."""
    R = np.array([r.ratios for r in reports])
    C = R.max(axis=0)
    return float(C.max() / C.min())


def weighted_estimate_check(u: Field, lam: float, N: float, gammas: Sequence[float] = GAMMA_LADDER,
                            zero_tol: float = 1e-8, bound_factor: float = 2.0) -> WeightedReport:
    """r(gamma) = ||mu u||_{X*} / ||mu (Lap + lam) u||_X along the gamma ladder.

    When (Lap + lam) u vanishes to ``zero_tol`` in the interior the
    counterexample regime is reported: the slope of log ||mu u||_{X*}
    against log gamma and the shell averages of |u|^2. Otherwise the
    verdict is bounded when max r(gamma) <= bound_factor r(1).
    """
    spec = u.spec
    f = Field(spec, ifftn(fftn(u.values) * (lam - xi_squared(spec))))
    r = radius(spec)
    lams = (lam,) if lam > 0 else ()
    counter = interior_residual(u, lam) <= zero_tol
    nums, dens, ratios = [], [], []
    for gam in gammas:
        mu = weight_radial(r, WeightParams(N, gam))
        nums.append(x_star_norm(Field(spec, mu * u.values)))
        if counter:
            dens.append(0.0)
            ratios.append(float("inf"))
        else:
            den = x_norm_upper(Field(spec, mu * f.values), lams=lams).value
            dens.append(den)
            ratios.append(nums[-1] / den)
    slope = None
    if len(gammas) > 1:
        slope = float(np.polyfit(np.log(gammas), np.log(nums), 1)[0])
    if counter:
        regime, bounded, variation = "counterexample", False, float("inf")
    else:
        regime = "regular"
        variation = max(ratios) / min(ratios)
        bounded = max(ratios) <= bound_factor * ratios[0]
    radii, avgs = shell_averages(u, lam=lam)
    return WeightedReport(float(lam), float(N), list(map(float, gammas)), ratios, nums, dens,
                          regime, bool(bounded), float(variation), slope, radii, avgs)


# ----------------------------------------------------------- commutation

@dataclass
class CommutationReport:
    N: float
    gammas: list
    norms: dict          # (alpha, operator, space) -> list over gammas
    uniform: dict        # same keys -> max/min over the ladder
    saturation: dict     # same keys -> last / second-to-last ladder value
    passed: bool
    bounded: bool
    factor: float

    def to_dict(self) -> dict:
        key = lambda k: "|".join(map(str, k))
        return {"N": self.N, "gammas": self.gammas, "factor": self.factor, "passed": self.passed,
                "bounded": self.bounded,
                "norms": {key(k): v for k, v in self.norms.items()},
                "uniform": {key(k): v for k, v in self.uniform.items()},
                "saturation": {key(k): v for k, v in self.saturation.items()}}


COMMUTATION_SPACES = ("lp:pd", "l2", "lp:pd*", "b", "bstar")


def commutation_check(spec: GridSpec, alphas: Sequence[float], N: float,
                      gammas: Sequence[float] = GAMMA_LADDER, probes: ProbeFamily | None = None,
                      spaces: Sequence[str] = COMMUTATION_SPACES, factor: float = 2.0) -> CommutationReport:
    """Probe norms of mu S_a mu^-1 S_-a and S_a mu S_-a mu^-1 on several spaces.

    ``passed`` asks for max/min over the ladder <= factor. ``bounded`` asks
    only that the estimates level off: the last ladder step changes the
    value by at most 25%.
    """
    if probes is None:
        probes = build_probes(spec, herglotz=False)
    r = radius(spec)
    norms, unif = {}, {}
    for a in alphas:
        if not -2 <= a <= 2:
            raise ValueError("alpha must lie in [-2, 2]")
        for gam in gammas:
            mu = weight_radial(r, WeightParams(N, gam))

            def t1(f, mu=mu, a=a):
                v = sobolev_values(f.values, spec, -a) / mu
                return Field(spec, mu * sobolev_values(v, spec, a))

            def t2(f, mu=mu, a=a):
                v = sobolev_values(f.values / mu, spec, -a) * mu
                return Field(spec, sobolev_values(v, spec, a))

            for opname, op in (("mu S mu^-1 S^-1", t1), ("S mu S^-1 mu^-1", t2)):
                for sp in spaces:
                    est = probe_operator_norm(op, sp, sp, probes)
                    norms.setdefault((float(a), opname, sp), []).append(est)
    sat = {}
    for k, v in norms.items():
        unif[k] = max(v) / min(v)
        sat[k] = v[-1] / v[-2] if len(v) > 1 else 1.0
    passed = all(u <= factor for u in unif.values())
    bounded = all(x <= 1.25 for x in sat.values())
    return CommutationReport(float(N), list(map(float, gammas)), norms, unif, sat, passed,
                             bounded, factor)
