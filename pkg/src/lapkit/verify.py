"""Invariant suite behind ``lapkit verify`` and the exact-identity checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .grid import (Field, GridSpec, field_from_bytes, field_to_bytes, frequency_l2, gaussian,
                   pairing, to_frequency)
from .resolvent import SpectralPoint, apply_helmholtz, apply_r0
from .spaces import b_norm, bstar_norm, l2_norm, sobolev_values, x_norm_upper, x_star_norm


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _check(name: str, value: float, tol: float, detail: str = "") -> Check:
    value = float(value)
    return Check(name, value, tol, bool(np.isfinite(value) and value <= tol), detail)


def random_fields(spec: GridSpec, count: int, seed: int = 0) -> list[Field]:
    rng = np.random.default_rng(seed)
    return [Field(spec, rng.normal(size=spec.shape) + 1j * rng.normal(size=spec.shape))
            for _ in range(count)]


def identity_checks(spec: GridSpec, count: int = 100, seed: int = 0, tol: float = 1e-10) -> list[Check]:
    """Exact discrete identities on ``count`` random fields (worst relative deviation)."""
    rng = np.random.default_rng(seed + 1)
    fields = random_fields(spec, count, seed)
    partners = random_fields(spec, count, seed + 7)
    helm = sob = pars = conj = 0.0
    chain = {"l2": 0.0, "sobolev": 0.0, "x": 0.0, "b": 0.0}
    for g, u in zip(fields, partners):
        pt = SpectralPoint(rng.uniform(0.5, 2.0), rng.uniform(0.01, 0.1))
        ng = l2_norm(g)
        r = apply_r0(g, pt)
        helm = max(helm, l2_norm(apply_helmholtz(r, pt.z) - g) / ng)
        a = rng.uniform(-2.0, 2.0)
        back = sobolev_values(sobolev_values(g.values, spec, a), spec, -a)
        sob = max(sob, l2_norm(Field(spec, back - g.values)) / ng)
        pars = max(pars, abs(frequency_l2(to_frequency(g)) - ng) / ng)
        lhs = np.conj(apply_r0(g, pt).values)
        rhs = apply_r0(Field(spec, np.conj(g.values)), pt.conjugate()).values
        conj = max(conj, np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs))
        p = abs(pairing(u, g))
        s1u = math.sqrt(np.sum(np.abs(sobolev_values(u.values, spec, 1.0)) ** 2) * spec.cell_volume)
        sm1g = math.sqrt(np.sum(np.abs(sobolev_values(g.values, spec, -1.0)) ** 2) * spec.cell_volume)
        bounds = {"l2": l2_norm(u) * ng, "sobolev": s1u * sm1g,
                  "x": x_star_norm(u) * x_norm_upper(g).value, "b": bstar_norm(u) * b_norm(g)}
        for k, v in bounds.items():
            chain[k] = max(chain[k], p / v - 1.0)
    tag = f"d={spec.d} n={spec.n}"
    out = [_check(f"helmholtz_inverse[{tag}]", helm, tol),
           _check(f"sobolev_inverse[{tag}]", sob, tol),
           _check(f"parseval[{tag}]", pars, tol),
           _check(f"r0_conjugation[{tag}]", conj, tol)]
    out += [_check(f"pairing_bound_{k}[{tag}]", max(v, 0.0), tol, "excess of |<u,f>| over the bound")
            for k, v in chain.items()]
    return out


# ------------------------------------------------------------ suite

def _kernel_checks() -> list[Check]:
    from scipy.special import hankel1
    from .special import KernelParams, kernel_bound_constants, radial_kernel

    r = np.linspace(0.1, 5.0, 60)
    worst3 = worst2 = 0.0
    for z in (0.5, 1.0, 2.0, complex(1.0, 0.5)):
        k = np.sqrt(complex(z))
        ref = np.exp(1j * k * r) / (4 * math.pi * r)
        got = radial_kernel(r, KernelParams(z, 3, side="+"))
        worst3 = max(worst3, float(np.max(np.abs(got - ref) / np.abs(ref))))
        if complex(z).imag == 0:
            ref2 = 0.25j * hankel1(0, k.real * r)
            got2 = radial_kernel(r, KernelParams(z, 2, side="+"))
            worst2 = max(worst2, float(np.max(np.abs(got2 - ref2) / np.abs(ref2))))
    const = kernel_bound_constants(3, 0.5, n_z=6, n_r=20)["constant"]
    return [_check("kernel_d3_closed_form", worst3, 1e-9),
            _check("kernel_d2_hankel", worst2, 1e-6),
            _check("kernel_bound_finite", 0.0 if math.isfinite(const) else math.inf, 0.0)]


def _weight_checks(d: int) -> list[Check]:
    """Weighted derivative bounds: the sampled sup levels off as gamma -> 0."""
    from .perturb import WeightParams, weight_bound_check

    worst = 0.0
    for N in (1, 2):
        a, b = (weight_bound_check(WeightParams(N, g), d, samples=4000, rmax=1e6)["sup"]
                for g in (4.0 ** -6, 4.0 ** -8))
        worst = max(worst, b / a - 1.0)
    return [_check("weight_derivative_bounds", worst, 0.1, "growth of the sup over the last ladder step")]


def _trace_checks(spec: GridSpec) -> list[Check]:
    from .harness import sphere_null_probe, trace_identity_check

    g = gaussian(spec, 1.0)
    rep = trace_identity_check(g, 1.0, "+")
    null = trace_identity_check(sphere_null_probe(spec, 1.0), 1.0, "+")
    gen = abs(rep.lhs)
    return [_check("trace_identity_gaussian", rep.relative_error, 1e-2),
            _check("trace_identity_null_probe", max(abs(null.lhs), abs(null.rhs)) / gen, 1e-6)]


def _dynamics_checks(spec: GridSpec) -> list[Check]:
    from .dynamics import (EvolutionConfig, SpectralWindow, evolve, free_gaussian, spectral_project)
    from .perturb import catalog_potential

    V = catalog_potential("gaussian", spec, {"V0": 2.0, "width": 1.0})
    f = gaussian(spec, 1.5, center=[1.0] * spec.d)
    cfg = EvolutionConfig(dt=0.01)
    u = evolve(f, 1.0, V, cfg)
    unit = abs(l2_norm(u) - l2_norm(f)) / l2_norm(f)
    group = l2_norm(evolve(evolve(f, 0.4, V, cfg), 0.6, V, cfg) - u) / l2_norm(f)
    free = max(l2_norm(evolve(gaussian(spec, 2.0), t) - free_gaussian(spec, 2.0, t, images=1))
               for t in (0.5, 1.0, 2.0))
    small = GridSpec(spec.d, 32, spec.box / 2)
    Vs = catalog_potential("gaussian", small, {"V0": 2.0, "width": 1.0})
    pr = spectral_project(gaussian(small, 1.5, center=[1.0] * spec.d), SpectralWindow(0.5, 1.5), Vs)
    return [_check("evolve_unitarity", unit, 1e-8),
            _check("evolve_group_law", group, 1e-8),
            _check("evolve_free_gaussian", free, 1e-6),
            _check("projection_idempotence", pr.idempotence_defect, 1e-6),
            _check("projection_symmetry", pr.symmetry_defect, 1e-6)]


def _perturb_checks(spec: GridSpec) -> list[Check]:
    from .perturb import catalog_potential, kato_convolve, kato_kernel_total

    P = catalog_potential("gaussian", spec, {"V0": 1.0, "width": 1.0})
    rep = P.report
    one = Field(spec, np.ones(spec.shape))
    delta = 0.5
    kc = kato_convolve(one, delta).values.real
    exact = kato_kernel_total(spec.d, delta)
    return [_check("gaussian_admissible", 0.0 if rep.passed else 1.0, 0.0),
            _check("kato_constant_field", float(np.max(np.abs(kc - exact))) / exact, 1e-6)]


def _format_checks(spec: GridSpec) -> list[Check]:
    f = random_fields(spec, 1, 3)[0]
    back = field_from_bytes(field_to_bytes(f))
    same = back.spec == f.spec and np.array_equal(back.values, f.values)
    return [_check("lapf1_round_trip", 0.0 if same else 1.0, 0.0)]


SUITE: dict[str, Callable[[GridSpec], list[Check]]] = {
    "identities": lambda s: identity_checks(s),
    "kernel": lambda s: _kernel_checks(),
    "weights": lambda s: _weight_checks(s.d),
    "trace": _trace_checks,
    "dynamics": _dynamics_checks,
    "perturb": _perturb_checks,
    "format": _format_checks,
}


def verify_suite(n: int = 64, box: float = 32.0, d: int = 2, fields: int = 100, seed: int = 0) -> list[Check]:
    spec = GridSpec(d, n, box)
    out = []
    for name, fn in SUITE.items():
        if name == "identities":
            out += identity_checks(spec, fields, seed)
        else:
            out += fn(spec)
    return out
