"""Dyadic-shell norms (B, B*, Y), Sobolev norms and the X / X* pair."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid import (Field, GridSpec, PHYSICAL, RepresentationError, annular_profile,
                   apply_symbol_array, fftn, ifftn, lp_norm, pairing, radius, xi_squared)


def restriction_exponent(d: int) -> float:
    """p_d = (2d+2)/(d+3)."""
    return (2 * d + 2) / (d + 3)


def dual_restriction_exponent(d: int) -> float:
    """p'_d = (2d+2)/(d-1)."""
    return (2 * d + 2) / (d - 1)


@dataclass(frozen=True, eq=False)
class ShellDecomposition:
    """Dyadic shells D_0 = {|x| <= 1}, D_j = {2^(j-1) < |x| <= 2^j}.

    Points on a sphere |x| = 2^j belong to the lower index j.
    """

    spec: GridSpec
    labels: np.ndarray
    j_max: int

    @property
    def count(self) -> int:
        return self.j_max + 1

    def mask(self, j: int) -> np.ndarray:
        return self.labels == j

    def indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels.reshape(-1) == j)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=self.count)


def shell_index(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        j = np.ceil(np.log2(np.maximum(r, 1.0)))
    return j.astype(int)


@functools.lru_cache(maxsize=32)
def shells(spec: GridSpec) -> ShellDecomposition:
    labels = shell_index(radius(spec))
    labels.setflags(write=False)
    j_max = int(math.ceil(math.log2(math.sqrt(spec.d) * spec.box / 2)))
    j_max = max(j_max, int(labels.max()))
    return ShellDecomposition(spec, labels, j_max)


def _values(f) -> np.ndarray:
    if isinstance(f, Field):
        if f.rep != PHYSICAL:
            raise RepresentationError("shell norms expect physical fields")
        return f.values
    return np.asarray(f)


def _shells_for(f, sh: ShellDecomposition | None) -> ShellDecomposition:
    if sh is not None:
        return sh
    if isinstance(f, Field):
        return shells(f.spec)
    raise ValueError("raw arrays need an explicit shell decomposition")


def shell_l2(f, sh: ShellDecomposition | None = None) -> np.ndarray:
    """||f||_{L^2(D_j)} for j = 0..j_max."""
    sh = _shells_for(f, sh)
    v = _values(f)
    mass = np.bincount(sh.labels.reshape(-1), weights=np.abs(v.reshape(-1)) ** 2,
                       minlength=sh.count)
    return np.sqrt(mass * sh.spec.cell_volume)


def shell_sup(f, sh: ShellDecomposition | None = None) -> np.ndarray:
    """max |f| over the samples of each shell (0 for empty shells)."""
    sh = _shells_for(f, sh)
    out = np.zeros(sh.count)
    np.maximum.at(out, sh.labels.reshape(-1), np.abs(_values(f)).reshape(-1))
    return out


def _weights(sh: ShellDecomposition, power: float) -> np.ndarray:
    return 2.0 ** (power * np.arange(sh.count))


def b_norm(f, sh: ShellDecomposition | None = None) -> float:
    """sum_j 2^(j/2) ||f||_{L^2(D_j)}."""
    sh = _shells_for(f, sh)
    return float(np.sum(_weights(sh, 0.5) * shell_l2(f, sh)))


def bstar_norm(u, sh: ShellDecomposition | None = None) -> float:
    """sup_j 2^(-j/2) ||u||_{L^2(D_j)}."""
    sh = _shells_for(u, sh)
    return float(np.max(_weights(sh, -0.5) * shell_l2(u, sh)))


def y_norm(V, sh: ShellDecomposition | None = None) -> float:
    """sum_j 2^j max_{D_j} |V|."""
    sh = _shells_for(V, sh)
    return float(np.sum(_weights(sh, 1.0) * shell_sup(V, sh)))


def l2_norm(f: Field) -> float:
    return lp_norm(f, 2)


def sobolev_values(values: np.ndarray, spec: GridSpec, alpha: float) -> np.ndarray:
    if alpha == 0:
        return values
    return apply_symbol_array(values, (1.0 + xi_squared(spec)) ** (alpha / 2.0))


def sobolev_norm(u: Field, alpha: float, p: float) -> float:
    """||S_alpha u||_{L^p}."""
    if u.rep != PHYSICAL:
        raise RepresentationError("sobolev_norm expects a physical field")
    return lp_norm(Field(u.spec, sobolev_values(u.values, u.spec, alpha)), p)


def _lp_array(values: np.ndarray, p: float, dv: float) -> float:
    a = np.abs(values)
    m = a.max()
    if m == 0:
        return 0.0
    if p == np.inf:
        return float(m)
    return float(m * (np.sum((a / m) ** p) * dv) ** (1.0 / p))


def x_star_components(u: Field, sh: ShellDecomposition | None = None) -> tuple[float, float]:
    """(||S_{1/(d+1)} u||_{L^{p'_d}}, ||S_1 u||_{B*})."""
    if u.rep != PHYSICAL:
        raise RepresentationError("x_star_norm expects a physical field")
    spec = u.spec
    sh = sh or shells(spec)
    d = spec.d
    xi2 = xi_squared(spec)
    U = fftn(u.values)
    lp_part = ifftn(U * (1.0 + xi2) ** (0.5 / (d + 1)))
    b_part = ifftn(U * (1.0 + xi2) ** 0.5)
    return (_lp_array(lp_part, dual_restriction_exponent(d), spec.cell_volume),
            bstar_norm(b_part, sh))


def x_star_norm(u: Field, sh: ShellDecomposition | None = None) -> float:
    """max(||S_{1/(d+1)} u||_{L^{p'_d}}, ||S_1 u||_{B*})."""
    return max(x_star_components(u, sh))


@dataclass(frozen=True)
class XNormBound:
    """Upper bound for the X infimum over a declared splitting family."""

    value: float
    label: str
    candidates: dict = field(default_factory=dict)
    surrogate: bool = True


def _x_pieces(F: np.ndarray, spec: GridSpec, sh: ShellDecomposition) -> tuple[float, float]:
    """(||S_{-1/(d+1)} f||_{p_d}, ||S_{-1} f||_B) for frequency data F."""
    d = spec.d
    xi2 = xi_squared(spec)
    a = ifftn(F * (1.0 + xi2) ** (-0.5 / (d + 1)))
    b = ifftn(F * (1.0 + xi2) ** -0.5)
    return (_lp_array(a, restriction_exponent(d), spec.cell_volume), b_norm(b, sh))


def x_norm_upper(f: Field, sh: ShellDecomposition | None = None,
                 lams: Iterable[float] = ()) -> XNormBound:
    """min over splittings f = f1 + f2 of ||S_{-1/(d+1)} f1||_{p_d} + ||S_{-1} f2||_B.

    The family is {(f, 0), (0, f)} plus, for each lam, the frequency splits
    (chi f, (1-chi) f) and ((1-chi) f, chi f) with chi the smooth annular
    cutoff around |xi| = sqrt(lam).
    """
    if f.rep != PHYSICAL:
        raise RepresentationError("x_norm_upper expects a physical field")
    spec = f.spec
    sh = sh or shells(spec)
    F = fftn(f.values)
    lp_all, b_all = _x_pieces(F, spec, sh)
    cands = {"lp": lp_all, "b": b_all}
    for lam in lams:
        chi = annular_profile(np.sqrt(xi_squared(spec)), lam)
        lp_in, b_in = _x_pieces(F * chi, spec, sh)
        lp_out, b_out = _x_pieces(F * (1.0 - chi), spec, sh)
        cands[f"annulus[{lam:g}]:lp_in"] = lp_in + b_out
        cands[f"annulus[{lam:g}]:b_in"] = b_in + lp_out
    label = min(cands, key=cands.get)
    return XNormBound(float(cands[label]), label, cands)


def dual_probes(f: Field, sh: ShellDecomposition | None = None) -> list[Field]:
    """Test functions that nearly attain the duality for either X component.

    With g = S_{-1/(d+1)} f, phi = S_{-1/(d+1)}(|g|^(p-2) g) is the Hoelder
    extremiser for the L^{p_d} part; with psi = S_{-1} f, phi = S_{-1} chi,
    chi = sum_j 2^(j/2) psi 1_{D_j} / ||psi||_{L^2(D_j)} is extremal for B.
    """
    spec = f.spec
    sh = sh or shells(spec)
    d = spec.d
    p = restriction_exponent(d)
    xi2 = xi_squared(spec)
    F = fftn(f.values)
    g = ifftn(F * (1.0 + xi2) ** (-0.5 / (d + 1)))
    holder = np.abs(g) ** (p - 2) * g if np.any(g) else g
    holder = np.where(np.isfinite(holder), holder, 0)
    phi_lp = ifftn(fftn(holder) * (1.0 + xi2) ** (-0.5 / (d + 1)))
    psi = ifftn(F * (1.0 + xi2) ** -0.5)
    norms = shell_l2(psi, sh)
    scale = np.where(norms > 0, _weights(sh, 0.5) / np.where(norms > 0, norms, 1.0), 0.0)
    chi = psi * scale[sh.labels]
    phi_b = ifftn(fftn(chi) * (1.0 + xi2) ** -0.5)
    return [Field(spec, phi_lp), Field(spec, phi_b)]


def duality_lower_bound(f: Field, probes: Sequence[Field], sh: ShellDecomposition | None = None) -> float:
    """max over probes of |<f, phi>| / ||phi||_{X*}."""
    best = 0.0
    for phi in probes:
        xs = x_star_norm(phi, sh)
        if xs > 0:
            best = max(best, abs(pairing(f, phi)) / xs)
    return best


@dataclass(frozen=True)
class NormReport:
    b: float
    b_star: float
    y: float
    l2: float
    x_star: float
    x_upper: float
    x_upper_label: str
    w_alpha_p: float | None = None
    alpha: float | None = None
    p: float | None = None
    x_upper_surrogate: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def norm_report(f: Field, alpha_p: tuple[float, float] | None = None,
                lams: Iterable[float] = ()) -> NormReport:
    sh = shells(f.spec)
    xu = x_norm_upper(f, sh, lams)
    w = a = p = None
    if alpha_p is not None:
        a, p = alpha_p
        w = sobolev_norm(f, a, p)
    return NormReport(b=b_norm(f, sh), b_star=bstar_norm(f, sh), y=y_norm(f, sh),
                      l2=l2_norm(f), x_star=x_star_norm(f, sh), x_upper=xu.value,
                      x_upper_label=xu.label, w_alpha_p=w, alpha=a, p=p)
