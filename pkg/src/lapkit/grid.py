"""Periodic grids on [-L/2, L/2)^d with exact FFT Fourier multipliers.

The discrete model is the ground truth for algebraic identities: every
multiplier is applied exactly on the dual lattice xi_k = 2*pi*k/L, and the
transform is the unitary DFT, so physical and frequency representations are
exact mutual inverses up to round-off.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import fft as _sfft

PHYSICAL = "physical"
FREQUENCY = "frequency"

LAPF_MAGIC = b"LAPF"
LAPF_VERSION = 1
_LAPF_HEADER = struct.Struct("<IIdB")


class GridError(ValueError):
    """Invalid grid, mismatched grids or malformed field data."""


class RepresentationError(GridError):
    """A field was passed in the wrong (physical/frequency) representation."""


class SingularSymbolError(ArithmeticError):
    """A Fourier multiplier is not finite on some lattice point."""


def is_fft_size(n: int) -> bool:
    """Even n >= 2 whose prime factors are all in {2, 3, 5}."""
    if n < 2 or n % 2:
        return False
    for p in (2, 3, 5):
        while n % p == 0:
            n //= p
    return n == 1


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid of ``n`` points per axis on a box of side ``box``."""

    d: int
    n: int
    box: float

    def __post_init__(self):
        if self.d not in (2, 3):
            raise GridError(f"dimension must be 2 or 3, got {self.d}")
        if not is_fft_size(int(self.n)):
            raise GridError(f"points per axis must be even and 5-smooth, got {self.n}")
        if not (self.box > 0 and math.isfinite(self.box)):
            raise GridError(f"box side must be positive, got {self.box}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "box", float(self.box))

    @property
    def h(self) -> float:
        return self.box / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def dual_spacing(self) -> float:
        return 2.0 * math.pi / self.box

    @property
    def origin_index(self) -> tuple[int, ...]:
        return (self.n // 2,) * self.d

    def to_dict(self) -> dict:
        return {"d": self.d, "n": self.n, "box": self.box}


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@functools.lru_cache(maxsize=64)
def axis_points(spec: GridSpec) -> np.ndarray:
    """1-D sample positions -L/2 + i*h."""
    return _readonly(-0.5 * spec.box + spec.h * np.arange(spec.n))


@functools.lru_cache(maxsize=64)
def axis_frequencies(spec: GridSpec) -> np.ndarray:
    """1-D dual lattice in FFT order."""
    return _readonly(2.0 * np.pi * np.fft.fftfreq(spec.n, d=spec.h))


def _sparse(spec: GridSpec, v: np.ndarray) -> tuple[np.ndarray, ...]:
    out = []
    for axis in range(spec.d):
        shape = [1] * spec.d
        shape[axis] = spec.n
        out.append(_readonly(v.reshape(shape)))
    return tuple(out)


@functools.lru_cache(maxsize=64)
def coordinates(spec: GridSpec) -> tuple[np.ndarray, ...]:
    """Sparse (broadcastable) coordinate arrays x_1, ..., x_d."""
    return _sparse(spec, axis_points(spec))


@functools.lru_cache(maxsize=64)
def frequencies(spec: GridSpec) -> tuple[np.ndarray, ...]:
    """Sparse (broadcastable) dual-lattice arrays xi_1, ..., xi_d (FFT order)."""
    return _sparse(spec, axis_frequencies(spec))


@functools.lru_cache(maxsize=32)
def radius(spec: GridSpec) -> np.ndarray:
    r2 = sum(c**2 for c in coordinates(spec))
    return _readonly(np.sqrt(r2))


@functools.lru_cache(maxsize=32)
def xi_squared(spec: GridSpec) -> np.ndarray:
    return _readonly(np.asarray(sum(k**2 for k in frequencies(spec)), dtype=float))


@functools.lru_cache(maxsize=32)
def _checkerboard(spec: GridSpec) -> np.ndarray:
    # (-1)^(k_1+...+k_d) for the shift x_0 = -L/2 in the continuum transform
    k = np.fft.fftfreq(spec.n, d=1.0 / spec.n).astype(int)
    s = np.where(k % 2 == 0, 1.0, -1.0)
    out = np.ones(spec.shape)
    for axis in range(spec.d):
        shape = [1] * spec.d
        shape[axis] = spec.n
        out = out * s.reshape(shape)
    return _readonly(out)


def fftn(a: np.ndarray) -> np.ndarray:
    return _sfft.fftn(a, norm="ortho")


def ifftn(a: np.ndarray) -> np.ndarray:
    return _sfft.ifftn(a, norm="ortho")


class Field:
    """Immutable complex samples of a function on a :class:`GridSpec`.

    ``values`` has shape ``spec.shape``; its C-order flattening is the
    axis-major sample order used by the LAPF1 format.
    """

    __slots__ = ("spec", "values", "rep")

    def __init__(self, spec: GridSpec, values, rep: str = PHYSICAL):
        if rep not in (PHYSICAL, FREQUENCY):
            raise GridError(f"unknown representation {rep!r}")
        arr = np.array(values, dtype=np.complex128, copy=True)
        if arr.size != spec.size:
            raise GridError(f"expected {spec.size} samples, got {arr.size}")
        arr = arr.reshape(spec.shape)
        arr.setflags(write=False)
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "rep", rep)

    def __setattr__(self, name, value):
        raise AttributeError("Field is immutable")

    def __reduce__(self):
        return (Field, (self.spec, self.values, self.rep))

    def __repr__(self):
        return f"Field(d={self.spec.d}, n={self.spec.n}, box={self.spec.box}, rep={self.rep})"

    @property
    def samples(self) -> np.ndarray:
        return self.values.reshape(-1)

    def _check(self, other: "Field") -> None:
        if other.spec != self.spec:
            raise GridError("fields live on different grids")
        if other.rep != self.rep:
            raise RepresentationError("fields are in different representations")

    def _coerce(self, other):
        if isinstance(other, Field):
            self._check(other)
            return other.values
        return other

    def __add__(self, other):
        return Field(self.spec, self.values + self._coerce(other), self.rep)

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.spec, self.values - self._coerce(other), self.rep)

    def __rsub__(self, other):
        return Field(self.spec, self._coerce(other) - self.values, self.rep)

    def __mul__(self, other):
        return Field(self.spec, self.values * self._coerce(other), self.rep)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.spec, self.values / self._coerce(other), self.rep)

    def __neg__(self):
        return Field(self.spec, -self.values, self.rep)

    def conj(self) -> "Field":
        if self.rep != PHYSICAL:
            raise RepresentationError("conjugation is defined on physical fields")
        return Field(self.spec, np.conj(self.values), self.rep)

    def abs(self) -> np.ndarray:
        return np.abs(self.values)

    def with_values(self, values) -> "Field":
        return Field(self.spec, values, self.rep)


def zeros(spec: GridSpec) -> Field:
    return Field(spec, np.zeros(spec.shape))


def from_function(spec: GridSpec, func: Callable[..., np.ndarray]) -> Field:
    """Sample ``func(x_1, ..., x_d)`` (broadcasting arrays) on the grid."""
    vals = np.broadcast_to(func(*coordinates(spec)), spec.shape)
    return Field(spec, vals)


def from_radial(spec: GridSpec, func: Callable[[np.ndarray], np.ndarray]) -> Field:
    return Field(spec, func(radius(spec)))


def gaussian(spec: GridSpec, width: float = 1.0, center: Sequence[float] | None = None,
             momentum: Sequence[float] | None = None) -> Field:
    """exp(-|x-c|^2/width^2) * exp(i p.x)."""
    c = np.zeros(spec.d) if center is None else np.asarray(center, float)
    xs = coordinates(spec)
    r2 = sum((x - ci) ** 2 for x, ci in zip(xs, c))
    vals = np.exp(-r2 / width**2)
    if momentum is not None:
        vals = vals * np.exp(1j * sum(p * x for p, x in zip(momentum, xs)))
    return Field(spec, np.broadcast_to(vals, spec.shape))


def plane_wave(spec: GridSpec, k: Sequence[int]) -> Field:
    """exp(i x.xi_0) for the lattice frequency xi_0 = 2*pi*k/L."""
    if len(k) != spec.d:
        raise GridError("lattice index must have d components")
    xi0 = [spec.dual_spacing * int(ki) for ki in k]
    return from_function(spec, lambda *xs: np.exp(1j * sum(q * x for q, x in zip(xi0, xs))))


def to_frequency(f: Field) -> Field:
    if f.rep != PHYSICAL:
        raise RepresentationError("to_frequency expects a physical field")
    return Field(f.spec, fftn(f.values), FREQUENCY)


def to_physical(f: Field) -> Field:
    if f.rep != FREQUENCY:
        raise RepresentationError("to_physical expects a frequency field")
    return Field(f.spec, ifftn(f.values), PHYSICAL)


def lattice_transform(f: Field) -> np.ndarray:
    """Continuum-normalised transform h^d sum_x f(x) exp(-i x.xi) on the lattice."""
    F = f.values if f.rep == FREQUENCY else fftn(f.values)
    spec = f.spec
    return spec.cell_volume * spec.n ** (spec.d / 2) * _checkerboard(spec) * F


@dataclass(frozen=True, eq=False)
class Multiplier:
    """Scalar Fourier symbol evaluated on the dual lattice.

    ``symbol`` receives the sparse tuple of frequency arrays.
    """

    name: str
    symbol: Callable[[tuple[np.ndarray, ...]], np.ndarray]
    params: dict = field(default_factory=dict)

    def on_lattice(self, spec: GridSpec) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            vals = self.symbol(frequencies(spec))
        return np.broadcast_to(np.asarray(vals, dtype=np.complex128), spec.shape)

    def __mul__(self, other: "Multiplier") -> "Multiplier":
        a, b = self, other
        return Multiplier(f"{a.name}*{b.name}", lambda xi: a.symbol(xi) * b.symbol(xi),
                          {"factors": [a.name, b.name]})


def _xi2(xi) -> np.ndarray:
    return sum(k**2 for k in xi)


def sobolev_symbol(alpha: float) -> Multiplier:
    """S_alpha = (1 - Laplacian)^(alpha/2)."""
    alpha = float(alpha)
    return Multiplier(f"S[{alpha:g}]", lambda xi: (1.0 + _xi2(xi)) ** (alpha / 2.0), {"alpha": alpha})


def resolvent_symbol(z: complex) -> Multiplier:
    """(|xi|^2 - z)^(-1)."""
    z = complex(z)
    return Multiplier(f"R0[{z}]", lambda xi: 1.0 / (_xi2(xi) - z), {"z": [z.real, z.imag]})


def helmholtz_symbol(z: complex) -> Multiplier:
    """|xi|^2 - z, the symbol of -Laplacian - z."""
    z = complex(z)
    return Multiplier(f"H0-z[{z}]", lambda xi: _xi2(xi) - z, {"z": [z.real, z.imag]})


def derivative_symbol(axis: int) -> Multiplier:
    return Multiplier(f"d/dx{axis + 1}", lambda xi: 1j * xi[axis], {"axis": axis})


def laplacian_symbol() -> Multiplier:
    return Multiplier("Laplacian", lambda xi: -_xi2(xi))


def smooth_step(t) -> np.ndarray:
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def annular_profile(rho, lam: float) -> np.ndarray:
    """Radial profile of the annular cutoff around |xi| = sqrt(lam).

    Supported in [sqrt(lam)/2, 3 sqrt(lam)/2], identically 1 on
    [3 sqrt(lam)/4, 5 sqrt(lam)/4].
    """
    k = math.sqrt(lam)
    rho = np.asarray(rho, dtype=float)
    up = smooth_step((rho - 0.5 * k) / (0.25 * k))
    down = smooth_step((1.5 * k - rho) / (0.25 * k))
    return up * down


def annular_cutoff(lam: float) -> Multiplier:
    if lam <= 0:
        raise GridError("annular cutoff needs lam > 0")
    return Multiplier(f"chi_ann[{lam:g}]", lambda xi: annular_profile(np.sqrt(_xi2(xi)), lam),
                      {"lambda": float(lam)})


def apply_multiplier(f: Field, m: Multiplier) -> Field:
    """Multiply by ``m`` in frequency; the result keeps ``f``'s representation."""
    vals = m.on_lattice(f.spec)
    if not np.all(np.isfinite(vals)):
        bad = int(np.count_nonzero(~np.isfinite(vals)))
        raise SingularSymbolError(
            f"symbol {m.name} is singular on {bad} lattice point(s); "
            "use eps != 0 or move lambda off the lattice values |xi_k|^2")
    if f.rep == FREQUENCY:
        return Field(f.spec, f.values * vals, FREQUENCY)
    return Field(f.spec, ifftn(fftn(f.values) * vals), PHYSICAL)


def apply_symbol_array(values: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    """Raw-array counterpart of :func:`apply_multiplier` for inner loops."""
    return ifftn(fftn(values) * symbol)


def pairing(u: Field, f: Field) -> complex:
    """<u, f> = sum u conj(f) h^d."""
    if u.spec != f.spec:
        raise GridError("pairing of fields on different grids")
    if u.rep != PHYSICAL or f.rep != PHYSICAL:
        raise RepresentationError("pairing expects physical fields")
    return complex(np.vdot(f.values, u.values) * u.spec.cell_volume)


def _lp(values: np.ndarray, p: float, dv: float) -> float:
    a = np.abs(values)
    if p == np.inf:
        return float(a.max()) if a.size else 0.0
    if p == 2:
        return float(np.sqrt(np.sum(a * a) * dv))
    m = a.max() if a.size else 0.0
    if m == 0:
        return 0.0
    return float(m * (np.sum((a / m) ** p) * dv) ** (1.0 / p))


def lp_norm(f: Field, p: float) -> float:
    """(sum |f|^p h^d)^(1/p); the sample maximum for p = inf."""
    p = float(p)
    if not (p >= 1):
        raise GridError(f"Lebesgue exponent must be >= 1, got {p}")
    if f.rep != PHYSICAL:
        raise RepresentationError("lp_norm expects a physical field")
    return _lp(f.values, p, f.spec.cell_volume)


def frequency_l2(f: Field) -> float:
    F = f.values if f.rep == FREQUENCY else fftn(f.values)
    return float(np.sqrt(np.sum(np.abs(F) ** 2) * f.spec.cell_volume))


def fd_laplacian(f: Field, order: int = 16) -> Field:
    """Wide-stencil central-difference Laplacian (periodic indexing).

    Local, so unlike the spectral Laplacian it is meaningful away from the box
    edge for fields that are not periodic (e.g. Herglotz waves).
    """
    if order % 2 or order < 2:
        raise GridError("order must be an even integer >= 2")
    m = order // 2
    fm = math.factorial(m) ** 2
    w = [2.0 * (-1) ** (j + 1) * fm / (j * j * math.factorial(m - j) * math.factorial(m + j))
         for j in range(1, m + 1)]
    v = f.values
    out = np.zeros_like(v)
    for axis in range(f.spec.d):
        acc = -2.0 * sum(w) * v
        for j, wj in enumerate(w, start=1):
            acc = acc + wj * (np.roll(v, j, axis) + np.roll(v, -j, axis))
        out += acc
    return Field(f.spec, out / f.spec.h**2)


def linear_convolve(values: np.ndarray, kernel_offsets: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Aperiodic convolution sum_y K(x - y) g(y) h^d restricted to the box.

    ``kernel_offsets`` holds K on the doubled offset lattice, shape (2n,)*d in
    FFT order (offset index m in [-n, n) stored at m mod 2n).
    """
    n = spec.n
    pad = [(0, n)] * spec.d
    g = np.pad(values, pad)
    out = _sfft.ifftn(_sfft.fftn(g) * _sfft.fftn(kernel_offsets))
    sl = tuple(slice(0, n) for _ in range(spec.d))
    return out[sl] * spec.cell_volume


@functools.lru_cache(maxsize=16)
def offset_radius(spec: GridSpec) -> np.ndarray:
    """|m h| on the doubled offset lattice in FFT order (see linear_convolve)."""
    m = np.fft.fftfreq(2 * spec.n, d=1.0 / (2 * spec.n)) * spec.h
    r2 = 0.0
    for axis in range(spec.d):
        shape = [1] * spec.d
        shape[axis] = 2 * spec.n
        r2 = r2 + m.reshape(shape) ** 2
    return _readonly(np.sqrt(r2))


def field_to_bytes(f: Field) -> bytes:
    head = LAPF_MAGIC + bytes([LAPF_VERSION])
    flag = 0 if f.rep == PHYSICAL else 1
    body = np.ascontiguousarray(f.values.reshape(-1)).astype("<c16").tobytes()
    return head + _LAPF_HEADER.pack(f.spec.d, f.spec.n, f.spec.box, flag) + body


def field_from_bytes(data: bytes) -> Field:
    if len(data) < 5 + _LAPF_HEADER.size or data[:4] != LAPF_MAGIC:
        raise GridError("not an LAPF field (bad magic)")
    if data[4] != LAPF_VERSION:
        raise GridError(f"unsupported LAPF version {data[4]}")
    d, n, box, flag = _LAPF_HEADER.unpack_from(data, 5)
    spec = GridSpec(d, n, box)
    off = 5 + _LAPF_HEADER.size
    expected = spec.size * 16
    if len(data) - off != expected:
        raise GridError(f"LAPF payload has {len(data) - off} bytes, expected {expected}")
    if flag not in (0, 1):
        raise GridError(f"bad representation flag {flag}")
    vals = np.frombuffer(data, dtype="<c16", offset=off)
    return Field(spec, vals, PHYSICAL if flag == 0 else FREQUENCY)


def save_field(path, f: Field) -> None:
    Path(path).write_bytes(field_to_bytes(f))


def load_field(path) -> Field:
    return field_from_bytes(Path(path).read_bytes())
