"""Polynomials in the backward shift q^-1, rational filters and frequency responses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.signal import lfilter

STABILITY_MARGIN = 1e-9
DEFAULT_GRID_SIZE = 512

ArrayLike = Union[Sequence[float], np.ndarray]


class Polynomial:
    """Real polynomial ``c0 + c1 q^-1 + ... + cn q^-n``.

    Trailing zero coefficients are stripped so that ``degree`` is the true
    degree; the zero polynomial is stored as ``[0.0]``.
    """

    __slots__ = ("coeffs",)

    def __init__(self, coeffs: ArrayLike | float):
        if isinstance(coeffs, Polynomial):
            coeffs = coeffs.coeffs
        c = np.atleast_1d(np.asarray(coeffs, dtype=float)).copy()
        if c.ndim != 1:
            raise ValueError("polynomial coefficients must be one-dimensional")
        nz = np.flatnonzero(c)
        c = c[: nz[-1] + 1] if nz.size else np.zeros(1)
        c.setflags(write=False)
        self.coeffs = c

    @classmethod
    def one(cls) -> "Polynomial":
        return cls([1.0])

    @classmethod
    def delay(cls, d: int) -> "Polynomial":
        c = np.zeros(d + 1)
        c[d] = 1.0
        return cls(c)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def is_monic(self) -> bool:
        return self.coeffs[0] == 1.0

    @property
    def is_zero(self) -> bool:
        return self.degree == 0 and self.coeffs[0] == 0.0

    def __call__(self, z_inv) -> np.ndarray:
        """Evaluate at ``q^-1 = z_inv`` (scalar or array)."""
        z_inv = np.asarray(z_inv)
        acc = np.zeros_like(z_inv, dtype=complex)
        for c in self.coeffs[::-1]:
            acc = acc * z_inv + c
        return acc

    def at(self, omegas: ArrayLike) -> np.ndarray:
        return self(np.exp(-1j * np.asarray(omegas, dtype=float)))

    def roots(self) -> np.ndarray:
        """Roots in z of ``z^n P(1/z)`` (companion-matrix eigenvalues)."""
        if self.degree == 0:
            return np.zeros(0, dtype=complex)
        return np.roots(self.coeffs)

    def is_stable(self, margin: float = STABILITY_MARGIN) -> bool:
        if self.coeffs[0] == 0.0:
            return False
        r = self.roots()
        return bool(np.all(np.abs(r) < 1.0 - margin))

    def __add__(self, other) -> "Polynomial":
        other = as_polynomial(other)
        n = max(len(self.coeffs), len(other.coeffs))
        return Polynomial(
            np.pad(self.coeffs, (0, n - len(self.coeffs)))
            + np.pad(other.coeffs, (0, n - len(other.coeffs)))
        )

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(-self.coeffs)

    def __sub__(self, other) -> "Polynomial":
        return self + (-as_polynomial(other))

    def __rsub__(self, other) -> "Polynomial":
        return as_polynomial(other) - self

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial(self.coeffs * other)
        other = as_polynomial(other)
        return Polynomial(np.convolve(self.coeffs, other.coeffs))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return np.array_equal(self.coeffs, other.coeffs)

    def __hash__(self):
        return hash(self.coeffs.tobytes())

    def allclose(self, other, atol: float = 1e-12) -> bool:
        other = as_polynomial(other)
        n = max(len(self.coeffs), len(other.coeffs))
        a = np.pad(self.coeffs, (0, n - len(self.coeffs)))
        b = np.pad(other.coeffs, (0, n - len(other.coeffs)))
        return bool(np.allclose(a, b, rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        return f"Polynomial({self.coeffs.tolist()})"


def schur_stable(coeffs, margin: float = STABILITY_MARGIN) -> bool:
    """Schur-Cohn step-down test: all roots of ``sum c_k z^-k`` inside radius ``1 - margin``.

    Agrees with :meth:`Polynomial.is_stable` and avoids an eigenvalue problem;
    used on the per-sample stability guard of the recursive estimators.
    """
    c = [float(v) for v in coeffs]
    while len(c) > 1 and c[-1] == 0.0:
        c.pop()
    if c[0] == 0.0:
        return False
    rho = 1.0 - margin
    a = [v / c[0] / rho ** k for k, v in enumerate(c)]
    for m in range(len(a) - 1, 0, -1):
        k = a[m]
        if abs(k) >= 1.0:
            return False
        den = 1.0 - k * k
        a = [(a[i] - k * a[m - i]) / den for i in range(m)]
    return True


def as_polynomial(p) -> Polynomial:
    if isinstance(p, Polynomial):
        return p
    return Polynomial(p)


class RationalFilter:
    """Causal transfer operator ``num(q^-1) / den(q^-1)``."""

    __slots__ = ("num", "den")

    def __init__(self, num, den=1.0):
        self.num = as_polynomial(num)
        self.den = as_polynomial(den)
        if self.den.is_zero:
            raise ValueError("denominator is the zero polynomial")

    @classmethod
    def gain(cls, k: float = 1.0) -> "RationalFilter":
        return cls([k], [1.0])

    @property
    def is_causal(self) -> bool:
        return self.den.coeffs[0] != 0.0

    def is_stable(self, margin: float = STABILITY_MARGIN) -> bool:
        return self.den.is_stable(margin)

    def __mul__(self, other) -> "RationalFilter":
        if isinstance(other, (int, float)):
            return RationalFilter(self.num * other, self.den)
        other = as_filter(other)
        return RationalFilter(self.num * other.num, self.den * other.den)

    __rmul__ = __mul__

    def __add__(self, other) -> "RationalFilter":
        other = as_filter(other)
        return RationalFilter(
            self.num * other.den + other.num * self.den, self.den * other.den
        )

    __radd__ = __add__

    def __neg__(self) -> "RationalFilter":
        return RationalFilter(-self.num, self.den)

    def __sub__(self, other) -> "RationalFilter":
        return self + (-as_filter(other))

    def __rsub__(self, other) -> "RationalFilter":
        return as_filter(other) - self

    def inverse(self) -> "RationalFilter":
        return RationalFilter(self.den, self.num)

    def impulse_response(self, n: int) -> np.ndarray:
        x = np.zeros(n)
        x[0] = 1.0
        return filter_apply(self, x)

    def __repr__(self) -> str:
        return f"RationalFilter(num={self.num.coeffs.tolist()}, den={self.den.coeffs.tolist()})"


def as_filter(f) -> RationalFilter:
    if isinstance(f, RationalFilter):
        return f
    return RationalFilter(as_polynomial(f), [1.0])


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Increasing frequencies in rad/sample on [0, pi], endpoints included."""

    omegas: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omegas, dtype=float)
        if w.ndim != 1 or w.size < 2:
            raise ValueError("grid needs at least two points")
        if np.any(np.diff(w) <= 0):
            raise ValueError("grid frequencies must be strictly increasing")
        if w[0] != 0.0 or not np.isclose(w[-1], np.pi, rtol=0, atol=1e-15):
            raise ValueError("grid must start at 0 and end at pi")
        w = w.copy()
        w[-1] = np.pi
        w.setflags(write=False)
        object.__setattr__(self, "omegas", w)

    @classmethod
    def uniform(cls, n: int = DEFAULT_GRID_SIZE) -> "FrequencyGrid":
        return cls(np.linspace(0.0, np.pi, n))

    def __len__(self) -> int:
        return self.omegas.size

    @property
    def normalized(self) -> np.ndarray:
        """Frequencies in cycles/sample, f = omega / (2 pi) in [0, 0.5]."""
        return self.omegas / (2.0 * np.pi)


def filter_apply(f, x: ArrayLike) -> np.ndarray:
    """Filter ``x`` through ``f`` with zero initial conditions."""
    f = as_filter(f)
    if not f.is_causal:
        raise ValueError("non-causal filter: leading denominator coefficient is zero")
    x = np.asarray(x, dtype=float)
    return lfilter(f.num.coeffs, f.den.coeffs, x)


def freq_response(f, grid: FrequencyGrid | ArrayLike) -> np.ndarray:
    """Evaluate ``num(e^{-iw}) / den(e^{-iw})`` on the grid.

    Grid points where the denominator vanishes are returned as complex NaN.
    """
    f = as_filter(f)
    if not f.is_causal:
        raise ValueError("non-causal filter: leading denominator coefficient is zero")
    w = grid.omegas if isinstance(grid, FrequencyGrid) else np.asarray(grid, dtype=float)
    num = f.num.at(w)
    den = f.den.at(w)
    scale = np.sum(np.abs(f.den.coeffs))
    pole = np.abs(den) <= 1e-12 * scale
    out = np.empty_like(num)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[~pole] = num[~pole] / den[~pole]
    out[pole] = complex(np.nan, np.nan)
    return out


def characteristic_polynomial(A, B, R, S) -> Polynomial:
    """Closed-loop characteristic polynomial ``P = A S + B R``."""
    return as_polynomial(A) * as_polynomial(S) + as_polynomial(B) * as_polynomial(R)


def sensitivity_syp(A, B, R, S) -> RationalFilter:
    """Output sensitivity ``S_yp = A S / (A S + B R)``."""
    A, B, R, S = (as_polynomial(p) for p in (A, B, R, S))
    if not S.is_monic:
        raise ValueError("controller polynomial S must be monic")
    P = characteristic_polynomial(A, B, R, S)
    if P.coeffs[0] == 0.0:
        raise ValueError("ill-posed loop: A S + B R has zero constant coefficient")
    return RationalFilter(A * S, P)


def power_gain(f, grid: FrequencyGrid) -> float:
    """``(1/pi) * integral_0^pi |f(e^{iw})|^2 dw``: output variance for unit white input."""
    h = freq_response(f, grid)
    return float(np.trapezoid(np.abs(h) ** 2, grid.omegas) / np.pi)


def polynomial_product(factors: Iterable) -> Polynomial:
    out = Polynomial.one()
    for p in factors:
        out = out * as_polynomial(p)
    return out
