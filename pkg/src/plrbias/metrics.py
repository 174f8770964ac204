"""Chordal distance, Vinnicombe nu-gap and Bode data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .lti_core import FrequencyGrid, as_filter, freq_response

MAX_WINDING_POINTS = 2 ** 16
UNIT_CIRCLE_TOL = 1e-9


@dataclass(frozen=True)
class GapCurve:
    grid: FrequencyGrid
    chordal: np.ndarray
    nu_gap: float
    winding_ok: bool

    def __post_init__(self):
        c = np.asarray(self.chordal, dtype=float)
        if c.shape != (len(self.grid),):
            raise ValueError("chordal curve must match the grid")
        ok = c[np.isfinite(c)]
        if np.any(ok < -1e-15) or np.any(ok > 1 + 1e-15):
            raise ValueError("chordal distance outside [0, 1]")
        if not 0.0 <= self.nu_gap <= 1.0:
            raise ValueError("nu-gap outside [0, 1]")
        c.setflags(write=False)
        object.__setattr__(self, "chordal", c)


def _chordal(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        k = np.abs(g1 - g2) / (np.sqrt(1.0 + np.abs(g1) ** 2) * np.sqrt(1.0 + np.abs(g2) ** 2))
    return np.minimum(k, 1.0)


def chordal_distance(G1, G2, grid) -> np.ndarray:
    """Pointwise chordal distance; NaN where either response has a pole."""
    return _chordal(freq_response(G1, grid), freq_response(G2, grid))


def unstable_pole_count(G) -> int:
    """Poles strictly outside the unit circle; raises on poles on the circle."""
    G = as_filter(G)
    den = G.den.coeffs
    if den.size <= 1:
        return 0
    r = np.abs(np.roots(den))
    if np.any(np.abs(r - 1.0) < UNIT_CIRCLE_TOL):
        raise ValueError("pole on the unit circle: nu-gap winding condition undefined")
    return int(np.sum(r > 1.0))


def winding_number(G1, G2, n0: int = 1024) -> tuple:
    """Winding number of ``1 + conj(G2) G1`` around the origin over the unit circle.

    The sampling is doubled until adjacent phase steps stay below pi/4. Returns
    ``(winding, min_modulus)``.
    """
    G1, G2 = as_filter(G1), as_filter(G2)
    n = n0
    while True:
        om = np.linspace(-np.pi, np.pi, n + 1)
        f = 1.0 + np.conj(G2.num.at(om) / G2.den.at(om)) * (G1.num.at(om) / G1.den.at(om))
        mod = float(np.min(np.abs(f)))
        if mod == 0.0 or not np.all(np.isfinite(f)):
            return None, 0.0
        steps = np.angle(f[1:] / f[:-1])
        if np.max(np.abs(steps)) < np.pi / 4:
            return int(round(np.sum(steps) / (2 * np.pi))), mod
        if n >= MAX_WINDING_POINTS:
            if np.max(np.abs(steps)) > np.pi / 2:
                raise ValueError("phase accumulation ambiguous; use a denser grid")
            return int(round(np.sum(steps) / (2 * np.pi))), mod
        n *= 2


def nu_gap(G1, G2, grid) -> GapCurve:
    """Vinnicombe gap: max chordal distance if the winding condition holds, else 1."""
    G1, G2 = as_filter(G1), as_filter(G2)
    if not (G1.is_causal and G2.is_causal):
        raise ValueError("nu-gap needs proper (causal) filters")
    chord = chordal_distance(G1, G2, grid)
    eta1, eta2 = unstable_pole_count(G1), unstable_pole_count(G2)
    wno, mod = winding_number(G1, G2)
    # omega runs counterclockwise around the circle, the opposite of the
    # Nyquist contour, hence the sign of the pole-count difference
    ok = wno is not None and mod > 1e-12 and wno - eta1 + eta2 == 0
    finite = chord[np.isfinite(chord)]
    gap = float(np.max(finite)) if ok and finite.size else 1.0
    return GapCurve(grid, chord, min(gap, 1.0), bool(ok))


def bode(G, grid) -> tuple:
    """Magnitude (linear) and unwrapped phase in degrees."""
    g = freq_response(G, grid)
    return np.abs(g), np.degrees(np.unwrap(np.angle(g)))


def gap_csv(grid: FrequencyGrid, curves: Mapping[str, np.ndarray], path=None) -> str:
    """CSV with ``omega_normalized`` followed by one ``chordal_<name>`` column per curve."""
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    names = list(curves)
    w.writerow(["omega_normalized"] + [f"chordal_{k}" for k in names])
    for i, f in enumerate(grid.normalized):
        w.writerow([repr(float(f))] + [repr(float(curves[k][i])) for k in names])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def winning_bands(grid: FrequencyGrid, lower, upper) -> list:
    """Contiguous normalized-frequency bands where ``lower < upper`` pointwise.

    Returns ``(f_start, f_end)`` pairs of grid points; NaN points break a band.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    win = lower < upper
    f = grid.normalized
    bands = []
    start = None
    for i, w in enumerate(win):
        if w and start is None:
            start = i
        elif not w and start is not None:
            bands.append((float(f[start]), float(f[i - 1])))
            start = None
    if start is not None:
        bands.append((float(f[start]), float(f[-1])))
    return bands
