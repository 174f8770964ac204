"""Excitation and noise generators and second-order statistics.

Randomness comes from ``numpy.random.Generator(PCG64(seed))`` so that every
run is reproducible bit for bit given its seeds. No global RNG state is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import welch

from .lti_core import FrequencyGrid

# Feedback taps of maximal-length Fibonacci LFSRs (polynomial x^n + ... + 1).
MAXIMAL_TAPS = {
    2: (2, 1),
    3: (3, 2),
    4: (4, 3),
    5: (5, 3),
    6: (6, 5),
    7: (7, 6),
    8: (8, 6, 5, 4),
    9: (9, 5),
    10: (10, 7),
    11: (11, 9),
    12: (12, 6, 4, 1),
    13: (13, 4, 3, 1),
    14: (14, 5, 3, 1),
    15: (15, 14),
    16: (16, 15, 13, 4),
}


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _lfsr_step(state: int, taps: tuple, n: int) -> int:
    fb = 0
    for tap in taps:
        fb ^= (state >> (tap - 1)) & 1
    return ((state << 1) | fb) & ((1 << n) - 1)


@lru_cache(maxsize=64)
def lfsr_cycle_length(registers: int, taps: tuple) -> int:
    """Length of the state cycle through the all-ones state."""
    start = (1 << registers) - 1
    state = _lfsr_step(start, taps, registers)
    count = 1
    while state != start:
        state = _lfsr_step(state, taps, registers)
        count += 1
        if count > (1 << registers):
            return 0
    return count


@dataclass(frozen=True)
class PrbsConfig:
    registers: int = 9
    taps: tuple = None
    amplitude: float = 1.0
    length: int = 8 * 511
    clock_divider: int = 1

    def __post_init__(self):
        if self.registers < 2:
            raise ValueError("a PRBS needs at least 2 registers")
        if self.clock_divider < 1:
            raise ValueError("clock_divider must be >= 1")
        if self.length < 0:
            raise ValueError("length must be non-negative")
        taps = self.taps
        if taps is None:
            if self.registers not in MAXIMAL_TAPS:
                raise ValueError(f"no default taps for {self.registers} registers")
            taps = MAXIMAL_TAPS[self.registers]
        taps = tuple(sorted({int(t) for t in taps}, reverse=True))
        if taps[0] != self.registers or taps[-1] < 1:
            raise ValueError(f"taps {taps} must lie in 1..{self.registers} and include {self.registers}")
        object.__setattr__(self, "taps", taps)
        if self.registers <= 16:
            cycle = lfsr_cycle_length(self.registers, taps)
            period = (1 << self.registers) - 1
            if cycle != period:
                raise ValueError(
                    f"taps {taps} are not maximal-length: cycle {cycle}, expected {period}"
                )

    @property
    def period(self) -> int:
        return ((1 << self.registers) - 1) * self.clock_divider


def prbs_generate(cfg: PrbsConfig, seed: int = 1) -> np.ndarray:
    """Two-level sequence of ``cfg.length`` samples taking values +/- amplitude.

    The register is loaded with the low ``cfg.registers`` bits of ``seed``; the
    output is the last register cell, held for ``clock_divider`` samples.
    """
    n = cfg.registers
    state = int(seed) & ((1 << n) - 1)
    if state == 0:
        raise ValueError("all-zero LFSR state: choose a seed with a nonzero low-order bit pattern")
    chips = -(-cfg.length // cfg.clock_divider)
    bits = np.empty(chips, dtype=np.int8)
    top = n - 1
    for k in range(chips):
        bits[k] = (state >> top) & 1
        state = _lfsr_step(state, cfg.taps, n)
    seq = np.where(bits == 1, cfg.amplitude, -cfg.amplitude).astype(float)
    return np.repeat(seq, cfg.clock_divider)[: cfg.length]


def white_noise(variance: float, length: int, seed: int) -> np.ndarray:
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if variance == 0:
        return np.zeros(length)
    return np.sqrt(variance) * rng(seed).standard_normal(length)


def cross_correlation(x, y, max_lag: int) -> np.ndarray:
    """Normalized correlation ``r(k) = sum x(t+k) y(t) / (N sx sy)``, k = 0..max_lag.

    Means are removed before correlating.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D sequences of equal length")
    n = x.size
    if n < max_lag + 1:
        raise ValueError("sequence shorter than max_lag + 1")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc) / n)
    sy = np.sqrt(np.dot(yc, yc) / n)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero-variance input: correlation undefined")
    r = np.array([np.dot(xc[k:], yc[: n - k]) for k in range(max_lag + 1)])
    return r / (n * sx * sy)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Two-sided spectral density on a grid: ``E[x^2] = (1/pi) int_0^pi power dw``."""

    grid: FrequencyGrid
    power: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.power, dtype=float)
        if p.shape != (len(self.grid),):
            raise ValueError("power must have one value per grid point")
        if np.any(p < 0):
            raise ValueError("spectral power must be non-negative")
        object.__setattr__(self, "power", p)

    @classmethod
    def flat(cls, grid: FrequencyGrid, level: float = 1.0) -> "Spectrum":
        return cls(grid, np.full(len(grid), float(level)))

    def total_power(self) -> float:
        return float(np.trapezoid(self.power, self.grid.omegas) / np.pi)


WELCH_SEGMENTS = 8


def estimate_spectrum(x, grid: FrequencyGrid, discard: int = 0) -> Spectrum:
    """Welch estimate (8 Hann segments, 50% overlap) averaged onto the cells of ``grid``.

    Each grid point receives the mean density over its cell (midpoints to the
    neighbours), so total power is conserved even for line spectra. No
    detrending is applied, so a nonzero mean shows up at w = 0. The first
    ``discard`` samples are dropped to remove filter transients.
    """
    x = np.asarray(x, dtype=float)[discard:]
    if x.size < 8 * len(grid):
        raise ValueError(f"need at least {8 * len(grid)} samples for a {len(grid)}-point grid")
    nperseg = (2 * x.size) // (WELCH_SEGMENTS + 1)
    f, pxx = welch(
        x, fs=1.0, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
        detrend=False, return_onesided=True, scaling="density",
    )
    # one-sided density per cycle -> two-sided density (white noise => variance)
    two_sided = pxx / 2.0
    two_sided[0] = pxx[0]
    if nperseg % 2 == 0:
        two_sided[-1] = pxx[-1]
    om = 2.0 * np.pi * f
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (two_sided[1:] + two_sided[:-1]) * np.diff(om))])
    g = grid.omegas
    edges = np.concatenate([[g[0]], 0.5 * (g[1:] + g[:-1]), [g[-1]]])
    widths = np.diff(edges)
    power = np.diff(np.interp(edges, om, cum)) / widths
    return Spectrum(grid, np.maximum(power, 0.0))
