"""Equivalent prediction error, frequency-domain bias weightings and their integrals."""

from __future__ import annotations

import csv
import enum
import io
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .lti_core import (
    FrequencyGrid,
    RationalFilter,
    as_filter,
    filter_apply,
    freq_response,
    sensitivity_syp,
)
from .loop_sim import DataRecord, split_plant
from .models import EstimationResult, Kind, ModelStructure, prediction_error, regressors_from_errors
from .plr import FilterMode, RegressorFilterSpec, q_polynomial, stationarity_stats
from .signals import Spectrum


class SingularGridWarning(RuntimeWarning):
    """Grid points dropped from an integral because a factor is infinite there."""


class Method(str, enum.Enum):
    PLR = "PLR"
    PEM = "PEM"
    PLR_FILTERED = "PLR_filtered"


class NoiseReading(str, enum.Enum):
    """How the closed-loop ARMAX noise term combines the two sensitivities.

    ``product`` multiplies true and estimated sensitivity (dividing by an
    inverse); ``ratio`` divides one by the other.
    """

    PRODUCT = "product"
    RATIO = "ratio"


@dataclass(frozen=True)
class BiasWeighting:
    grid: FrequencyGrid
    deterministic_weight: np.ndarray
    noise_weight: Optional[np.ndarray] = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.grid)
        dw = np.asarray(self.deterministic_weight, dtype=float)
        if dw.shape != (n,):
            raise ValueError("deterministic_weight must match the grid")
        finite = dw[np.isfinite(dw)]
        if np.any(finite < 0):
            raise ValueError("weights must be non-negative")
        dw.setflags(write=False)
        object.__setattr__(self, "deterministic_weight", dw)
        if self.noise_weight is not None:
            nw = np.asarray(self.noise_weight, dtype=float)
            if nw.shape != (n,):
                raise ValueError("noise_weight must match the grid")
            nw.setflags(write=False)
            object.__setattr__(self, "noise_weight", nw)

    @property
    def singular(self) -> np.ndarray:
        """Mask of grid points where a weight is not finite."""
        bad = ~np.isfinite(self.deterministic_weight)
        if self.noise_weight is not None:
            bad |= ~np.isfinite(self.noise_weight)
        return bad

    def to_csv(self, path=None) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["omega", "omega_normalized", "deterministic_weight", "noise_weight"])
        nw = self.noise_weight if self.noise_weight is not None else [None] * len(self.grid)
        for om, d, e in zip(self.grid.omegas, self.deterministic_weight, nw):
            w.writerow([repr(float(om)), repr(float(om / (2 * np.pi))), repr(float(d)), "" if e is None else repr(float(e))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "labels": dict(self.labels),
            "points": len(self.grid),
            "singular_points": int(self.singular.sum()),
            "max_deterministic_weight": float(np.nanmax(self.deterministic_weight)),
        }


def noise_term(structure: ModelStructure, data: DataRecord, sensitivity=None) -> np.ndarray:
    """Noise sequence entering the equivalent prediction error for ``structure``.

    Equation-error kinds use the white innovation e, open-loop OE the output
    disturbance v, closed-loop OE the disturbance seen through ``S_yp``.
    """
    k = structure.kind
    if k is Kind.OL_OE:
        src = data.truth_noise
    elif k is Kind.CL_OE:
        if data.truth_noise is None:
            raise ValueError("truth_noise is required")
        if sensitivity is None:
            raise ValueError("closed-loop OE needs the true sensitivity S_yp")
        return filter_apply(sensitivity, data.truth_noise)
    else:
        src = data.innovation
    if src is None:
        raise ValueError("the noise realization is not stored in this data record")
    return np.asarray(src, dtype=float)


def equivalent_prediction_error(
    structure: ModelStructure,
    theta,
    eps,
    truth_noise,
    filter_spec: Optional[RegressorFilterSpec] = None,
) -> np.ndarray:
    """``eps_E = (Q/Q_f) eps + (1 - Q/Q_f) n``.

    ``truth_noise`` is the sequence n matching the structure (see
    :func:`noise_term`). ``Q_f`` is the regressor filter in effect at ``theta``.
    """
    if truth_noise is None:
        raise ValueError("the equivalent prediction error needs the true noise sequence")
    eps = np.asarray(eps, dtype=float)
    n = np.asarray(truth_noise, dtype=float)
    if eps.shape != n.shape:
        raise ValueError("eps and truth_noise must have equal length")
    spec = filter_spec or RegressorFilterSpec.none()
    ratio = q_polynomial(structure, theta) * spec.current_filter(structure, theta).inverse()
    return filter_apply(ratio, eps - n) + n


def _sensitivities(structure: ModelStructure, theta, grid, plant):
    """True (or estimated, if ``plant`` is None) and estimated ``S_yp`` responses."""
    K = structure.controller
    A, B, _ = structure.polynomials(theta)
    s_hat = freq_response(sensitivity_syp(A, B, K.R, K.S), grid)
    if plant is None:
        return s_hat, s_hat, "estimated-sensitivity weighting"
    Bt, At = split_plant(plant)
    return freq_response(sensitivity_syp(At, Bt, K.R, K.S), grid), s_hat, "true-sensitivity weighting"


def bias_weight(
    structure: ModelStructure,
    theta,
    method: str | Method,
    grid: FrequencyGrid,
    *,
    plant=None,
    noise_model=None,
    filter_spec: Optional[RegressorFilterSpec] = None,
    noise_reading: str | NoiseReading = NoiseReading.PRODUCT,
) -> BiasWeighting:
    """Weighting of ``|G - G_hat|^2 Phi`` (and of ``Phi_ee``) minimized asymptotically.

    ``plant`` is the true G used for ``S_yp`` in closed loop; without it the
    estimated sensitivity is substituted and the label says so. The noise weight
    is produced only for equation-error kinds and needs ``noise_model``.
    """
    method = Method(method)
    reading = NoiseReading(noise_reading)
    kind = structure.kind
    A, B, C = structure.polynomials(theta)
    a = freq_response(A, grid)
    labels = {"method": method.value, "structure": kind.value}

    s_true = s_hat = None
    if kind.closed_loop:
        s_true, s_hat, labels["sensitivity"] = _sensitivities(structure, theta, grid, plant)
        loop = np.abs(s_true) ** 2
    else:
        loop = np.ones(len(grid))

    # noise polynomial seen by the weighting: C, or the implied one in closed loop
    if kind is Kind.CL_ARMAX:
        c_filt = q_polynomial(structure, theta)
    elif kind.has_noise_part:
        c_filt = RationalFilter(C)
    else:
        c_filt = RationalFilter.gain(1.0)
    # ratios evaluated as single rationals so common factors (S at DC) cancel
    a_over_c = freq_response(RationalFilter(A * c_filt.den, c_filt.num), grid)
    c_over_a = freq_response(RationalFilter(c_filt.num, A * c_filt.den), grid)

    if method is Method.PLR:
        base = np.abs(a) ** 2
        labels["row"] = "|A_hat|^2" + (" |S_yp|^2" if kind.closed_loop else "")
    elif method is Method.PEM:
        if kind is Kind.OL_OE:
            base = np.ones(len(grid))
            labels["row"] = "1"
        elif kind is Kind.CL_OE:
            base = np.abs(s_hat) ** 2
            labels["row"] = "|S_yp_hat|^2 |S_yp|^2"
        else:
            base = np.abs(a_over_c) ** 2
            labels["row"] = "|A_hat/C_hat|^2" + (" |S_yp|^2" if kind.closed_loop else "")
    else:
        if not kind.output_error or kind is Kind.CL_ARMAX:
            raise ValueError("filtered-PLR weighting is defined for output-error structures")
        spec = filter_spec or RegressorFilterSpec.none()
        if spec.mode is FilterMode.NONE:
            raise ValueError("PLR_filtered needs a regressor filter")
        qf = as_filter(spec.current_filter(structure, theta))
        base = np.abs(freq_response(RationalFilter(A * qf.den, qf.num), grid)) ** 2
        labels["row"] = "|A_hat/Q_f|^2" + (" |S_yp|^2" if kind.closed_loop else "")
        labels["filter"] = spec.to_dict()
    det = base * loop

    noise = None
    if kind.has_noise_part or kind is Kind.OL_ARX:
        if noise_model is not None and method is not Method.PLR_FILTERED:
            w = freq_response(as_filter(noise_model), grid)
            if kind is Kind.CL_ARMAX:
                with np.errstate(divide="ignore", invalid="ignore"):
                    if method is Method.PLR:
                        mix = s_true * s_hat if reading is NoiseReading.PRODUCT else s_true / s_hat
                    else:
                        mix = s_hat * s_true if reading is NoiseReading.PRODUCT else s_hat / s_true
                labels["noise_reading"] = reading.value
                w = w * mix
            with np.errstate(invalid="ignore"):
                noise = base * np.abs(w - c_over_a) ** 2
    return BiasWeighting(grid, det, noise, labels)


def bias_integral(
    weighting: BiasWeighting,
    G,
    G_hat,
    input_spectrum: Spectrum,
    noise_spectrum: Optional[Spectrum] = None,
) -> float:
    """``2 x`` trapezoid over ``[0, pi]`` of the weighted misfit plus the noise term.

    Points where any factor is infinite (plant pole, singular weight) are
    dropped with a :class:`SingularGridWarning`.
    """
    grid = weighting.grid
    if not np.array_equal(input_spectrum.grid.omegas, grid.omegas):
        raise ValueError("input spectrum grid differs from the weighting grid")
    miss = np.abs(freq_response(G, grid) - freq_response(G_hat, grid)) ** 2
    with np.errstate(invalid="ignore"):
        f = weighting.deterministic_weight * miss * input_spectrum.power
    if weighting.noise_weight is not None and noise_spectrum is not None:
        if not np.array_equal(noise_spectrum.grid.omegas, grid.omegas):
            raise ValueError("noise spectrum grid differs from the weighting grid")
        f = f + weighting.noise_weight * noise_spectrum.power
    ok = np.isfinite(f)
    if not ok.all():
        warnings.warn(
            f"{int((~ok).sum())} singular grid point(s) excluded from the bias integral",
            SingularGridWarning,
            stacklevel=2,
        )
    if ok.sum() < 2:
        raise ValueError("fewer than two regular grid points")
    return float(2.0 * np.trapezoid(f[ok], grid.omegas[ok]))


def _check_collinear(points: Sequence[np.ndarray]):
    if len(points) < 3:
        raise ValueError("need at least three parameter points")
    P = np.array([np.asarray(p, dtype=float) for p in points])
    step = P[1] - P[0]
    for k in range(2, len(P)):
        expect = P[0] + k * step
        if not np.allclose(P[k], expect, rtol=1e-12, atol=1e-12 * (1 + np.abs(P).max())):
            raise ValueError("parameter points must be equally spaced on a line")
    return P


def affinity_check(
    structure: ModelStructure,
    data: DataRecord,
    truth_noise,
    theta_points: Sequence,
    *,
    filter_spec: Optional[RegressorFilterSpec] = None,
    equivalent: bool = True,
) -> float:
    """Max absolute second difference of eps_E (or of eps) along equally spaced points."""
    P = _check_collinear(theta_points)
    seqs = []
    for th in P:
        eps = prediction_error(structure, th, data)
        seqs.append(
            equivalent_prediction_error(structure, th, eps, truth_noise, filter_spec) if equivalent else eps
        )
    seqs = np.array(seqs)
    d2 = seqs[:-2] - 2.0 * seqs[1:-1] + seqs[2:]
    return float(np.max(np.abs(d2)))


def stationarity_report(result: EstimationResult, data: DataRecord) -> dict:
    """Correlations of ``eps(t+1)`` with each regressor component, bound ``3/sqrt(N)``."""
    if result.eps.shape[0] != data.sample_count:
        raise ValueError("result and data lengths differ")
    return stationarity_stats(result.eps, result.regressors)


def q_perturbation_estimate(structure: ModelStructure, theta, n_taps: int = 40, data: Optional[DataRecord] = None) -> np.ndarray:
    """First ``n_taps`` impulse-response taps of ``1 + theta' d phi / d(q eps)``.

    One past error sample is bumped and the induced change of later regressors
    is read off. The regressor is affine in the error sequence, so the base
    record is irrelevant; a zero record is used when ``data`` is None.
    """
    theta = np.asarray(theta, dtype=float)
    t0 = structure.transient + 1
    n = t0 + n_taps + 1
    if data is None:
        z = np.zeros(n)
        data = DataRecord(u=z, y=z, r_u=z if structure.kind.closed_loop else None)
    elif data.sample_count < n:
        raise ValueError(f"data record must have at least {n} samples")
    base = np.zeros(data.sample_count)
    bumped = base.copy()
    bumped[t0] = 1.0
    dphi = regressors_from_errors(structure, data, bumped) - regressors_from_errors(structure, data, base)
    taps = np.empty(n_taps)
    taps[0] = 1.0
    # eps(t0) plays the role of q*eps for phi(t0 - 1), so tap k reads phi(t0 - 1 + k)
    taps[1:] = dphi[t0 : t0 + n_taps - 1] @ theta
    return taps
