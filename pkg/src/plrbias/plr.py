"""Recursive pseudo-linear-regression identification.

The parameter adaptation algorithm (PAA) is

    theta(t+1) = theta(t) + F(t) phi_f(t) eps(t+1)
    F(t+1)^-1  = lambda1 F(t)^-1 + lambda2 phi_f(t) phi_f(t)'

with the a posteriori error ``eps(t+1) = eps0(t+1) / (1 + phi_f' F(t) phi_f)``
and ``eps0(t+1) = y(t+1) - theta(t)' phi(t)``. ``phi_f = phi`` unless a
regressor filter is configured. The gain is propagated with the rank-one
inversion lemma, never by inverting F.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .loop_sim import DataRecord
from .lti_core import RationalFilter, as_filter, schur_stable
from .models import (
    EstimationResult,
    Kind,
    ModelStructure,
    model_input_at,
    prediction_error,
    regressor_at,
)
from .signals import cross_correlation

DEFAULT_INITIAL_GAIN = 1000.0
DEFAULT_PASSES = 10
PD_CHECK_EVERY = 64


class FilterMode(str, enum.Enum):
    NONE = "none"
    FIXED = "fixed"
    ADAPTIVE_A0 = "adaptive_A0"
    ADAPTIVE_P0 = "adaptive_P0"


@dataclass(frozen=True)
class RegressorFilterSpec:
    """Regressor filtering ``phi_f = phi / Q_f``.

    ``fixed`` takes a constant ``Q_f`` (ratio of monic polynomials). The
    adaptive modes recompute ``Q_f`` every step: ``A_hat`` (adaptive F-OLOE) or
    ``P_hat / S`` (AF-CLOE).
    """

    mode: FilterMode = FilterMode.NONE
    Q_f: Optional[RationalFilter] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", FilterMode(self.mode))
        if self.mode is FilterMode.FIXED:
            if self.Q_f is None:
                raise ValueError("fixed regressor filter needs Q_f")
            q = as_filter(self.Q_f)
            if not (q.num.is_monic and q.den.is_monic):
                raise ValueError("Q_f must be a ratio of monic polynomials")
            if not q.num.is_stable():
                raise ValueError("1/Q_f must be stable (numerator of Q_f has unstable roots)")
            object.__setattr__(self, "Q_f", q)
        elif self.Q_f is not None:
            raise ValueError(f"Q_f is only meaningful for mode 'fixed', not {self.mode.value}")

    @classmethod
    def none(cls) -> "RegressorFilterSpec":
        return cls(FilterMode.NONE)

    @classmethod
    def fixed(cls, Q_f) -> "RegressorFilterSpec":
        return cls(FilterMode.FIXED, as_filter(Q_f))

    def current_filter(self, structure: ModelStructure, theta) -> RationalFilter:
        """``Q_f`` in effect at ``theta``."""
        if self.mode is FilterMode.NONE:
            return RationalFilter.gain(1.0)
        if self.mode is FilterMode.FIXED:
            return self.Q_f
        A, _, _ = structure.polynomials(theta)
        if self.mode is FilterMode.ADAPTIVE_A0:
            return RationalFilter(A, 1.0)
        if structure.controller is None:
            raise ValueError("adaptive_P0 filtering needs a closed-loop structure")
        return RationalFilter(structure.char_poly(theta), structure.controller.S)

    def to_dict(self) -> dict:
        d = {"mode": self.mode.value}
        if self.Q_f is not None:
            d["num"] = self.Q_f.num.coeffs.tolist()
            d["den"] = self.Q_f.den.coeffs.tolist()
        return d


@dataclass
class PaaState:
    """Mutable state of one recursive estimation (single owner)."""

    theta: np.ndarray
    F: np.ndarray
    lambda1: float = 1.0
    lambda2: float = 1.0
    yhat: np.ndarray = field(default=None, repr=False)
    uhat: np.ndarray = field(default=None, repr=False)
    eps: np.ndarray = field(default=None, repr=False)
    phi: np.ndarray = field(default=None, repr=False)
    phi_f: np.ndarray = field(default=None, repr=False)
    reinit_events: int = 0

    def __post_init__(self):
        if not 0.0 < self.lambda1 <= 1.0:
            raise ValueError("lambda1 must satisfy 0 < lambda1 <= 1")
        if not 0.0 <= self.lambda2 < 2.0:
            raise ValueError("lambda2 must satisfy 0 <= lambda2 < 2")
        self.theta = np.array(self.theta, dtype=float)
        self.F = np.array(self.F, dtype=float)
        n = self.theta.size
        if self.F.shape != (n, n):
            raise ValueError("F must be square with the parameter dimension")
        if not np.allclose(self.F, self.F.T) or np.linalg.eigvalsh(self.F).min() <= 0:
            raise ValueError("F must be symmetric positive definite")
        self.F0 = self.F.copy()

    @classmethod
    def initial(cls, n_params: int, gain: float = DEFAULT_INITIAL_GAIN, theta0=None,
                lambda1: float = 1.0, lambda2: float = 1.0) -> "PaaState":
        theta = np.zeros(n_params) if theta0 is None else theta0
        return cls(theta=theta, F=gain * np.eye(n_params), lambda1=lambda1, lambda2=lambda2)

    def start_pass(self, n_samples: int, y0: float = 0.0, reset_gain: bool = True):
        """Clear the signal histories (zero initial conditions) and optionally reset F."""
        n = self.theta.size
        self.yhat = np.zeros(n_samples)
        self.uhat = np.zeros(n_samples)
        self.eps = np.zeros(n_samples)
        self.phi = np.zeros((n_samples, n))
        self.phi_f = np.zeros((n_samples, n))
        if n_samples:
            self.eps[0] = y0
        if reset_gain:
            self.F = self.F0.copy()


def build_regressor(structure: ModelStructure, state: PaaState, data: DataRecord, t: int) -> np.ndarray:
    """``phi(t)`` from the predictor row of ``structure``.

    For closed-loop structures this also computes and stores ``u_hat(t)``.
    """
    kind = structure.kind
    if kind.closed_loop:
        if structure.controller is None:
            raise ValueError("closed-loop structure without controller")
        if data.r_u is None:
            raise ValueError("closed-loop structure needs r_u in the data")
        state.uhat[t] = model_input_at(structure.controller, t, data.r_u, state.yhat, state.uhat)
    y_like = state.yhat if kind.output_error else data.y
    u_like = state.uhat if kind.closed_loop else data.u
    return regressor_at(structure, t, y_like, u_like, state.eps)


def paa_step(state: PaaState, phi, y_next: float, phi_f=None) -> tuple:
    """One PAA update. Returns ``(eps, eps0)``, the a posteriori and a priori errors."""
    phi = np.asarray(phi, dtype=float)
    pf = phi if phi_f is None else np.asarray(phi_f, dtype=float)
    eps0 = y_next - state.theta @ phi
    Fp = state.F @ pf
    pFp = pf @ Fp
    eps = eps0 / (1.0 + pFp)
    state.theta = state.theta + Fp * eps
    l1, l2 = state.lambda1, state.lambda2
    if l2 > 0.0:
        F = (state.F - np.outer(Fp, Fp) * (l2 / (l1 + l2 * pFp))) / l1
    else:
        F = state.F / l1
    state.F = 0.5 * (F + F.T)
    return eps, eps0


def _filtered_regressor(spec: RegressorFilterSpec, structure, state: PaaState, t: int) -> np.ndarray:
    phi, phi_f = state.phi, state.phi_f
    mode = spec.mode
    if mode is FilterMode.NONE:
        return phi[t]
    if mode is FilterMode.FIXED:
        num, den = spec.Q_f.num.coeffs, spec.Q_f.den.coeffs
    elif mode is FilterMode.ADAPTIVE_A0:
        num = np.r_[1.0, state.theta[: structure.n_a]]
        den = np.ones(1)
    else:
        num = _guard_coeffs(structure, state.theta)
        den = structure.controller.S.coeffs
    # num * phi_f = den * phi, num monic
    acc = np.zeros(phi.shape[1])
    for k in range(min(len(den), t + 1)):
        acc += den[k] * phi[t - k]
    for k in range(1, min(len(num), t + 1)):
        acc -= num[k] * phi_f[t - k]
    return acc / num[0]


def _guard_coeffs(structure: ModelStructure, theta) -> Optional[np.ndarray]:
    """Coefficients of A_hat (OL_OE) or P_hat (closed loop) without building Polynomials."""
    k = structure.kind
    a = np.empty(structure.n_a + 1)
    a[0] = 1.0
    a[1:] = theta[: structure.n_a]
    if k is Kind.OL_OE:
        return a
    if not k.closed_loop:
        return None
    b = np.zeros(structure.delay + structure.n_b)
    b[structure.delay :] = theta[structure.n_a : structure.n_a + structure.n_b]
    AS = np.convolve(a, structure.controller.S.coeffs)
    BR = np.convolve(b, structure.controller.R.coeffs)
    out = np.zeros(max(AS.size, BR.size))
    out[: AS.size] += AS
    out[: BR.size] += BR
    return out


def stationarity_stats(eps, regressors) -> dict:
    """Normalized correlation of ``eps(t+1)`` with each ``phi_i(t)`` and its verdict."""
    e = np.asarray(eps)[1:]
    R = np.asarray(regressors)[:-1]
    n = e.size
    bound = 3.0 / np.sqrt(n)
    corr = []
    for i in range(R.shape[1]):
        try:
            corr.append(float(cross_correlation(e, R[:, i], 0)[0]))
        except ValueError:
            corr.append(0.0)
    return {
        "correlations": corr,
        "bound": float(bound),
        "max_abs": float(np.max(np.abs(corr))) if corr else 0.0,
        "stationary": bool(all(abs(c) < bound for c in corr)),
        "samples": int(n),
    }


def run_plr(
    structure: ModelStructure,
    data: DataRecord,
    filter_spec: Optional[RegressorFilterSpec] = None,
    *,
    passes: int = DEFAULT_PASSES,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    initial_gain: float = DEFAULT_INITIAL_GAIN,
    theta0=None,
    guard: bool = True,
) -> EstimationResult:
    """Recursive PLR estimation over ``passes`` sweeps of the record.

    The estimate is carried from pass to pass, the adaptation gain and the
    predictor histories are reset at the start of every pass. When ``guard``
    is on, an update that would make the predictor unstable (A_hat for OL_OE,
    P_hat for closed-loop kinds) is skipped and counted.
    """
    spec = filter_spec or RegressorFilterSpec.none()
    n_par = structure.n_params
    n = data.sample_count
    if n < 10 * n_par:
        raise ValueError(f"record too short: {n} samples for {n_par} parameters (need >= {10 * n_par})")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    excitation = data.r_u if structure.kind.closed_loop else data.u
    if excitation is None:
        raise ValueError("closed-loop structure needs r_u in the data record")
    if not np.any(excitation) or not np.any(data.y):
        raise ValueError("record carries no excitation: information matrix is singular")
    if spec.mode is FilterMode.ADAPTIVE_P0 and not structure.kind.closed_loop:
        raise ValueError("adaptive_P0 filtering applies to closed-loop structures")

    state = PaaState.initial(n_par, initial_gain, theta0, lambda1, lambda2)
    y = data.y
    trajectory = np.zeros((passes * (n - 1), n_par))
    snapshots = []
    guard_trips = 0
    row = 0
    for _ in range(passes):
        state.start_pass(n, y0=y[0])
        for t in range(n - 1):
            phi = build_regressor(structure, state, data, t)
            state.phi[t] = phi
            pf = _filtered_regressor(spec, structure, state, t)
            state.phi_f[t] = pf
            theta_prev, F_prev = state.theta, state.F
            eps, eps0 = paa_step(state, phi, y[t + 1], pf)
            if guard:
                gc = _guard_coeffs(structure, state.theta)
                if gc is not None and not schur_stable(gc):
                    state.theta, state.F = theta_prev, F_prev
                    eps = eps0
                    guard_trips += 1
            if t % PD_CHECK_EVERY == 0 and np.linalg.eigvalsh(state.F).min() <= 0.0:
                state.F = state.F0.copy()
                state.reinit_events += 1
            state.eps[t + 1] = eps
            state.yhat[t + 1] = y[t + 1] - eps
            trajectory[row] = state.theta
            row += 1
        last = n - 1
        state.phi[last] = build_regressor(structure, state, data, last)
        state.phi_f[last] = _filtered_regressor(spec, structure, state, last)
        snapshots.append(state.theta.copy())

    theta = state.theta.copy()
    try:
        stable = structure.predictor_poly(theta).is_stable()
    except ValueError:
        stable = False
    if stable:
        e = prediction_error(structure, theta, data)[structure.transient:]
        loss = float(np.mean(e ** 2))
    else:
        loss = float("inf")
    used = state.phi_f if spec.mode is not FilterMode.NONE else state.phi
    return EstimationResult(
        method="PLR",
        structure=structure,
        theta=theta,
        loss=loss,
        eps=state.eps.copy(),
        regressors=used.copy(),
        trajectory=trajectory,
        pass_snapshots=snapshots,
        stationarity=stationarity_stats(state.eps, used),
        diagnostics={
            "guard_trips": guard_trips,
            "steps": passes * (n - 1),
            "gain_reinit_events": state.reinit_events,
            "passes": passes,
            "lambda1": lambda1,
            "lambda2": lambda2,
            "initial_gain": initial_gain,
            "filter": spec.to_dict(),
        },
    )


def q_polynomial(structure: ModelStructure, theta) -> RationalFilter:
    """``Q = 1 + theta' d phi / d(q eps)`` in closed form.

    ARX: 1; ARMAX: C_hat; OE: A_hat; CL_OE: P_hat / S;
    CL_ARMAX: the implied noise polynomial ``((H_hat - 1) S + P_hat) / S``.
    """
    A, B, C = structure.polynomials(theta)
    k = structure.kind
    if k is Kind.OL_ARX:
        return RationalFilter.gain(1.0)
    if k is Kind.OL_ARMAX:
        return RationalFilter(C, 1.0)
    if k is Kind.OL_OE:
        return RationalFilter(A, 1.0)
    S = structure.controller.S
    if k is Kind.CL_OE:
        return RationalFilter(structure.char_poly(theta), S)
    return RationalFilter(structure.predictor_poly(theta), S)
