"""Small-signal analysis of the dynamic-phasor model: numerical
linearization at an equilibrium, eigenvalue decomposition with
participation factors, gain-sensitivity sweeps with mode tracking, and
the settling-time convention used for retuning."""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .parameters import Scenario, SystemParams, state_scales
from .simulator import (
    IDX_ANGLE,
    STATE_COMPONENT,
    STATE_LABELS,
    SystemRhs,
    apply_compensation,
    find_equilibrium,
)


def central_jacobian(f, x, scales, rel_step: float = 1e-6,
                     min_step: float = 1e-9) -> np.ndarray:
    """Central-difference Jacobian with per-state steps h_i = max(rel*scale_i,
    min_step).  Exact (to roundoff) for linear maps."""
    x = np.asarray(x, dtype=float)
    n = x.size
    f0 = np.asarray(f(x))
    J = np.empty((f0.size, n))
    for i in range(n):
        h = max(rel_step * scales[i], min_step)
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        J[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return J


class SaturatedOperatingPoint(RuntimeError):
    """Linearization refused: the current limiter is active at the point,
    which is not a smooth operating point."""


def numeric_jacobian(params: SystemParams, scenario: Scenario, y_eq,
                     drop_frozen_angle: bool = True):
    """System matrix of the unfaulted dynamics at the equilibrium.

    Returns (A, labels).  With droop disabled the angle state is frozen
    (its derivative is identically zero); its row and column are removed,
    which leaves the remaining eigenvalues and participations unchanged
    because a zero row contributes exactly one zero eigenvalue whose right
    eigenvector is the angle axis."""
    rhs = SystemRhs(params, scenario, fault_active=False)
    aux = rhs.aux(np.asarray(y_eq, dtype=float))
    if math.hypot(aux[8], aux[9]) >= params.gfc.i_sat:
        raise SaturatedOperatingPoint(
            "current reference magnitude %.1f A is at or above the limit "
            "%.1f A" % (math.hypot(aux[8], aux[9]), params.gfc.i_sat))
    scales = state_scales(params)
    A = central_jacobian(lambda x: rhs(0.0, x), y_eq, scales)
    labels = list(STATE_LABELS)
    if not scenario.droop and drop_frozen_angle:
        A = np.delete(np.delete(A, IDX_ANGLE, axis=0), IDX_ANGLE, axis=1)
        labels.pop(IDX_ANGLE)
    return A, labels


@dataclass
class ModalReport:
    """Eigenvalues with per-mode frequency/damping, eigenvectors and the
    participation matrix (states x modes, magnitude, max-normalized per
    mode)."""

    eigenvalues: np.ndarray          # complex, rad/s, sorted by damping ratio
    freq_hz: np.ndarray
    damping: np.ndarray
    right: np.ndarray                # columns are right eigenvectors
    left: np.ndarray                 # rows are left eigenvectors (inv of right)
    participation: np.ndarray        # |p_ki|, normalized to max 1 per mode
    participation_raw: np.ndarray    # complex p_ki before normalization
    labels: list
    condition: float = 0.0
    warnings: list = field(default_factory=list)

    def unique_mode_indices(self):
        """Indices keeping one member of each conjugate pair (Im >= 0)."""
        return [i for i, lam in enumerate(self.eigenvalues) if lam.imag >= -1e-12]

    def nearest_mode(self, freq_hz: float, oscillatory_only: bool = True):
        """Index of the mode whose frequency is closest to freq_hz."""
        best, best_d = None, np.inf
        for i in self.unique_mode_indices():
            if oscillatory_only and abs(self.eigenvalues[i].imag) < 1e-6:
                continue
            d = abs(self.freq_hz[i] - freq_hz)
            if d < best_d:
                best, best_d = i, d
        if best is None:
            raise ValueError("no oscillatory mode found")
        return best


def eigen_modes(A, labels=None) -> ModalReport:
    """Full eigendecomposition sorted with the least-damped modes first."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be a square matrix")
    if labels is None:
        labels = ["x%d" % i for i in range(A.shape[0])]
    lam, right = np.linalg.eig(A)
    cond = float(np.linalg.cond(right))
    warns = []
    if cond > 1e8:
        warns.append("eigenvector matrix conditioning %.2e suggests a "
                     "nearly defective system" % cond)
        warnings.warn(warns[-1])
    left = np.linalg.inv(right)
    mag = np.abs(lam)
    damping = np.where(mag > 0, -lam.real / np.where(mag > 0, mag, 1.0), 1.0)
    order = np.argsort(damping, kind="stable")
    lam = lam[order]
    right = right[:, order]
    left = left[order, :]
    damping = damping[order]
    freq = np.abs(lam.imag) / (2.0 * math.pi)
    p_raw = right * left.T  # p_ki = phi_ki * psi_ik
    p_abs = np.abs(p_raw)
    peak = p_abs.max(axis=0)
    p_norm = p_abs / np.where(peak > 0, peak, 1.0)
    return ModalReport(eigenvalues=lam, freq_hz=freq, damping=damping,
                       right=right, left=left, participation=p_norm,
                       participation_raw=p_raw, labels=list(labels),
                       condition=cond, warnings=warns)


def participation_factors(report: ModalReport):
    """Per-mode dominant-state ranking and compass-plot data.

    Returns (ranking, compass): ranking[i] is the list of (label,
    participation) sorted descending for mode i; compass[i] lists
    (label, participation magnitude, right-eigenvector angle in degrees)
    for the same ordering.  The mode-shape angle is taken from the right
    eigenvector entry."""
    ranking = []
    compass = []
    for i in range(report.eigenvalues.size):
        idx = np.argsort(report.participation[:, i])[::-1]
        ranking.append([(report.labels[j], float(report.participation[j, i]))
                        for j in idx])
        compass.append([(report.labels[j], float(report.participation[j, i]),
                         float(math.degrees(np.angle(report.right[j, i]))))
                        for j in idx])
    return ranking, compass


def component_ranking(report: ModalReport, mode_index: int):
    """Participation aggregated over physical components (max over the
    states belonging to each), sorted descending."""
    agg = {}
    for j, lab in enumerate(report.labels):
        comp = STATE_COMPONENT.get(lab, lab)
        agg[comp] = max(agg.get(comp, 0.0), float(report.participation[j, mode_index]))
    return sorted(agg.items(), key=lambda kv: kv[1], reverse=True)


def settling_time(lam: complex) -> float:
    """2 percent settling time 4/|Re(lambda)| of a stable mode."""
    if lam.real >= 0.0:
        raise ValueError("settling time undefined for a non-decaying mode")
    return 4.0 / abs(lam.real)


GAIN_GROUPS = {
    "outer": ("k_p_ac", "k_i_ac"),
    "inner": ("k_vp", "k_vi"),
    "droop": ("d_pc",),
}


def scale_gain_group(params: SystemParams, group: str, factor: float) -> SystemParams:
    if group not in GAIN_GROUPS:
        raise ValueError("unknown gain group %r (choose from %s)"
                         % (group, sorted(GAIN_GROUPS)))
    if factor <= 0.0:
        raise ValueError("gain factors must be positive")
    kw = {name: getattr(params.gfc, name) * factor for name in GAIN_GROUPS[group]}
    return SystemParams(gfc=dataclasses.replace(params.gfc, **kw), net=params.net)


@dataclass
class SweepPoint:
    factor: float
    eigenvalue: complex
    freq_hz: float
    damping: float
    converged: bool
    message: str = ""


@dataclass
class SweepResult:
    group: str
    points: list
    base_report: ModalReport
    tracked_base_index: int

    def table(self):
        return [(p.factor, p.eigenvalue.real, p.eigenvalue.imag, p.freq_hz,
                 p.damping, p.converged) for p in self.points]


def _mode_overlap(v_ref, V):
    v_ref = v_ref / np.linalg.norm(v_ref)
    Vn = V / np.linalg.norm(V, axis=0, keepdims=True)
    return np.abs(v_ref.conj() @ Vn)


def sensitivity_sweep(params: SystemParams, scenario: Scenario, group: str,
                      factors, target_hz: float | None = None) -> SweepResult:
    """Eigenvalue locus of one gain group over multiplicative factors.

    The equilibrium is re-solved and the system re-linearized at every
    factor; the tracked mode follows maximal right-eigenvector overlap
    from point to point starting at the factor closest to 1 (factors are
    processed in sorted order, so the trajectory does not depend on the
    input ordering).  Failed factors are recorded and skipped."""
    factors = sorted(float(f) for f in factors)
    if any(f <= 0.0 for f in factors):
        raise ValueError("gain factors must be positive")
    params = apply_compensation(params, scenario)
    scenario = dataclasses.replace(scenario, compensation=None)

    base = run_modes(params, scenario)
    if target_hz is None:
        idx = int(np.argmin(np.where(base.freq_hz > 1e-6, base.damping, np.inf)))
    else:
        idx = base.nearest_mode(target_hz)

    i_anchor = int(np.argmin([abs(f - 1.0) for f in factors]))
    points: list = [None] * len(factors)

    def at_factor(f, v_prev):
        p = scale_gain_group(params, group, f)
        try:
            y_eq = find_equilibrium(p, scenario)
            A, labels = numeric_jacobian(p, scenario, y_eq)
            rep = eigen_modes(A, labels)
        except Exception as exc:
            return SweepPoint(f, complex("nan"), float("nan"), float("nan"),
                              False, str(exc)), v_prev
        overl = _mode_overlap(v_prev, rep.right)
        j = int(np.argmax(overl))
        return SweepPoint(f, complex(rep.eigenvalues[j]), float(rep.freq_hz[j]),
                          float(rep.damping[j]), True), rep.right[:, j]

    # outward from the anchor in both directions
    v0 = base.right[:, idx]
    v = v0
    for i in range(i_anchor, len(factors)):
        points[i], v = at_factor(factors[i], v)
    v = v0
    for i in range(i_anchor - 1, -1, -1):
        points[i], v = at_factor(factors[i], v)
    return SweepResult(group=group, points=points, base_report=base,
                       tracked_base_index=idx)


def run_modes(params: SystemParams, scenario: Scenario) -> ModalReport:
    """Equilibrium + linearization + eigen decomposition in one call."""
    params = apply_compensation(params, scenario)
    scenario = dataclasses.replace(scenario, compensation=None)
    y_eq = find_equilibrium(params, scenario)
    A, labels = numeric_jacobian(params, scenario, y_eq)
    return eigen_modes(A, labels)


def fit_ringdown(t, x, f_guess_hz=None):
    """Least-squares fit of A*exp(sigma*t)*cos(w*t+phi)+c to a ring-down
    record.  Returns (sigma, omega) in rad/s."""
    from scipy.optimize import curve_fit

    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    t = t - t[0]
    c0 = x[-len(x) // 10:].mean()
    z = x - c0
    if f_guess_hz is None:
        dt = t[1] - t[0]
        spec = np.abs(np.fft.rfft(z * np.hanning(z.size)))
        freqs = np.fft.rfftfreq(z.size, d=dt)
        f_guess_hz = max(freqs[np.argmax(spec[1:]) + 1], 1e-3)
    w0 = 2.0 * math.pi * f_guess_hz
    # decay guess from the envelope of the first and last thirds
    n3 = max(len(z) // 3, 2)
    a0 = max(np.abs(z[:n3]).max(), 1e-12)
    a1 = max(np.abs(z[-n3:]).max(), 1e-12)
    sig0 = math.log(a1 / a0) / max(t[-1] - t[n3 // 2], 1e-9)

    def model(tt, a, sig, w, phi, c):
        return a * np.exp(sig * tt) * np.cos(w * tt + phi) + c

    p0 = (a0, sig0, w0, 0.0, 0.0)
    popt, _ = curve_fit(model, t, z, p0=p0, maxfev=20000)
    return float(popt[1]), float(abs(popt[2]))
