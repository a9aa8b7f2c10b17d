"""Dynamic-phasor algebra.

A dynamic phasor of order k is the k-th complex Fourier coefficient of a
signal over a sliding window of one fundamental period T = 2*pi/w_s:

    <x>_k(t) = (1/T) * integral_{t-T}^{t} x(tau) exp(-j k w_s tau) dtau

so that x(tau) ~ sum_k <x>_k(t) exp(j k w_s tau).  Only a small set of
dominant orders is kept.  This module provides the coefficient container
(`DpSet`), the rotation between converter-frame (dq) and synchronous-frame
(DQ) coefficients, the map between synchronous-frame and sequence-frame
(pnz) coefficients, coefficient convolution (products of signals),
waveform reconstruction and sliding-window extraction from samples.

Conventions: all transforms are power-invariant (unitary), so products of
voltage and current coefficients give watts directly.  For real signals
<x>_{-k} = conj(<x>_k); only nonnegative orders are stored and negative
orders are derived views.  For a positive/negative sequence pair the
partner relation <x_n>_{-k} = conj(<x_p>_k) holds and each member stores
its positive orders only.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

# conjugacy classes
REAL_SIGNAL = "real-signal"
PN_PAIRED = "pn-paired"
FREE = "free"

_REL_TOL_REAL_DC = 1e-12

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class DpSet:
    """Dynamic phasors of one signal: stored orders with their coefficients.

    `conjugacy` declares how coefficients at unstored (negative) orders are
    derived: "real-signal" derives <x>_{-k} = conj(<x>_k), "pn-paired"
    marks one member of a sequence pair (the partner holds the mirror
    coefficients), "free" treats unstored orders as zero.
    """

    orders: tuple
    coeffs: tuple
    conjugacy: str = REAL_SIGNAL

    def __post_init__(self):
        if len(self.orders) != len(self.coeffs):
            raise ValueError("orders and coeffs length mismatch")
        if len(set(self.orders)) != len(self.orders):
            raise ValueError("duplicate orders")
        object.__setattr__(self, "orders", tuple(int(k) for k in self.orders))
        object.__setattr__(self, "coeffs", tuple(complex(c) for c in self.coeffs))
        if self.conjugacy in (REAL_SIGNAL, PN_PAIRED):
            if any(k < 0 for k in self.orders):
                raise ValueError(
                    "store only nonnegative orders for %s conjugacy; negative "
                    "orders are derived" % self.conjugacy
                )
        if self.conjugacy == REAL_SIGNAL and 0 in self.orders:
            c0 = self.coeffs[self.orders.index(0)]
            if abs(c0.imag) > _REL_TOL_REAL_DC * max(1.0, abs(c0)):
                raise ValueError("dc coefficient of a real signal must be real")

    def coeff(self, k: int) -> complex:
        """Coefficient at order k, deriving negative orders by conjugacy."""
        if k in self.orders:
            return self.coeffs[self.orders.index(k)]
        if self.conjugacy == REAL_SIGNAL and -k in self.orders:
            return self.coeffs[self.orders.index(-k)].conjugate()
        return 0.0 + 0.0j

    def available_orders(self) -> tuple:
        """Stored orders plus the derived mirror orders."""
        ks = set(self.orders)
        if self.conjugacy == REAL_SIGNAL:
            ks |= {-k for k in self.orders}
        return tuple(sorted(ks))

    def with_coeffs(self, coeffs) -> "DpSet":
        return DpSet(self.orders, tuple(coeffs), self.conjugacy)

    def is_zero(self, tol: float = 0.0) -> bool:
        return all(abs(c) <= tol for c in self.coeffs)


def _check_same_orders(a: DpSet, b: DpSet, what: str):
    if a.orders != b.orders or a.conjugacy != b.conjugacy:
        raise ValueError("%s: operands carry different order sets" % what)


def rotate_frame(x_d: DpSet, x_q: DpSet, theta: float, direction: str):
    """Rotate a (d, q) coefficient pair between converter and synchronous frames.

    Per order k the pair transforms as
    (<x_D>_k + j<x_Q>_k) = (<x_d>_k + j<x_q>_k) * exp(j*theta);
    equivalently a real 2x2 rotation acting on the (d, q) coefficients,
    which preserves real-signal conjugacy.  direction "dq->DQ" applies
    +theta, "DQ->dq" applies -theta.
    """
    _check_same_orders(x_d, x_q, "rotate_frame")
    if not math.isfinite(theta):
        raise ValueError("rotation angle must be finite")
    if direction == "dq->DQ":
        c, s = math.cos(theta), math.sin(theta)
    elif direction == "DQ->dq":
        c, s = math.cos(-theta), math.sin(-theta)
    else:
        raise ValueError("direction must be 'dq->DQ' or 'DQ->dq'")
    out_d = [c * cd - s * cq for cd, cq in zip(x_d.coeffs, x_q.coeffs)]
    out_q = [s * cd + c * cq for cd, cq in zip(x_d.coeffs, x_q.coeffs)]
    return x_d.with_coeffs(out_d), x_q.with_coeffs(out_q)


_DQ_ORDERS = (0, 2)
_PNZ_ORDERS = (1,)


def dq_truncated(c0_d, c2_d, c0_q, c2_q):
    """Build the (d, q) DpSet pair of the converter model truncation {0, +-2}."""
    x_d = DpSet(_DQ_ORDERS, (c0_d, c2_d), REAL_SIGNAL)
    x_q = DpSet(_DQ_ORDERS, (c0_q, c2_q), REAL_SIGNAL)
    return x_d, x_q


def sequence_frame_map(*components, direction: str):
    """Map between synchronous-frame DPs over {0, +-2} and sequence DPs at +-1.

    direction "DQ->pnz": arguments (x_D, x_Q[, x_0]); returns (x_p, x_n, x_z).
    direction "pnz->DQ": arguments (x_p, x_n[, x_z]); returns (x_D, x_Q, x_0).

    Forward map per order k: <x_p>_{k+1} = (<x_D>_k + j<x_Q>_k)/sqrt(2) and
    <x_n>_{k-1} = (<x_D>_k - j<x_Q>_k)/sqrt(2); the zero channel passes
    through unchanged.  Orders landing outside the destination truncation
    ({+-1} for pnz, {0, +-2} for DQ) are dropped; the dropped orders are
    exactly those absent from the source truncation, so the restricted map
    is invertible.
    """
    if direction == "DQ->pnz":
        if len(components) not in (2, 3):
            raise ValueError("DQ->pnz expects (x_D, x_Q[, x_0])")
        x_D, x_Q = components[0], components[1]
        x_0 = components[2] if len(components) == 3 else None
        for c in (x_D, x_Q):
            if c.orders != _DQ_ORDERS or c.conjugacy != REAL_SIGNAL:
                raise ValueError("DQ inputs must be real-signal DPs over {0, +-2}")
        # k=0 row feeds <x_p>_{+1}; k=+2 row feeds <x_n>_{+1}; the k=+2 row's
        # p-side (order +3) and the k=-2 row's n-side (order -3) fall outside
        # the pnz truncation and are dropped.
        cp1 = (x_D.coeff(0) + 1j * x_Q.coeff(0)) / SQRT2
        cn1 = (x_D.coeff(2) - 1j * x_Q.coeff(2)) / SQRT2
        x_p = DpSet(_PNZ_ORDERS, (cp1,), PN_PAIRED)
        x_n = DpSet(_PNZ_ORDERS, (cn1,), PN_PAIRED)
        if x_0 is None:
            x_z = DpSet(_PNZ_ORDERS, (0.0,), REAL_SIGNAL)
        else:
            x_z = DpSet(_PNZ_ORDERS, (x_0.coeff(1),), x_0.conjugacy)
        return x_p, x_n, x_z

    if direction == "pnz->DQ":
        if len(components) not in (2, 3):
            raise ValueError("pnz->DQ expects (x_p, x_n[, x_z])")
        x_p, x_n = components[0], components[1]
        x_z = components[2] if len(components) == 3 else None
        for c in (x_p, x_n):
            if c.orders != _PNZ_ORDERS:
                raise ValueError("pnz inputs must carry order {+1}")
        cp1 = x_p.coeff(1)
        cn1 = x_n.coeff(1)
        # partner relation supplies the -1 orders: <x_p>_{-1} = conj(<x_n>_1),
        # <x_n>_{-1} = conj(<x_p>_1)
        cD0 = (cp1 + cp1.conjugate()) / SQRT2
        cQ0 = (cp1 - cp1.conjugate()) / (SQRT2 * 1j)
        cD2 = cn1 / SQRT2
        cQ2 = -cn1 / (SQRT2 * 1j)
        x_D = DpSet(_DQ_ORDERS, (cD0.real, cD2), REAL_SIGNAL)
        x_Q = DpSet(_DQ_ORDERS, (cQ0.real, cQ2), REAL_SIGNAL)
        if x_z is None:
            x_0 = None
        else:
            x_0 = x_z
        return x_D, x_Q, x_0

    raise ValueError("direction must be 'DQ->pnz' or 'pnz->DQ'")


def dp_multiply(x: DpSet, y: DpSet, out_orders) -> DpSet:
    """Coefficients of the product signal: discrete convolution of DPs.

    <xy>_m = sum_k <x>_k <y>_{m-k}, the sum running over the orders each
    operand makes available (stored plus conjugate-derived); missing orders
    contribute zero.  The result is returned over exactly `out_orders`.
    """
    out_orders = tuple(int(m) for m in out_orders)
    xk = {k: x.coeff(k) for k in x.available_orders()}
    yk = {k: y.coeff(k) for k in y.available_orders()}
    coeffs = []
    for m in out_orders:
        acc = 0.0 + 0.0j
        for k, cx in xk.items():
            cy = yk.get(m - k)
            if cy is not None:
                acc += cx * cy
        coeffs.append(acc)
    return DpSet(out_orders, tuple(coeffs), FREE)


def reconstruct(x: DpSet, t: float, omega_s: float):
    """Evaluate the truncated Fourier sum of a DpSet at time t.

    Real-signal sets return a float (the imaginary residue, bounded by
    roundoff, is discarded); other conjugacies return the complex sum over
    the stored orders only.
    """
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    acc = 0.0 + 0.0j
    for k in x.available_orders():
        acc += x.coeff(k) * cmath.exp(1j * k * omega_s * t)
    if x.conjugacy == REAL_SIGNAL:
        scale = max(abs(acc), max((abs(c) for c in x.coeffs), default=0.0))
        if scale > 0.0 and abs(acc.imag) > 1e-9 * scale:
            raise AssertionError("real-signal reconstruction left an imaginary residue")
        return acc.real
    return acc


def reconstruct_pn(x_p: DpSet, x_n: DpSet, t: float, omega_s: float) -> complex:
    """Evaluate a sequence-pair member using its partner for the -1 order."""
    return x_p.coeff(1) * cmath.exp(1j * omega_s * t) + x_n.coeff(1).conjugate() * cmath.exp(
        -1j * omega_s * t
    )


def extract_dp(samples, t0: float, dt: float, t: float, k: int, omega_s: float,
               window: float | None = None) -> complex:
    """Sliding-window Fourier coefficient of uniformly sampled data at one instant.

    Trapezoidal approximation of (1/T) * integral_{t-T}^{t} x exp(-jk w_s tau) dtau
    with T one fundamental period unless `window` overrides it.  The window
    must be fully covered by the samples and the sampling must resolve at
    least 64 points per fundamental period.
    """
    samples = np.asarray(samples)
    T = 2.0 * math.pi / omega_s if window is None else float(window)
    if dt > T / 64.0 + 1e-15:
        raise ValueError("sample spacing too coarse: need >= 64 points per period")
    n = samples.shape[0]
    t_end = t0 + (n - 1) * dt
    if t - T < t0 - 1e-12 or t > t_end + 1e-12:
        raise ValueError("window [t-T, t] not covered by samples")
    times, coeffs = extract_dp_series(samples, t0, dt, k, omega_s, window=T)
    i = int(round((t - times[0]) / dt))
    i = min(max(i, 0), len(times) - 1)
    if abs(times[i] - t) > dt:
        raise ValueError("requested instant does not fall on the sample grid")
    return complex(coeffs[i])


def extract_dp_series(samples, t0: float, dt: float, k: int, omega_s: float,
                      window: float | None = None):
    """Sliding-window coefficients at every sample instant where the window fits.

    Returns (times, coeffs).  The running integral is accumulated by
    trapezoids; a fractional subinterval at the trailing window edge keeps
    the window length exact when it is not a whole number of samples.
    """
    x = np.asarray(samples, dtype=np.complex128)
    T = 2.0 * math.pi / omega_s if window is None else float(window)
    if dt > T / 64.0 + 1e-15:
        raise ValueError("sample spacing too coarse: need >= 64 points per period")
    n = x.shape[0]
    tau = t0 + dt * np.arange(n)
    y = x * np.exp(-1j * k * omega_s * tau)
    # running trapezoid integral I[m] = int_{t0}^{tau_m} y
    inc = 0.5 * dt * (y[1:] + y[:-1])
    I = np.concatenate(([0.0 + 0.0j], np.cumsum(inc)))
    ratio = T / dt
    n0 = int(math.floor(ratio + 1e-9))
    frac = ratio - n0
    if n0 >= n:
        raise ValueError("window longer than the sampled record")
    m = np.arange(n0, n)
    win = I[m] - I[m - n0]
    if frac > 1e-9:
        # the window start falls inside [tau_{m-n0-1}, tau_{m-n0}]: add the
        # partial trapezoid from the interpolated integrand
        j = m - n0
        lead = j >= 1
        yj = y[j[lead]]
        yjm = y[j[lead] - 1]
        ys = yj + (yjm - yj) * frac
        win = win.astype(np.complex128)
        win[lead] += 0.5 * (ys + yj) * (frac * dt)
        m = m[lead]
        win = win[lead]
    return tau[m], win / T
