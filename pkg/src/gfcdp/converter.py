"""Grid-forming converter model in converter-frame dynamic phasors of
orders {0, +-2}: terminal-voltage magnitude loop with power-frequency
droop, inner voltage loop, current loop with reference limiting, and the
RLC output filter.

The per-order arithmetic lives in numba-compiled block functions operating
on complex coefficients; the same blocks evaluated at order 0 with real
inputs are the instantaneous vector-control equations, which is how the
time-domain reference model reuses them.  The DpSet-level functions wrap
the blocks order by order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dynphasor import DpSet, dq_truncated, dp_multiply
from .parameters import (
    GfcParams,
    LIMITER_CONSTANT_ANGLE,
    LIMITER_NONE,
    LIMITER_Q_PRIORITY,
)

# integer codes for the numba kernels
LIMITER_CODE = {LIMITER_NONE: 0, LIMITER_CONSTANT_ANGLE: 1, LIMITER_Q_PRIORITY: 2}

_DQ_ORDERS = (0, 2)


@dataclass
class GfcState:
    """Converter states as DpSet pairs over orders {0, +-2} plus scalars.

    vloop: inner voltage-loop integrators (error integral, V*s)
    iloop: current-loop integrators (error integral, A*s)
    flux:  filter inductor flux L*i_t, Wb
    charge: filter capacitor charge C*v, C
    vmag_int: terminal-voltage magnitude loop integrator, V
    p_filt: low-pass filtered real power, W
    angle: converter frame angle relative to the synchronous frame, rad
    """

    vloop_d: DpSet
    vloop_q: DpSet
    iloop_d: DpSet
    iloop_q: DpSet
    flux_d: DpSet
    flux_q: DpSet
    charge_d: DpSet
    charge_q: DpSet
    vmag_int: float
    p_filt: float
    angle: float

    @classmethod
    def zero(cls) -> "GfcState":
        z = lambda: DpSet(_DQ_ORDERS, (0.0, 0.0))
        return cls(z(), z(), z(), z(), z(), z(), z(), z(), 0.0, 0.0, 0.0)

    def terminal_voltage(self, params: GfcParams):
        """Filter capacitor voltage pair v = charge / C."""
        c = params.c_filter
        vd = self.charge_d.with_coeffs([x / c for x in self.charge_d.coeffs])
        vq = self.charge_q.with_coeffs([x / c for x in self.charge_q.coeffs])
        return vd, vq

    def inductor_current(self, params: GfcParams):
        """Converter-side inductor current pair i_t = flux / L."""
        l = params.l_filter
        gd = self.flux_d.with_coeffs([x / l for x in self.flux_d.coeffs])
        gq = self.flux_q.with_coeffs([x / l for x in self.flux_q.coeffs])
        return gd, gq


# ---------------------------------------------------------------------------
# numba block primitives (complex per-order arithmetic)
# ---------------------------------------------------------------------------

@njit(cache=True)
def inner_voltage_block(kws, x1d, x1q, vsd, vsq, vd, vq, gd, gq, kvp, kvi, wc_c):
    """Voltage-loop integrator derivative and current reference at one order.

    kws = k * w_s carries the phasor-rotation term; wc_c = w_c * C is the
    capacitor-current feedforward; gd/gq is the measured output current.
    """
    dx1d = vsd - vd - 1j * kws * x1d
    dx1q = vsq - vq - 1j * kws * x1q
    rd = kvi * x1d + kvp * vsd - kvp * vd - wc_c * vq + gd
    rq = kvi * x1q + kvp * vsq + wc_c * vd - kvp * vq + gq
    return dx1d, dx1q, rd, rq


@njit(cache=True)
def current_control_block(kws, x2d, x2q, rd, rq, itd, itq, vd, vq, kcp, kci, wc_l):
    """Current-loop integrator derivative and bridge voltage at one order.

    wc_l = w_c * L is the decoupling term; vd/vq feed the terminal voltage
    forward to the bridge reference.
    """
    dx2d = rd - itd - 1j * kws * x2d
    dx2q = rq - itq - 1j * kws * x2q
    vtd = kci * x2d + kcp * rd - kcp * itd - wc_l * itq + vd
    vtq = kci * x2q + kcp * rq + wc_l * itd - kcp * itq + vq
    return dx2d, dx2q, vtd, vtq


@njit(cache=True)
def filter_block(kws, fd, fq, cd, cq, vtd, vtq, gd, gq, r, l, c, wc):
    """RLC filter state derivatives at one order.

    States are inductor flux (fd, fq) and capacitor charge (cd, cq); the
    inductor current i_t = flux/L and terminal voltage v = charge/C close
    the loop; gd/gq is the current drawn by the network.
    """
    itd = fd / l
    itq = fq / l
    vd = cd / c
    vq = cq / c
    dfd = -(r / l) * fd + wc * fq + vtd - vd - 1j * kws * fd
    dfq = -wc * fd - (r / l) * fq + vtq - vq - 1j * kws * fq
    dcd = wc * cq + itd - gd - 1j * kws * cd
    dcq = -wc * cd + itq - gq - 1j * kws * cq
    return dfd, dfq, dcd, dcq


@njit(cache=True)
def limit_dc(d0, q0, i_sat, mode):
    """Clamp the dc (order-0) current reference.  mode: 0 pass, 1 keeps the
    reference angle, 2 gives the q-axis priority.  Returns the clamped dc
    pair and the branch taken (0 pass, 1 angle-clamp, 2 q-hold, 3 q-clamp)."""
    m = math.hypot(d0, q0)
    if mode == 0 or m <= i_sat:
        return d0, q0, 0
    if mode == 1:
        th = math.atan2(q0, d0)
        return i_sat * math.cos(th), i_sat * math.sin(th), 1
    if abs(q0) < i_sat:
        return math.sqrt(i_sat * i_sat - q0 * q0), q0, 2
    return 0.0, (i_sat if q0 >= 0.0 else -i_sat), 3


@njit(cache=True)
def outer_pi_block(v0mag, vint, vset, kp, ki):
    """Magnitude-loop PI: returns (d vint/dt, d-axis voltage reference)."""
    verr = vset - v0mag
    return ki * verr, kp * verr + vint


@njit(cache=True)
def droop_block(pc, p_filt, pref, dpc, taup, droop_on):
    """Power filter and droop: returns (d p_filt/dt, d angle/dt)."""
    dpf = (pc - p_filt) / taup
    dth = dpc * (pref - p_filt) if droop_on != 0 else 0.0
    return dpf, dth


@njit(cache=True)
def dp_power_dc(vd0, vq0, vd2, vq2, gd0, gq0, gd2, gq2):
    """Order-0 coefficient of v_d*i_d + v_q*i_q over orders {0, +-2}."""
    p2 = vd2 * np.conj(gd2) + vq2 * np.conj(gq2)
    return vd0 * gd0 + vq0 * gq0 + 2.0 * p2.real


# ---------------------------------------------------------------------------
# DpSet-level operations
# ---------------------------------------------------------------------------

def real_power_dc(v_pair, i_pair) -> float:
    """Order-0 power from DP convolution of the (d, q) voltage and current."""
    vd, vq = v_pair
    gd, gq = i_pair
    p = dp_multiply(vd, gd, (0,)).coeff(0) + dp_multiply(vq, gq, (0,)).coeff(0)
    if abs(p.imag) > 1e-9 * max(1.0, abs(p)):
        raise AssertionError("dc power came out complex")
    return p.real


def outer_droop_derivatives(state: GfcState, v_pair, i_pair, params: GfcParams,
                            droop_on: bool = True):
    """Magnitude-loop, power-filter and droop derivatives plus the voltage
    reference pair.  The magnitude loop acts on the order-0 voltage
    magnitude only; the order +-2 references are zero."""
    vd, vq = v_pair
    v0mag = math.hypot(vd.coeff(0).real, vq.coeff(0).real)
    dvint, vs_d0 = outer_pi_block(v0mag, state.vmag_int, params.v_ref,
                                  params.k_p_ac, params.k_i_ac)
    pc = real_power_dc(v_pair, i_pair)
    dpf, dth = droop_block(pc, state.p_filt, params.p_ref, params.d_pc,
                           params.tau_p, 1 if droop_on else 0)
    vs_pair = dq_truncated(vs_d0, 0.0, 0.0, 0.0)
    return dvint, dpf, dth, vs_pair, pc


def inner_voltage_controller(x1_pair, vs_pair, v_pair, i_pair,
                             params: GfcParams, omega_s: float):
    """Per-order voltage-loop derivatives and raw current reference pair."""
    x1d, x1q = x1_pair
    vsd, vsq = vs_pair
    vd, vq = v_pair
    gd, gq = i_pair
    wc_c = omega_s * params.c_filter
    dxd, dxq, rd, rq = [], [], [], []
    for k in x1d.orders:
        a, b, c, d = inner_voltage_block(
            k * omega_s, x1d.coeff(k), x1q.coeff(k), vsd.coeff(k), vsq.coeff(k),
            vd.coeff(k), vq.coeff(k), gd.coeff(k), gq.coeff(k),
            params.k_vp, params.k_vi, wc_c)
        dxd.append(a); dxq.append(b); rd.append(c); rq.append(d)
    return (x1d.with_coeffs(dxd), x1q.with_coeffs(dxq)), \
           (x1d.with_coeffs(rd), x1q.with_coeffs(rq))


def current_controller(x2_pair, ref_pair, it_pair, v_pair,
                       params: GfcParams, omega_s: float):
    """Per-order current-loop derivatives and bridge voltage pair."""
    x2d, x2q = x2_pair
    rd, rq = ref_pair
    itd, itq = it_pair
    vd, vq = v_pair
    wc_l = omega_s * params.l_filter
    dxd, dxq, vtd, vtq = [], [], [], []
    for k in x2d.orders:
        a, b, c, d = current_control_block(
            k * omega_s, x2d.coeff(k), x2q.coeff(k), rd.coeff(k), rq.coeff(k),
            itd.coeff(k), itq.coeff(k), vd.coeff(k), vq.coeff(k),
            params.k_cp, params.k_ci, wc_l)
        dxd.append(a); dxq.append(b); vtd.append(c); vtq.append(d)
    return (x2d.with_coeffs(dxd), x2q.with_coeffs(dxq)), \
           (x2d.with_coeffs(vtd), x2q.with_coeffs(vtq))


def filter_derivatives(flux_pair, charge_pair, vt_pair, i_pair,
                       params: GfcParams, omega_s: float):
    """Per-order filter derivatives; returns (dflux, dcharge, i_t, v)."""
    fd, fq = flux_pair
    cd, cq = charge_pair
    vtd, vtq = vt_pair
    gd, gq = i_pair
    dfd, dfq, dcd, dcq = [], [], [], []
    for k in fd.orders:
        a, b, c, d = filter_block(
            k * omega_s, fd.coeff(k), fq.coeff(k), cd.coeff(k), cq.coeff(k),
            vtd.coeff(k), vtq.coeff(k), gd.coeff(k), gq.coeff(k),
            params.r_filter, params.l_filter, params.c_filter, omega_s)
        dfd.append(a); dfq.append(b); dcd.append(c); dcq.append(d)
    l, c = params.l_filter, params.c_filter
    it = (fd.with_coeffs([x / l for x in fd.coeffs]),
          fq.with_coeffs([x / l for x in fq.coeffs]))
    v = (cd.with_coeffs([x / c for x in cd.coeffs]),
         cq.with_coeffs([x / c for x in cq.coeffs]))
    return (fd.with_coeffs(dfd), fq.with_coeffs(dfq)), \
           (cd.with_coeffs(dcd), cq.with_coeffs(dcq)), it, v


def limit_reference(ref_pair, i_sat: float, mode: str):
    """Apply the selected limiter to the current reference pair.

    The saturation test and the clamp act on the order-0 (dc) components;
    the order +-2 components pass through unchanged so unbalance ripple is
    not reshaped.  Returns (limited pair, branch code)."""
    rd, rq = ref_pair
    d0 = rd.coeff(0).real
    q0 = rq.coeff(0).real
    d0l, q0l, branch = limit_dc(d0, q0, i_sat, LIMITER_CODE[mode])
    if branch == 0:
        return (rd, rq), 0
    new_d = [d0l if k == 0 else rd.coeff(k) for k in rd.orders]
    new_q = [q0l if k == 0 else rq.coeff(k) for k in rq.orders]
    return (rd.with_coeffs(new_d), rq.with_coeffs(new_q)), branch


def limit_constant_angle(ref_pair, i_sat: float):
    """Magnitude clamp of the dc reference preserving its angle."""
    pair, _ = limit_reference(ref_pair, i_sat, LIMITER_CONSTANT_ANGLE)
    return pair


def limit_q_priority(ref_pair, i_sat: float):
    """Three-branch limiter giving the reactive (q) reference priority."""
    pair, _ = limit_reference(ref_pair, i_sat, LIMITER_Q_PRIORITY)
    return pair
