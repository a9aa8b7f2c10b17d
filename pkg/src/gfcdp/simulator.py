"""System assembly and scenario execution.

The converter model (dq-frame DPs, orders {0, +-2}) and the network model
(pnz-frame DPs, order +-1) are coupled per time step by the frame chain
pnz <-> synchronous DQ <-> converter dq.  The full state is a flat vector
of 43 reals; the fused right-hand side is numba-compiled, and a slower
DpSet-based reference assembly of the identical equations is kept for
cross-checking.

State vector layout (pack/unpack):
    0..7    converter order-0 coefficients (real):
            vloop_d, vloop_q, iloop_d, iloop_q, flux_d, flux_q,
            charge_d, charge_q
    8..23   converter order +2 coefficients (re, im per entry, same order)
    24..26  vmag_int, p_filt, angle
    27..32  line current +1 coefficients: p, n, z (re, im each)
    33..36  transformer current +1 coefficients: p, n
    37..42  series-capacitor voltage +1 coefficients: p, n, z
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import converter as conv
from . import network as net
from .converter import (
    GfcState,
    LIMITER_CODE,
    current_control_block,
    dp_power_dc,
    droop_block,
    filter_block,
    inner_voltage_block,
    limit_dc,
    outer_pi_block,
)
from .dynphasor import DpSet, PN_PAIRED, REAL_SIGNAL, SQRT2, rotate_frame, sequence_frame_map
from .network import NetworkState, line_branch_block, series_cap_block, transformer_branch_block
from .parameters import Scenario, SystemParams, state_scales

N_STATES = 43

STATE_LABELS = (
    "vloop_d.0", "vloop_q.0", "iloop_d.0", "iloop_q.0",
    "flux_d.0", "flux_q.0", "charge_d.0", "charge_q.0",
    "vloop_d.2re", "vloop_d.2im", "vloop_q.2re", "vloop_q.2im",
    "iloop_d.2re", "iloop_d.2im", "iloop_q.2re", "iloop_q.2im",
    "flux_d.2re", "flux_d.2im", "flux_q.2re", "flux_q.2im",
    "charge_d.2re", "charge_d.2im", "charge_q.2re", "charge_q.2im",
    "vmag_int", "p_filt", "angle",
    "iline_p.re", "iline_p.im", "iline_n.re", "iline_n.im",
    "iline_z.re", "iline_z.im",
    "itx_p.re", "itx_p.im", "itx_n.re", "itx_n.im",
    "vser_p.re", "vser_p.im", "vser_n.re", "vser_n.im",
    "vser_z.re", "vser_z.im",
)

# physical grouping used when ranking participation factors
STATE_COMPONENT = {}
for _i, _lab in enumerate(STATE_LABELS):
    _base = _lab.split(".")[0]
    STATE_COMPONENT[_lab] = {
        "vloop_d": "voltage loop", "vloop_q": "voltage loop",
        "iloop_d": "current loop", "iloop_q": "current loop",
        "flux_d": "filter L", "flux_q": "filter L",
        "charge_d": "filter C", "charge_q": "filter C",
        "vmag_int": "magnitude loop", "p_filt": "power filter",
        "angle": "angle",
        "iline_p": "line L2", "iline_n": "line L2", "iline_z": "line L2",
        "itx_p": "transformer L1", "itx_n": "transformer L1",
        "vser_p": "series C2", "vser_n": "series C2", "vser_z": "series C2",
    }[_base]

IDX_VMAG_INT = 24
IDX_P_FILT = 25
IDX_ANGLE = 26

# auxiliary (algebraic) outputs of the fused right-hand side
AUX_LABELS = (
    "vbus_p.re", "vbus_p.im", "vbus_n.re", "vbus_n.im", "vbus_z.re", "vbus_z.im",
    "pc", "branch",
    "itref_d0", "itref_q0",
    "itref_d2.re", "itref_d2.im", "itref_q2.re", "itref_q2.im",
    "itlim_d0", "itlim_q0",
)
N_AUX = len(AUX_LABELS)

# parameter vector layout for the numba kernels
_PAR_FIELDS = (
    "omega_s", "r_filter", "l_filter", "c_filter", "k_p_ac", "k_i_ac",
    "k_vp", "k_vi", "k_cp", "k_ci", "d_pc", "tau_p", "p_ref", "v_ref",
    "i_sat", "l1", "r2", "l2", "c2", "r_load", "eb_re", "eb_im", "w_frame",
)


def pack_kernel_params(params: SystemParams) -> np.ndarray:
    g, n = params.gfc, params.net
    eb = n.e_b_dp
    vals = (n.omega_s, g.r_filter, g.l_filter, g.c_filter, g.k_p_ac, g.k_i_ac,
            g.k_vp, g.k_vi, g.k_cp, g.k_ci, g.d_pc, g.tau_p, g.p_ref, g.v_ref,
            g.i_sat, n.l1, n.r2, n.l2, n.c2, n.r_load, eb.real, eb.imag,
            n.omega_s)
    return np.array(vals, dtype=float)


@njit(cache=True)
def dp_rhs(y, par, zbus, droop_on, limiter_mode):
    """Fused system right-hand side.  Returns (dy, aux)."""
    ws = par[0]; rf = par[1]; lf = par[2]; cf = par[3]
    kpac = par[4]; kiac = par[5]; kvp = par[6]; kvi = par[7]
    kcp = par[8]; kci = par[9]; dpc = par[10]; taup = par[11]
    pref = par[12]; vref = par[13]; isat = par[14]
    l1 = par[15]; r2 = par[16]; l2 = par[17]; c2 = par[18]
    ebp = complex(par[20], par[21]); wc = par[22]

    vl_d0 = y[0]; vl_q0 = y[1]; il_d0 = y[2]; il_q0 = y[3]
    fx_d0 = y[4]; fx_q0 = y[5]; ch_d0 = y[6]; ch_q0 = y[7]
    vl_d2 = complex(y[8], y[9]); vl_q2 = complex(y[10], y[11])
    il_d2 = complex(y[12], y[13]); il_q2 = complex(y[14], y[15])
    fx_d2 = complex(y[16], y[17]); fx_q2 = complex(y[18], y[19])
    ch_d2 = complex(y[20], y[21]); ch_q2 = complex(y[22], y[23])
    vint = y[24]; pfil = y[25]; th = y[26]
    i2p = complex(y[27], y[28]); i2n = complex(y[29], y[30])
    i2z = complex(y[31], y[32])
    ixp = complex(y[33], y[34]); ixn = complex(y[35], y[36])
    vsp = complex(y[37], y[38]); vsn = complex(y[39], y[40])
    vsz = complex(y[41], y[42])

    # filter algebraic outputs
    itd0 = fx_d0 / lf; itq0 = fx_q0 / lf
    vd0 = ch_d0 / cf; vq0 = ch_q0 / cf
    itd2 = fx_d2 / lf; itq2 = fx_q2 / lf
    vd2 = ch_d2 / cf; vq2 = ch_q2 / cf

    # transformer current into converter coordinates: the +1/-1 sequence
    # coefficients land on synchronous-frame orders 0 and +-2 (the orders
    # falling outside {0, +-2} are exactly the truncated ones), then the
    # frame rotation by the converter angle acts per order as a real 2x2
    # rotation, so stored-order conjugacy is preserved.
    cth = math.cos(th); sth = math.sin(th)
    iD0 = SQRT2 * ixp.real; iQ0 = SQRT2 * ixp.imag
    iD2 = ixn / SQRT2; iQ2 = 1j * ixn / SQRT2
    gd0 = iD0 * cth + iQ0 * sth
    gq0 = -iD0 * sth + iQ0 * cth
    gd2 = iD2 * cth + iQ2 * sth
    gq2 = -iD2 * sth + iQ2 * cth

    # magnitude loop, power filter, droop
    v0mag = math.hypot(vd0, vq0)
    dvint, vs_d0 = outer_pi_block(v0mag, vint, vref, kpac, kiac)
    pc = dp_power_dc(vd0, vq0, vd2, vq2, gd0, gq0, gd2, gq2)
    dpf, dth = droop_block(pc, pfil, pref, dpc, taup, droop_on)

    # inner voltage loop (order +-2 references are zero)
    wc_c = wc * cf
    z = 0.0 + 0.0j
    dvl_d0, dvl_q0, rd0, rq0 = inner_voltage_block(
        0.0, vl_d0 + z, vl_q0 + z, vs_d0 + z, z, vd0 + z, vq0 + z,
        gd0 + z, gq0 + z, kvp, kvi, wc_c)
    dvl_d2, dvl_q2, rd2, rq2 = inner_voltage_block(
        2.0 * ws, vl_d2, vl_q2, z, z, vd2, vq2, gd2, gq2, kvp, kvi, wc_c)

    # current-reference limiter on the dc components; ripple passes through
    d0l, q0l, branch = limit_dc(rd0.real, rq0.real, isat, limiter_mode)

    # current loop
    wc_l = wc * lf
    dil_d0, dil_q0, vtd0, vtq0 = current_control_block(
        0.0, il_d0 + z, il_q0 + z, d0l + z, q0l + z, itd0 + z, itq0 + z,
        vd0 + z, vq0 + z, kcp, kci, wc_l)
    dil_d2, dil_q2, vtd2, vtq2 = current_control_block(
        2.0 * ws, il_d2, il_q2, rd2, rq2, itd2, itq2, vd2, vq2, kcp, kci, wc_l)

    # filter
    dfx_d0, dfx_q0, dch_d0, dch_q0 = filter_block(
        0.0, fx_d0 + z, fx_q0 + z, ch_d0 + z, ch_q0 + z, vtd0, vtq0,
        gd0 + z, gq0 + z, rf, lf, cf, wc)
    dfx_d2, dfx_q2, dch_d2, dch_q2 = filter_block(
        2.0 * ws, fx_d2, fx_q2, ch_d2, ch_q2, vtd2, vtq2,
        gd2, gq2, rf, lf, cf, wc)

    # converter terminal voltage into sequence coordinates
    vD0 = vd0 * cth - vq0 * sth; vQ0 = vd0 * sth + vq0 * cth
    vD2 = vd2 * cth - vq2 * sth; vQ2 = vd2 * sth + vq2 * cth
    vp = complex(vD0, vQ0) / SQRT2
    vn = (vD2 - 1j * vQ2) / SQRT2

    # load bus (fault shunt folded into zbus); no zero-sequence converter path
    dp_ = ixp - i2p
    dn_ = ixn - i2n
    dz_ = -i2z
    v1p = zbus[0, 0] * dp_ + zbus[0, 1] * dn_ + zbus[0, 2] * dz_
    v1n = zbus[1, 0] * dp_ + zbus[1, 1] * dn_ + zbus[1, 2] * dz_
    v1z = zbus[2, 0] * dp_ + zbus[2, 1] * dn_ + zbus[2, 2] * dz_

    di2p = line_branch_block(ws, i2p, v1p, vsp, ebp, r2, l2)
    di2n = line_branch_block(ws, i2n, v1n, vsn, z, r2, l2)
    di2z = line_branch_block(ws, i2z, v1z, vsz, z, r2, l2)
    dixp = transformer_branch_block(ws, ixp, vp, v1p, l1)
    dixn = transformer_branch_block(ws, ixn, vn, v1n, l1)
    dvsp = series_cap_block(ws, vsp, i2p, c2)
    dvsn = series_cap_block(ws, vsn, i2n, c2)
    dvsz = series_cap_block(ws, vsz, i2z, c2)

    dy = np.empty(43)
    dy[0] = dvl_d0.real; dy[1] = dvl_q0.real
    dy[2] = dil_d0.real; dy[3] = dil_q0.real
    dy[4] = dfx_d0.real; dy[5] = dfx_q0.real
    dy[6] = dch_d0.real; dy[7] = dch_q0.real
    dy[8] = dvl_d2.real; dy[9] = dvl_d2.imag
    dy[10] = dvl_q2.real; dy[11] = dvl_q2.imag
    dy[12] = dil_d2.real; dy[13] = dil_d2.imag
    dy[14] = dil_q2.real; dy[15] = dil_q2.imag
    dy[16] = dfx_d2.real; dy[17] = dfx_d2.imag
    dy[18] = dfx_q2.real; dy[19] = dfx_q2.imag
    dy[20] = dch_d2.real; dy[21] = dch_d2.imag
    dy[22] = dch_q2.real; dy[23] = dch_q2.imag
    dy[24] = dvint; dy[25] = dpf; dy[26] = dth
    dy[27] = di2p.real; dy[28] = di2p.imag
    dy[29] = di2n.real; dy[30] = di2n.imag
    dy[31] = di2z.real; dy[32] = di2z.imag
    dy[33] = dixp.real; dy[34] = dixp.imag
    dy[35] = dixn.real; dy[36] = dixn.imag
    dy[37] = dvsp.real; dy[38] = dvsp.imag
    dy[39] = dvsn.real; dy[40] = dvsn.imag
    dy[41] = dvsz.real; dy[42] = dvsz.imag

    aux = np.empty(16)
    aux[0] = v1p.real; aux[1] = v1p.imag
    aux[2] = v1n.real; aux[3] = v1n.imag
    aux[4] = v1z.real; aux[5] = v1z.imag
    aux[6] = pc; aux[7] = float(branch)
    aux[8] = rd0.real; aux[9] = rq0.real
    aux[10] = rd2.real; aux[11] = rd2.imag
    aux[12] = rq2.real; aux[13] = rq2.imag
    aux[14] = d0l; aux[15] = q0l
    return dy, aux


# ---------------------------------------------------------------------------
# state packing and the DpSet-based reference assembly
# ---------------------------------------------------------------------------

def pack_state(gfc: GfcState, network: NetworkState) -> np.ndarray:
    y = np.empty(N_STATES)
    dq = (gfc.vloop_d, gfc.vloop_q, gfc.iloop_d, gfc.iloop_q,
          gfc.flux_d, gfc.flux_q, gfc.charge_d, gfc.charge_q)
    for i, s in enumerate(dq):
        c0 = s.coeff(0)
        if abs(c0.imag) > 1e-9 * max(1.0, abs(c0)):
            raise ValueError("order-0 coefficient must be real")
        y[i] = c0.real
        c2 = s.coeff(2)
        y[8 + 2 * i] = c2.real
        y[9 + 2 * i] = c2.imag
    y[24] = gfc.vmag_int
    y[25] = gfc.p_filt
    y[26] = gfc.angle
    seq = (network.iline_p, network.iline_n, network.iline_z,
           network.itx_p, network.itx_n,
           network.vser_p, network.vser_n, network.vser_z)
    for i, s in enumerate(seq):
        c = s.coeff(1)
        y[27 + 2 * i] = c.real
        y[28 + 2 * i] = c.imag
    return y


def unpack_state(y):
    y = np.asarray(y, dtype=float)
    dq = []
    for i in range(8):
        dq.append(DpSet((0, 2), (y[i], complex(y[8 + 2 * i], y[9 + 2 * i]))))
    gfc = GfcState(*dq, vmag_int=y[24], p_filt=y[25], angle=y[26])
    seq = [complex(y[27 + 2 * i], y[28 + 2 * i]) for i in range(8)]
    network = NetworkState(
        net._pn(seq[0]), net._pn(seq[1]), net._z(seq[2]),
        net._pn(seq[3]), net._pn(seq[4]),
        net._pn(seq[5]), net._pn(seq[6]), net._z(seq[7]))
    return gfc, network


class IntegrationAbort(RuntimeError):
    """Raised when the right-hand side produced a non-finite value; carries
    the name of the first offending block."""

    def __init__(self, block, message=""):
        self.block = block
        super().__init__("non-finite value in block %r %s" % (block, message))


def _incoming_current_pair(network: NetworkState, angle: float):
    """Transformer current mapped pnz -> DQ -> converter dq."""
    i_D, i_Q, _ = sequence_frame_map(network.itx_p, network.itx_n,
                                     direction="pnz->DQ")
    return rotate_frame(i_D, i_Q, angle, "DQ->dq")


def _terminal_voltage_pnz(v_pair, angle: float):
    """Converter terminal voltage mapped dq -> DQ -> pnz."""
    v_D, v_Q = rotate_frame(v_pair[0], v_pair[1], angle, "dq->DQ")
    return sequence_frame_map(v_D, v_Q, direction="DQ->pnz")


def system_derivatives_reference(y, params: SystemParams, scenario: Scenario,
                                 fault_active: bool):
    """DpSet-based assembly of the identical equations as dp_rhs; slow,
    used for cross-checks and non-finite diagnosis."""
    gfc, network = unpack_state(y)
    g = params.gfc
    ws = params.omega_s
    fault = scenario.fault if fault_active else None

    blocks = {}
    try:
        i_pair = _incoming_current_pair(network, gfc.angle)
        blocks["frame-in"] = i_pair
        it_pair = gfc.inductor_current(g)
        v_pair = gfc.terminal_voltage(g)
        dvint, dpf, dth, vs_pair, pc = conv.outer_droop_derivatives(
            gfc, v_pair, i_pair, g, droop_on=scenario.droop)
        blocks["outer-droop"] = (dvint, dpf, dth)
        dx1, ref_pair = conv.inner_voltage_controller(
            (gfc.vloop_d, gfc.vloop_q), vs_pair, v_pair, i_pair, g, ws)
        blocks["inner-voltage"] = ref_pair
        lim_pair, branch = conv.limit_reference(ref_pair, g.i_sat, scenario.limiter)
        dx2, vt_pair = conv.current_controller(
            (gfc.iloop_d, gfc.iloop_q), lim_pair, it_pair, v_pair, g, ws)
        blocks["current-loop"] = vt_pair
        dflux, dcharge, _, _ = conv.filter_derivatives(
            (gfc.flux_d, gfc.flux_q), (gfc.charge_d, gfc.charge_q),
            vt_pair, i_pair, g, ws)
        blocks["filter"] = (dflux, dcharge)
        v_pnz = _terminal_voltage_pnz(v_pair, gfc.angle)
        dnet, v1 = net.network_derivatives(network, v_pnz, params.net, fault)
        blocks["network"] = dnet
    except Exception as exc:  # pragma: no cover - defensive
        raise IntegrationAbort("assembly", str(exc))

    dgfc = GfcState(dx1[0], dx1[1], dx2[0], dx2[1],
                    dflux[0], dflux[1], dcharge[0], dcharge[1],
                    vmag_int=dvint, p_filt=dpf, angle=dth)
    dy = pack_state(dgfc, dnet)
    aux = {"vbus": v1, "pc": pc, "branch": branch,
           "itref": ref_pair, "itlim": lim_pair}
    return dy, aux


def locate_nonfinite(y, params, scenario, fault_active):
    """Name the first block whose output went non-finite at state y."""
    gfc, network = unpack_state(y)
    g = params.gfc
    ws = params.omega_s
    fault = scenario.fault if fault_active else None

    def bad(*dpsets):
        for s in dpsets:
            for c in s.coeffs:
                if not (math.isfinite(c.real) and math.isfinite(c.imag)):
                    return True
        return False

    if not np.all(np.isfinite(np.asarray(y))):
        return "state"
    i_pair = _incoming_current_pair(network, gfc.angle)
    if bad(*i_pair):
        return "frame-in"
    it_pair = gfc.inductor_current(g)
    v_pair = gfc.terminal_voltage(g)
    dvint, dpf, dth, vs_pair, _ = conv.outer_droop_derivatives(
        gfc, v_pair, i_pair, g, droop_on=scenario.droop)
    if not all(math.isfinite(v) for v in (dvint, dpf, dth)):
        return "outer-droop"
    dx1, ref_pair = conv.inner_voltage_controller(
        (gfc.vloop_d, gfc.vloop_q), vs_pair, v_pair, i_pair, g, ws)
    if bad(*dx1) or bad(*ref_pair):
        return "inner-voltage"
    lim_pair, _ = conv.limit_reference(ref_pair, g.i_sat, scenario.limiter)
    dx2, vt_pair = conv.current_controller(
        (gfc.iloop_d, gfc.iloop_q), lim_pair, it_pair, v_pair, g, ws)
    if bad(*dx2) or bad(*vt_pair):
        return "current-loop"
    dflux, dcharge, _, _ = conv.filter_derivatives(
        (gfc.flux_d, gfc.flux_q), (gfc.charge_d, gfc.charge_q),
        vt_pair, i_pair, g, ws)
    if bad(*dflux) or bad(*dcharge):
        return "filter"
    v_pnz = _terminal_voltage_pnz(v_pair, gfc.angle)
    dnet, v1 = net.network_derivatives(network, v_pnz, params.net, fault)
    if bad(dnet.iline_p, dnet.iline_n, dnet.iline_z, dnet.itx_p, dnet.itx_n,
           dnet.vser_p, dnet.vser_n, dnet.vser_z) or bad(*v1):
        return "network"
    return None


class SystemRhs:
    """Callable f(t, y) for one fault segment, wrapping the fused kernel."""

    def __init__(self, params: SystemParams, scenario: Scenario,
                 fault_active: bool, check: bool = False):
        self.params = params
        self.scenario = scenario
        self.fault_active = fault_active
        self.par = pack_kernel_params(params)
        fault = scenario.fault if fault_active else None
        self.zbus = net.bus_impedance_pnz(params.net.r_load, fault)
        self.droop = 1 if scenario.droop else 0
        self.limiter = LIMITER_CODE[scenario.limiter]
        self.check = check
        self.nfev = 0

    def __call__(self, t, y):
        dy, _ = dp_rhs(np.asarray(y, dtype=float), self.par, self.zbus,
                       self.droop, self.limiter)
        self.nfev += 1
        if self.check and not np.all(np.isfinite(dy)):
            block = locate_nonfinite(y, self.params, self.scenario,
                                     self.fault_active)
            raise IntegrationAbort(block or "unknown", "at t=%g" % t)
        return dy

    def aux(self, y):
        _, aux = dp_rhs(np.asarray(y, dtype=float), self.par, self.zbus,
                        self.droop, self.limiter)
        return aux


def system_derivatives(t, y, params: SystemParams, scenario: Scenario):
    """Spec-level entry: fault activity decided from t against the scenario."""
    active = (scenario.fault is not None
              and scenario.fault.t_apply <= t < scenario.fault.t_clear)
    rhs = SystemRhs(params, scenario, active, check=True)
    return rhs(t, y)


# ---------------------------------------------------------------------------
# equilibrium
# ---------------------------------------------------------------------------

class EquilibriumError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def flat_start(params: SystemParams) -> np.ndarray:
    """Nominal voltage, zero current initial guess."""
    y = np.zeros(N_STATES)
    g = params.gfc
    y[6] = g.c_filter * g.v_ref         # charge_d0 -> v_d = v_ref
    y[24] = g.v_ref                      # magnitude-loop integrator
    y[25] = g.p_ref                      # filtered power
    y[26] = 0.1                          # small leading angle
    return y


def find_equilibrium(params: SystemParams, scenario: Scenario,
                     guess=None, max_iter: int = 200) -> np.ndarray:
    """Damped Newton solve of dp_rhs = 0 with no fault applied.

    The droop law is kept active during the solve even for droop-disabled
    scenarios, which pins the operating point at the power setpoint; the
    solved angle is then simply held constant by the droop-off dynamics.
    The limiter is bypassed while iterating (the solution must be an
    unsaturated point, which is verified afterwards)."""
    from .modal import central_jacobian

    eq_scn = Scenario(fault=None, compensation=scenario.compensation,
                      limiter="none", droop=True, t_end=scenario.t_end,
                      rel_tol=scenario.rel_tol, abs_tol=scenario.abs_tol,
                      output_dt=scenario.output_dt)
    rhs = SystemRhs(params, eq_scn, fault_active=False)
    scales = state_scales(params)
    y = flat_start(params) if guess is None else np.array(guess, dtype=float)

    def resid_norm(v):
        return float(np.max(np.abs(v) / scales))

    f = rhs(0.0, y)
    norm = resid_norm(f)
    for _ in range(max_iter):
        if norm < 1e-8:
            break
        J = central_jacobian(lambda x: rhs(0.0, x), y, scales)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise EquilibriumError("singular Jacobian during Newton solve",
                                   residual=norm)
        alpha = 1.0
        for _ in range(40):
            y_try = y + alpha * step
            f_try = rhs(0.0, y_try)
            n_try = resid_norm(f_try)
            if np.all(np.isfinite(f_try)) and n_try < norm * (1.0 - 1e-4 * alpha):
                break
            alpha *= 0.5
        else:
            raise EquilibriumError("Newton damping failed to reduce residual",
                                   residual=norm)
        y, f, norm = y_try, f_try, n_try
    else:
        raise EquilibriumError(
            "no convergence in %d iterations (residual %.3e)" % (max_iter, norm),
            residual=norm)

    # the operating point must not sit inside the current limit
    aux = rhs.aux(y)
    ref_mag = math.hypot(aux[8], aux[9])
    if ref_mag >= params.gfc.i_sat:
        raise EquilibriumError(
            "equilibrium current reference %.1f A exceeds the %.1f A limit"
            % (ref_mag, params.gfc.i_sat))
    return y


# ---------------------------------------------------------------------------
# time integration and scenario execution
# ---------------------------------------------------------------------------

def apply_compensation(params: SystemParams, scenario: Scenario) -> SystemParams:
    """Resolve the scenario's compensation level into the series capacitance."""
    import dataclasses
    if scenario.compensation is None:
        return params
    c2 = net.compensation_to_capacitance(scenario.compensation, params.net.l2,
                                         params.net.omega_s)
    return SystemParams(gfc=params.gfc,
                        net=dataclasses.replace(params.net, c2=c2))

@dataclass
class TimeSeries:
    """Uniform-grid output record; columns keyed by stable names."""

    t: np.ndarray
    columns: dict = field(default_factory=dict)

    def add(self, name, values):
        self.columns[name] = np.asarray(values)

    def __getitem__(self, name):
        return self.columns[name]

    def write_csv(self, path):
        names = ["t"] + list(self.columns)
        with open(path, "w") as fh:
            fh.write(",".join(names) + "\n")
            data = np.column_stack([self.t] + [self.columns[n] for n in names[1:]])
            np.savetxt(fh, data, delimiter=",", fmt="%.10g")

    @classmethod
    def read_csv(cls, path):
        with open(path) as fh:
            names = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        ts = cls(t=data[:, 0])
        for i, n in enumerate(names[1:], start=1):
            ts.add(n, data[:, i])
        return ts


def integrate_adaptive(params: SystemParams, scenario: Scenario, y0,
                       t0: float = 0.0, t1: float | None = None):
    """Adaptive implicit integration over the scenario's fault segments.

    Integration restarts at the fault apply/clear instants so no step
    straddles the algebraic switching; within each segment the solution is
    sampled on the scenario's output grid.  Returns (t, Y, aux, segments
    rhs list)."""
    from scipy.integrate import solve_ivp
    from .modal import central_jacobian

    if t1 is None:
        t1 = scenario.t_end
    scales = state_scales(params)
    atol = scenario.abs_tol * scales
    grid = np.arange(t0, t1 + 0.5 * scenario.output_dt, scenario.output_dt)
    grid = grid[grid <= t1 + 1e-12]

    ts_parts, y_parts, aux_parts = [], [], []
    y = np.array(y0, dtype=float)
    segs = [s for s in scenario.segments() if s[1] > t0 and s[0] < t1]
    rhss = []
    for si, (sa, sb, active) in enumerate(segs):
        sa = max(sa, t0)
        sb = min(sb, t1)
        rhs = SystemRhs(params, scenario, active)
        rhss.append(rhs)
        jac = lambda t, x, r=rhs: central_jacobian(lambda v: r(0.0, v), x, scales)
        last = si == len(segs) - 1
        if last:
            mask = (grid >= sa - 1e-12) & (grid <= sb + 1e-12)
        else:
            mask = (grid >= sa - 1e-12) & (grid < sb - 1e-12)
        t_eval = grid[mask]
        # always integrate to the exact segment end for the restart state
        pad_end = t_eval.size == 0 or t_eval[-1] < sb - 1e-12
        if pad_end:
            t_eval = np.append(t_eval, sb)
        sol = solve_ivp(rhs, (sa, sb), y, method="Radau", jac=jac,
                        rtol=scenario.rel_tol, atol=atol, t_eval=t_eval,
                        dense_output=False)
        if not sol.success:
            block = locate_nonfinite(y, params, scenario, active)
            if block:
                raise IntegrationAbort(block, "segment [%g, %g]" % (sa, sb))
            raise RuntimeError("integration failed on [%g, %g]: %s"
                               % (sa, sb, sol.message))
        y = sol.y[:, -1]
        keep = sol.t.size - (1 if pad_end else 0)
        if keep > 0:
            ts_parts.append(sol.t[:keep])
            y_parts.append(sol.y[:, :keep].T)
            aux_parts.append(np.array([rhs.aux(sol.y[:, i])
                                       for i in range(keep)]))
        if not np.all(np.isfinite(y)):
            raise IntegrationAbort(locate_nonfinite(y, params, scenario, active)
                                   or "state", "at segment end %g" % sb)
    t = np.concatenate(ts_parts)
    Y = np.vstack(y_parts)
    AUX = np.vstack(aux_parts)
    return t, Y, AUX, rhss


def _abc_from_pnz(cp, cn, cz, t, omega_s):
    """Reconstruct instantaneous phase quantities from +1 sequence DPs."""
    T, _ = net.sequence_matrix()
    e = np.exp(1j * omega_s * t)
    xp = cp * e + np.conj(cn) / e
    xn = cn * e + np.conj(cp) / e
    xz = cz * e + np.conj(cz) / e
    seq = np.vstack([xp, xn, xz])
    abc = T @ seq
    return abc.real


@dataclass
class ScenarioResult:
    timeseries: TimeSeries
    summary: dict
    t: np.ndarray
    states: np.ndarray
    aux: np.ndarray
    equilibrium: np.ndarray


def _spectral_peak_hz(t, x, fmin=50.0):
    """Dominant frequency of a detrended, Hann-windowed record (parabolic
    interpolation around the FFT peak)."""
    x = np.asarray(x, dtype=float)
    if x.size < 16:
        return float("nan")
    x = x - np.polyval(np.polyfit(t, x, 1), t)
    w = np.hanning(x.size)
    spec = np.abs(np.fft.rfft(x * w))
    freqs = np.fft.rfftfreq(x.size, d=t[1] - t[0])
    sel = freqs >= fmin
    if not np.any(sel):
        return float("nan")
    i0 = np.argmax(spec[sel]) + np.argmax(sel)
    if 0 < i0 < len(freqs) - 1:
        a, b, c = spec[i0 - 1], spec[i0], spec[i0 + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        return float(freqs[i0] + shift * (freqs[1] - freqs[0]))
    return float(freqs[i0])


def run_scenario(params: SystemParams, scenario: Scenario) -> ScenarioResult:
    """Equilibrium, fault transient, time series and summary metrics."""
    params = apply_compensation(params, scenario)
    y_eq = find_equilibrium(params, scenario)
    t, Y, AUX, _ = integrate_adaptive(params, scenario, y_eq)
    ws = params.omega_s

    ts = TimeSeries(t=t)

    def dp_cols(name, frame, order, re, im):
        ts.add("%s.%s.%s.re" % (name, frame, order), re)
        ts.add("%s.%s.%s.im" % (name, frame, order), im)
        ts.add("%s.%s.%s.mag" % (name, frame, order), np.hypot(re, im))

    # converter states and derived filter quantities
    dq_names = ("vloop_d", "vloop_q", "iloop_d", "iloop_q",
                "flux_d", "flux_q", "charge_d", "charge_q")
    for i, name in enumerate(dq_names):
        dp_cols(name, "dq", 0, Y[:, i], np.zeros_like(t))
        dp_cols(name, "dq", 2, Y[:, 8 + 2 * i], Y[:, 9 + 2 * i])
    lf, cf = params.gfc.l_filter, params.gfc.c_filter
    for src, dst, scale in (("flux_d", "it_d", lf), ("flux_q", "it_q", lf),
                            ("charge_d", "vgfc_d", cf), ("charge_q", "vgfc_q", cf)):
        for k in (0, 2):
            for comp in ("re", "im", "mag"):
                ts.add("%s.dq.%d.%s" % (dst, k, comp),
                       ts["%s.dq.%d.%s" % (src, k, comp)] / scale)

    ts.add("pc.none.0.re", AUX[:, 6])
    ts.add("p_filt.none.0.re", Y[:, IDX_P_FILT])
    ts.add("angle.none.0.re", Y[:, IDX_ANGLE])
    ts.add("vmag_int.none.0.re", Y[:, IDX_VMAG_INT])
    ts.add("limiter_branch.none.0.re", AUX[:, 7])
    ts.add("limiter_active.none.0.re", (AUX[:, 7] > 0).astype(float))
    dp_cols("itref_d", "dq", 0, AUX[:, 8], np.zeros_like(t))
    dp_cols("itref_q", "dq", 0, AUX[:, 9], np.zeros_like(t))
    dp_cols("itref_d", "dq", 2, AUX[:, 10], AUX[:, 11])
    dp_cols("itref_q", "dq", 2, AUX[:, 12], AUX[:, 13])
    dp_cols("itlim_d", "dq", 0, AUX[:, 14], np.zeros_like(t))
    dp_cols("itlim_q", "dq", 0, AUX[:, 15], np.zeros_like(t))

    seq_cols = (("iline_p", 27), ("iline_n", 29), ("iline_z", 31),
                ("itx_p", 33), ("itx_n", 35),
                ("vser_p", 37), ("vser_n", 39), ("vser_z", 41))
    for name, j in seq_cols:
        dp_cols(name, "pnz", 1, Y[:, j], Y[:, j + 1])
    for name, j in (("vbus_p", 0), ("vbus_n", 2), ("vbus_z", 4)):
        dp_cols(name, "pnz", 1, AUX[:, j], AUX[:, j + 1])

    # reconstructed instantaneous phase waveforms
    iline_abc = _abc_from_pnz(Y[:, 27] + 1j * Y[:, 28], Y[:, 29] + 1j * Y[:, 30],
                              Y[:, 31] + 1j * Y[:, 32], t, ws)
    vbus_abc = _abc_from_pnz(AUX[:, 0] + 1j * AUX[:, 1], AUX[:, 2] + 1j * AUX[:, 3],
                             AUX[:, 4] + 1j * AUX[:, 5], t, ws)
    for i, ph in enumerate("abc"):
        ts.add("iline_%s.abc.inst.re" % ph, iline_abc[i])
        ts.add("vbus_%s.abc.inst.re" % ph, vbus_abc[i])

    # summary metrics
    summary = {
        "fault": "none" if scenario.fault is None else
                 "r_fa=%g r_fb=%g r_fc=%g r_g=%g apply=%g clear=%g" % (
                     scenario.fault.r_fa, scenario.fault.r_fb,
                     scenario.fault.r_fc, scenario.fault.r_g,
                     scenario.fault.t_apply, scenario.fault.t_clear),
        "limiter": scenario.limiter,
        "droop": scenario.droop,
        "compensation": scenario.compensation,
        "i_sat_a": params.gfc.i_sat,
        "pc_initial_w": float(AUX[0, 6]),
        "pc_final_w": float(AUX[-1, 6]),
        "peak_itlim_dc_a": float(np.max(np.hypot(AUX[:, 14], AUX[:, 15]))),
        "limiter_active_fraction": float(np.mean(AUX[:, 7] > 0)),
        "peak_iline_phase_a": float(np.max(np.abs(iline_abc))),
        "min_vbus_pos_mag_v": float(np.min(np.hypot(AUX[:, 0], AUX[:, 1]))),
    }
    if scenario.fault is not None:
        fa, fc = scenario.fault.t_apply, scenario.fault.t_clear
        in_fault = (t >= fa) & (t <= fc)
        post = t >= fc
        scales = state_scales(params)
        dev = np.abs(Y - y_eq[None, :]) / scales[None, :]
        outside = np.any(dev > 0.02, axis=1) & post
        summary["settle_time_2pct_s"] = float(
            (t[outside][-1] - fc) if np.any(outside) else 0.0)
        vser_re = Y[:, 37]
        summary["vser_peak_freq_fault_hz"] = _spectral_peak_hz(
            t[in_fault], vser_re[in_fault])
        post_win = post & (t <= fc + 0.25)
        summary["vser_peak_freq_post_hz"] = _spectral_peak_hz(
            t[post_win], vser_re[post_win])
        summary["limiter_active_fraction_fault"] = float(
            np.mean(AUX[in_fault, 7] > 0)) if np.any(in_fault) else 0.0
    return ScenarioResult(timeseries=ts, summary=summary, t=t, states=Y,
                          aux=AUX, equilibrium=y_eq)


def write_summary(summary: dict, path):
    with open(path, "w") as fh:
        for k, v in summary.items():
            fh.write("%s = %s\n" % (k, v))
