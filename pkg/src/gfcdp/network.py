"""Series-compensated line, transformer branch, resistive load bus,
infinite bus and resistive shunt faults, in sequence-frame (pnz) dynamic
phasors at orders +-1.  Only the +1 coefficients are stored; the -1
coefficients follow from the positive/negative pair relation.

The transformer branch carries no zero-sequence current (the converter
side provides no path), so that channel is structurally absent; the line
and series capacitor keep their zero-sequence states because ground
current can flow through the load and fault paths.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dynphasor import DpSet, PN_PAIRED, REAL_SIGNAL
from .parameters import FaultSpec, NetworkParams

_PNZ = (1,)


def _pn(c) -> DpSet:
    return DpSet(_PNZ, (c,), PN_PAIRED)


def _z(c) -> DpSet:
    return DpSet(_PNZ, (c,), REAL_SIGNAL)


@dataclass
class NetworkState:
    """Line current, transformer-branch current and series-capacitor
    voltage as pnz triples of order +1 coefficients."""

    iline_p: DpSet
    iline_n: DpSet
    iline_z: DpSet
    itx_p: DpSet
    itx_n: DpSet
    vser_p: DpSet
    vser_n: DpSet
    vser_z: DpSet

    def __post_init__(self):
        # no zero-sequence path through the converter branch
        pass

    @classmethod
    def zero(cls) -> "NetworkState":
        return cls(_pn(0.0), _pn(0.0), _z(0.0), _pn(0.0), _pn(0.0),
                   _pn(0.0), _pn(0.0), _z(0.0))


def sequence_matrix():
    """Unitary symmetrical-component matrix T (abc = T * pnz) and its
    inverse (the conjugate transpose)."""
    a = cmath.exp(2j * math.pi / 3.0)
    T = np.array(
        [[1.0, 1.0, 1.0],
         [a * a, a, 1.0],
         [a, a * a, 1.0]], dtype=np.complex128) / math.sqrt(3.0)
    return T, T.conj().T


def fault_matrix_abc(spec: FaultSpec) -> np.ndarray:
    """Phase-frame fault resistance matrix: per-phase resistance to the
    common neutral on the diagonal, neutral-to-ground resistance coupling
    all entries."""
    rg = spec.r_g
    return np.array(
        [[spec.r_fa + rg, rg, rg],
         [rg, spec.r_fb + rg, rg],
         [rg, rg, spec.r_fc + rg]], dtype=float)


def fault_matrix_pnz(spec: FaultSpec) -> np.ndarray:
    """Sequence-frame fault resistance matrix Tinv * R_abc * T."""
    T, Tinv = sequence_matrix()
    return Tinv @ fault_matrix_abc(spec) @ T


def bus_impedance_pnz(r_load: float, fault: FaultSpec | None) -> np.ndarray:
    """Sequence-frame impedance of the load bus shunt: load resistance in
    parallel with the fault network when one is active."""
    if not math.isfinite(r_load) and fault is None:
        raise ValueError("load bus has no finite shunt path")
    y = np.eye(3, dtype=np.complex128) / r_load
    if fault is not None:
        y = y + np.linalg.inv(fault_matrix_pnz(spec=fault))
    return np.linalg.inv(y)


def bus_impedance_abc(r_load: float, fault: FaultSpec | None) -> np.ndarray:
    """Phase-frame counterpart of bus_impedance_pnz (real-valued)."""
    y = np.eye(3) / r_load
    if fault is not None:
        y = y + np.linalg.inv(fault_matrix_abc(fault))
    return np.linalg.inv(y)


def load_bus_voltage(i_triple, i2_triple, r_load: float,
                     fault: FaultSpec | None = None):
    """Load-bus voltage triple from the current injected into the bus.

    Without a fault v1 = R_load * (i - i2) per sequence; with a fault the
    load and fault admittances act in parallel and couple the sequences."""
    z = bus_impedance_pnz(r_load, fault)
    d = np.array([i_triple[0].coeff(1) - i2_triple[0].coeff(1),
                  i_triple[1].coeff(1) - i2_triple[1].coeff(1),
                  i_triple[2].coeff(1) - i2_triple[2].coeff(1)])
    v1 = z @ d
    return _pn(v1[0]), _pn(v1[1]), _z(v1[2])


@njit(cache=True)
def line_branch_block(ws, i2s, v1s, vsers, ebs, r2, l2):
    """Line current derivative at order +1 for one sequence channel."""
    return (v1s - vsers - ebs - r2 * i2s) / l2 - 1j * ws * i2s


@njit(cache=True)
def transformer_branch_block(ws, ixs, vs, v1s, l1):
    """Transformer-branch current derivative at order +1 for one channel."""
    return (vs - v1s) / l1 - 1j * ws * ixs


@njit(cache=True)
def series_cap_block(ws, vsers, i2s, c2):
    """Series-capacitor voltage derivative at order +1 for one channel."""
    return i2s / c2 - 1j * ws * vsers


def network_derivatives(state: NetworkState, v_triple, params: NetworkParams,
                        fault: FaultSpec | None = None):
    """Derivatives of all network states at order +1.

    v_triple is the converter terminal voltage in pnz coordinates.  The
    transformer-branch zero-sequence channel is structurally zero and is
    not propagated.  Returns (dstate, v1_triple)."""
    i_triple = (state.itx_p, state.itx_n, _z(0.0))
    v1 = load_bus_voltage(i_triple, (state.iline_p, state.iline_n, state.iline_z),
                          params.r_load, fault)
    ws = params.omega_s
    eb = (params.e_b_dp, 0.0 + 0.0j, 0.0 + 0.0j)
    di2 = [line_branch_block(ws, s.coeff(1), v1s.coeff(1), vs.coeff(1), ebs,
                             params.r2, params.l2)
           for s, v1s, vs, ebs in zip(
               (state.iline_p, state.iline_n, state.iline_z), v1,
               (state.vser_p, state.vser_n, state.vser_z), eb)]
    dix = [transformer_branch_block(ws, s.coeff(1), vt.coeff(1), v1s.coeff(1),
                                    params.l1)
           for s, vt, v1s in zip((state.itx_p, state.itx_n), v_triple[:2], v1[:2])]
    dvs = [series_cap_block(ws, s.coeff(1), i2s.coeff(1), params.c2)
           for s, i2s in zip((state.vser_p, state.vser_n, state.vser_z),
                             (state.iline_p, state.iline_n, state.iline_z))]
    dstate = NetworkState(
        _pn(di2[0]), _pn(di2[1]), _z(di2[2]),
        _pn(dix[0]), _pn(dix[1]),
        _pn(dvs[0]), _pn(dvs[1]), _z(dvs[2]))
    return dstate, v1


def compensation_to_capacitance(level: float, l2: float, omega_s: float) -> float:
    """Series capacitance giving X_C2 = level * X_L2."""
    if not 0.0 < level < 1.0:
        raise ValueError("compensation level must lie strictly between 0 and 1")
    return 1.0 / (level * omega_s * omega_s * l2)
