"""Parameter and scenario containers shared by the converter, network,
simulator and oracle modules.  Defaults reproduce the studied test system:
a 400 MW grid-forming converter behind an RLC filter and transformer,
feeding a 100 MW resistive load bus and a series-compensated line into a
20 kV infinite bus.  All values SI; voltages are power-invariant dq/pnz
magnitudes (numerically equal to line-to-line rms volts)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

OPEN_PHASE_OHMS = 1e6  # "very large" resistance for an unfaulted phase

LIMITER_NONE = "none"
LIMITER_CONSTANT_ANGLE = "constant-angle"
LIMITER_Q_PRIORITY = "q-priority"
LIMITER_MODES = (LIMITER_NONE, LIMITER_CONSTANT_ANGLE, LIMITER_Q_PRIORITY)

FAULT_TYPES = ("LG", "LLG", "LLLG", "none")


@dataclass
class GfcParams:
    """Converter filter and control constants (SI)."""

    r_filter: float = 0.722e-3      # filter resistance, ohm
    l_filter: float = 44.4e-6       # filter inductance, H
    c_filter: float = 0.0013        # filter capacitance, F
    k_p_ac: float = 0.001           # terminal-voltage magnitude loop, proportional
    k_i_ac: float = 0.5             # terminal-voltage magnitude loop, integral, 1/s
    k_vp: float = 2.34              # inner voltage loop, 1/ohm
    k_vi: float = 5.22              # inner voltage loop, 1/(ohm*s)
    k_cp: float = 0.16              # current loop, ohm
    k_ci: float = 0.26              # current loop, ohm/s
    d_pc: float = 0.0174e-6         # power-angle droop, rad/s/W (0.0174 rad/s/MW)
    tau_p: float = 0.010            # power measurement filter time constant, s
    p_ref: float = 400e6            # real-power setpoint, W
    v_ref: float = 20.6e3           # terminal-voltage magnitude setpoint, V
    i_sat: float = 0.0              # current-reference ceiling, A; 0 -> 1.2 * nominal

    def __post_init__(self):
        if self.i_sat <= 0.0:
            self.i_sat = 1.2 * self.p_ref / self.v_ref
        if self.tau_p <= 0.0:
            raise ValueError("tau_p must be positive")
        for name in ("k_p_ac", "k_i_ac", "k_vp", "k_vi", "k_cp", "k_ci", "d_pc"):
            if getattr(self, name) < 0.0:
                raise ValueError("%s must be nonnegative" % name)

    @property
    def i_nominal(self) -> float:
        return self.p_ref / self.v_ref


@dataclass
class NetworkParams:
    """Transformer branch, series-compensated line, load and infinite bus (SI)."""

    l1: float = 0.176e-3            # transformer leakage inductance, H
    r2: float = 0.09                # line resistance, ohm
    l2: float = 0.0024              # line inductance, H
    c2: float = 3.59e-3             # series compensation capacitance, F
    r_load: float = 4.0             # load resistance, ohm (20 kV, 100 MW)
    e_b: float = 20e3               # infinite-bus voltage magnitude, V
    omega_s: float = 2.0 * math.pi * 60.0  # synchronous frequency, rad/s

    def __post_init__(self):
        if min(self.l1, self.l2, self.c2) <= 0.0:
            raise ValueError("l1, l2 and c2 must be positive")
        if self.r2 < 0.0 or self.r_load < 0.0:
            raise ValueError("resistances must be nonnegative")
        if self.omega_s <= 0.0:
            raise ValueError("omega_s must be positive")

    @property
    def e_b_dp(self) -> complex:
        """Positive-sequence DP of the infinite bus at order +1 (phase reference)."""
        return complex(self.e_b / math.sqrt(2.0), 0.0)


@dataclass
class SystemParams:
    gfc: GfcParams = field(default_factory=GfcParams)
    net: NetworkParams = field(default_factory=NetworkParams)

    @property
    def omega_s(self) -> float:
        return self.net.omega_s


@dataclass
class FaultSpec:
    """Resistive shunt fault at the load bus: per-phase resistances to a
    common neutral plus a neutral-to-ground resistance.  An unfaulted phase
    carries OPEN_PHASE_OHMS."""

    r_fa: float = OPEN_PHASE_OHMS
    r_fb: float = OPEN_PHASE_OHMS
    r_fc: float = OPEN_PHASE_OHMS
    r_g: float = 0.0
    t_apply: float = 0.1
    t_clear: float = 0.18

    def __post_init__(self):
        for name in ("r_fa", "r_fb", "r_fc", "r_g"):
            if getattr(self, name) < 0.0:
                raise ValueError("%s must be nonnegative" % name)
        if not self.t_apply < self.t_clear:
            raise ValueError("t_apply must precede t_clear")

    @classmethod
    def from_type(cls, fault_type: str, r_f: float = 0.756e-3, r_g: float = 0.0,
                  t_apply: float = 0.1, t_clear: float = 0.18) -> "FaultSpec | None":
        """Build the standard single/double/triple line-to-ground specs."""
        if fault_type == "none":
            return None
        faulted = {"LG": ("r_fa",),
                   "LLG": ("r_fa", "r_fb"),
                   "LLLG": ("r_fa", "r_fb", "r_fc")}.get(fault_type)
        if faulted is None:
            raise ValueError("unknown fault type %r" % fault_type)
        spec = cls(t_apply=t_apply, t_clear=t_clear, r_g=r_g)
        for name in faulted:
            setattr(spec, name, r_f)
        return spec


@dataclass
class Scenario:
    """One simulation/analysis case."""

    fault: FaultSpec | None = None
    compensation: float | None = 0.82   # X_C2/X_L2; None keeps params.c2 as given
    limiter: str = LIMITER_CONSTANT_ANGLE
    droop: bool = True
    t_end: float = 0.5
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8               # dimensionless; multiplied by state scales
    output_dt: float = 2e-4

    def __post_init__(self):
        if self.limiter not in LIMITER_MODES:
            raise ValueError("limiter must be one of %s" % (LIMITER_MODES,))
        if self.fault is not None and self.t_end <= self.fault.t_clear:
            raise ValueError("t_end must exceed the fault clearing time")
        if self.rel_tol <= 0.0 or self.abs_tol <= 0.0:
            raise ValueError("solver tolerances must be positive")
        if self.output_dt <= 0.0:
            raise ValueError("output_dt must be positive")

    def segments(self):
        """(t_start, t_end, fault_active) pieces between switching instants."""
        if self.fault is None:
            return [(0.0, self.t_end, False)]
        return [
            (0.0, self.fault.t_apply, False),
            (self.fault.t_apply, self.fault.t_clear, True),
            (self.fault.t_clear, self.t_end, False),
        ]


def scenario_with(scenario: Scenario, **kw) -> Scenario:
    return replace(scenario, **kw)


def state_scales(params: SystemParams) -> np.ndarray:
    """Per-state magnitude scale used for solver tolerances, Newton damping
    and finite-difference steps.  Order matches simulator packing."""
    g, n = params.gfc, params.net
    i_nom = g.i_nominal
    v_nom = g.v_ref
    s_vloop = max(i_nom / max(g.k_vi, 1e-12), 1.0)
    s_iloop = max(v_nom / max(g.k_ci, 1e-12), 1.0)
    s_flux = g.l_filter * i_nom
    s_chg = g.c_filter * v_nom
    k0 = [s_vloop, s_vloop, s_iloop, s_iloop, s_flux, s_flux, s_chg, s_chg]
    k2 = []
    for s in (s_vloop, s_vloop, s_iloop, s_iloop, s_flux, s_flux, s_chg, s_chg):
        k2 += [s, s]
    scalars = [v_nom, g.p_ref, 1.0]
    netw = [i_nom] * 6 + [i_nom] * 4 + [v_nom] * 6
    return np.array(k0 + k2 + scalars + netw, dtype=float)
