"""Grid-following and minimal grid-forming converter models.

The GFL converter is an L-filtered current source synchronized by an
SRF-PLL.  Its dq current controller runs in the PLL frame with decoupling
and bus-voltage feed-forward; the current reference combines an active
power set-point, a Volt/VAR droop and an optional virtual-admittance
correction, and is magnitude-limited by a smooth tanh saturation with
back-calculation anti-windup on the controller integrators.

The GFM model is a plain P/f-Q/V droop behind a virtual output impedance;
it exists to exercise the grid-forming branch of the complex-frequency
taxonomy, not to be a complete voltage-source converter.
"""

import math
from dataclasses import dataclass, field

from .errors import DegenerateVoltageError
from .limits import SmoothLimiter, anti_windup_rate, sat_vector
from .val import ValGains

__all__ = [
    "V_FLOOR",
    "GflConverter",
    "GflState",
    "GfmDroop",
    "pll_project",
    "pll_residual",
    "current_reference",
    "gfl_rates",
    "gfl_residual",
    "gfm_rates",
    "gfm_droop_residual",
]

V_FLOOR = 0.01


@dataclass(frozen=True)
class GflConverter:
    """Grid-following converter parameters (all pu unless noted)."""

    id: str
    bus: str
    l_f: float = 2.5e-4        # filter inductance, s (x_f / omega0)
    r_f: float = 0.005
    kp_cc: float = 0.3
    ki_cc: float = 20.0
    kp_pll: float = 20.0       # rad/s per pu
    ki_pll: float = 200.0      # rad/s^2 per pu
    p_ref: float = 0.4
    kq: float = 0.0            # Volt/VAR droop slope, pu/pu
    v_ref: float = 1.0
    q0: float = 0.0
    i_max: float = 1.2
    limiter_k: float = 10.0
    k_aw: float = 1.0
    tau_meas: float = 0.002    # reference-path voltage measurement filter, s
    val_mode: str = "off"      # off | qval | dval
    val: ValGains = field(default_factory=ValGains)

    def __post_init__(self):
        if self.l_f <= 0.0:
            raise ValueError("filter inductance must be positive")
        if self.i_max <= 0.0:
            raise ValueError("rated current must be positive")
        for g in (self.kp_cc, self.ki_cc, self.kp_pll, self.ki_pll, self.k_aw):
            if g < 0.0:
                raise ValueError("controller gains must be non-negative")
        if self.tau_meas < 0.0:
            raise ValueError("measurement time constant must be non-negative")
        if self.val_mode not in ("off", "qval", "dval"):
            raise ValueError(f"unknown VAL mode {self.val_mode!r}")

    @property
    def limiter(self) -> SmoothLimiter:
        return SmoothLimiter(limit=self.i_max, k=self.limiter_k)


@dataclass
class GflState:
    """Converter states: PLL angle/integrator, filter current (PLL frame)
    and current-controller integrators."""

    theta: float = 0.0
    eps: float = 0.0
    i_d: float = 0.0
    i_q: float = 0.0
    xi_d: float = 0.0
    xi_q: float = 0.0


@dataclass(frozen=True)
class GfmDroop:
    """Droop-based grid-forming converter behind a virtual impedance."""

    id: str
    bus: str
    m_p: float = 6.28          # rad/s per pu of active power
    n_q: float = 0.05
    v_set: float = 1.0
    p_set: float = 0.0
    q_set: float = 0.0
    r_v: float = 0.02
    l_v: float = 6.4e-4        # virtual inductance, s
    tau_p: float = 0.02
    tau_q: float = 0.02

    def __post_init__(self):
        if self.m_p <= 0.0:
            raise ValueError("P/f droop slope must be positive")
        if self.n_q < 0.0:
            raise ValueError("Q/V droop slope must be non-negative")
        if self.l_v <= 0.0:
            raise ValueError("virtual inductance must be positive")


def pll_project(vd: float, vq: float, theta: float):
    """Rotate a network-frame dq pair into the PLL frame."""
    c, s = math.cos(theta), math.sin(theta)
    return vd * c + vq * s, -vd * s + vq * c


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi] for reporting."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def gfl_rates(omega0, theta, eps, i_d, i_q, xi_d, xi_q, vd, vq,
              vm_d, vm_q, corr_d, corr_q, p_ref, q0, kq, v_ref, kp_pll,
              ki_pll, kp_cc, ki_cc, k_aw, i_max, limiter_k, l_f, r_f,
              strict_voltage=False, conv_id=""):
    """All GFL residuals and outputs for one evaluation point.

    ``vm_d/vm_q`` is the PLL-frame voltage measurement feeding the
    reference path (droop, power-to-current division, VAL deviation); the
    PLL itself always sees the raw bus voltage.  ``corr_d/corr_q`` is the
    VAL current correction in the PLL frame; pass zeros when the loop is
    disabled.  Returns residual rates (mass factored out where it is not
    1), the network-frame injected current, raw/limited references, the
    measurement-filter rates and the modulation voltage used by the
    complex-frequency decomposition.
    """
    v_pll_d, v_pll_q = pll_project(vd, vq, theta)
    omega_pll = omega0 + kp_pll * v_pll_q + eps
    vmag = math.hypot(vm_d, vm_q)
    if strict_voltage and vmag <= V_FLOOR:
        raise DegenerateVoltageError(
            f"voltage magnitude {vmag:.4g} pu at converter {conv_id!r} "
            f"is at or below the {V_FLOOR} pu floor", bus=conv_id)
    veff = max(vmag, V_FLOOR)
    q_ref = q0 + kq * (v_ref - vmag)
    # conj((P + jQ)/v) in the PLL frame; below the floor the magnitude is
    # frozen at its value at the floor along the voltage angle.
    den = max(vmag, 1e-300) * veff
    is_d = (p_ref * vm_d + q_ref * vm_q) / den
    is_q = (p_ref * vm_q - q_ref * vm_d) / den
    raw_d = is_d + corr_d
    raw_q = is_q + corr_q
    lim = SmoothLimiter(limit=i_max, k=limiter_k)
    iref_d, iref_q = sat_vector(lim, raw_d, raw_q)
    e_d = iref_d - i_d
    e_q = iref_q - i_q
    c, s = math.cos(theta), math.sin(theta)
    return {
        "f_theta": omega_pll - omega0,
        "f_eps": ki_pll * v_pll_q,
        "f_id": kp_cc * e_d + xi_d - r_f * i_d,      # mass l_f
        "f_iq": kp_cc * e_q + xi_q - r_f * i_q,      # mass l_f
        "f_xid": anti_windup_rate(ki_cc * e_d, raw_d, iref_d, k_aw),
        "f_xiq": anti_windup_rate(ki_cc * e_q, raw_q, iref_q, k_aw),
        "f_vmd": v_pll_d - vm_d,                     # mass tau_meas
        "f_vmq": v_pll_q - vm_q,
        "inj_d": i_d * c - i_q * s,
        "inj_q": i_d * s + i_q * c,
        "v_pll_d": v_pll_d,
        "v_pll_q": v_pll_q,
        "omega_pll": omega_pll,
        "raw_d": raw_d,
        "raw_q": raw_q,
        "iref_d": iref_d,
        "iref_q": iref_q,
        "vmod_d": v_pll_d + kp_cc * e_d + xi_d - omega_pll * l_f * i_q,
        "vmod_q": v_pll_q + kp_cc * e_q + xi_q + omega_pll * l_f * i_d,
        "activity": limiter_k * math.hypot(raw_d, raw_q) / i_max,
    }


def pll_residual(conv: GflConverter, state: GflState, vd: float, vq: float,
                 omega0: float):
    """PLL rates and frequency estimate: ``(f_theta, f_eps, omega_pll)``.

    ``f_theta`` is ``d(theta)/dt`` relative to the synchronous frame; at
    lock the PLL-frame q component of the bus voltage is zero.
    """
    v_pll_d, v_pll_q = pll_project(vd, vq, state.theta)
    omega_pll = omega0 + conv.kp_pll * v_pll_q + state.eps
    return omega_pll - omega0, conv.ki_pll * v_pll_q, omega_pll


def current_reference(conv: GflConverter, vd: float, vq: float,
                      corr_d: float = 0.0, corr_q: float = 0.0):
    """Limited current reference in the PLL frame (angle preserved).

    Combines the active-power set-point with the Volt/VAR droop
    ``q_ref = q0 + kq (v_ref - |v|)`` and an optional VAL correction, then
    applies the smooth magnitude limiter.  Raises below the voltage floor.
    """
    vmag = math.hypot(vd, vq)
    if vmag <= V_FLOOR:
        raise DegenerateVoltageError(
            f"voltage magnitude {vmag:.4g} pu at converter {conv.id!r} is "
            f"at or below the {V_FLOOR} pu floor", bus=conv.bus)
    q_ref = conv.q0 + conv.kq * (conv.v_ref - vmag)
    v2 = vmag * vmag
    raw_d = (conv.p_ref * vd + q_ref * vq) / v2 + corr_d
    raw_q = (conv.p_ref * vq - q_ref * vd) / v2 + corr_q
    return sat_vector(conv.limiter, raw_d, raw_q)


def gfl_residual(conv: GflConverter, state: GflState, vd: float, vq: float,
                 omega0: float, corr_d: float = 0.0, corr_q: float = 0.0):
    """Standalone GFL evaluation with the converter's own parameters and an
    unfiltered measurement (the PLL-frame voltage feeds the reference path
    directly)."""
    vm_d, vm_q = pll_project(vd, vq, state.theta)
    return gfl_rates(
        omega0, state.theta, state.eps, state.i_d, state.i_q,
        state.xi_d, state.xi_q, vd, vq, vm_d, vm_q, corr_d, corr_q,
        conv.p_ref, conv.q0, conv.kq, conv.v_ref, conv.kp_pll, conv.ki_pll,
        conv.kp_cc, conv.ki_cc, conv.k_aw, conv.i_max, conv.limiter_k,
        conv.l_f, conv.r_f, conv_id=conv.id)


def gfm_rates(omega0, theta, p_f, q_f, vd, vq, m_p, n_q, v_set, p_set,
              q_set, r_v, l_v, tau_p, tau_q):
    """GFM droop residuals and injected current.

    The internal source ``E = v_set - n_q (Q_f - q_set)`` at angle
    ``theta`` injects through ``r_v + j omega0 l_v``; measured powers are
    first-order filtered with time constants ``tau_p`` and ``tau_q``
    (masses of the corresponding rows).
    """
    e_mag = v_set - n_q * (q_f - q_set)
    e_d = e_mag * math.cos(theta)
    e_q = e_mag * math.sin(theta)
    x_v = omega0 * l_v
    den = r_v * r_v + x_v * x_v
    dd = e_d - vd
    dq = e_q - vq
    inj_d = (dd * r_v + dq * x_v) / den
    inj_q = (dq * r_v - dd * x_v) / den
    p_inst = vd * inj_d + vq * inj_q
    q_inst = vq * inj_d - vd * inj_q
    return {
        "f_theta": -m_p * (p_f - p_set),
        "f_pf": p_inst - p_f,      # mass tau_p
        "f_qf": q_inst - q_f,      # mass tau_q
        "inj_d": inj_d,
        "inj_q": inj_q,
        "e_mag": e_mag,
        "p_inst": p_inst,
        "q_inst": q_inst,
    }


def gfm_droop_residual(gfm: GfmDroop, theta: float, p_f: float, q_f: float,
                       vd: float, vq: float, omega0: float):
    return gfm_rates(omega0, theta, p_f, q_f, vd, vq, gfm.m_p, gfm.n_q,
                     gfm.v_set, gfm.p_set, gfm.q_set, gfm.r_v, gfm.l_v,
                     gfm.tau_p, gfm.tau_q)
