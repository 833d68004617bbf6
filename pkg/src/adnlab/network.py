"""Per-unit network model and assembly into a residual system.

The network is formulated as dynamic phasors in a synchronous dq frame
rotating at the nominal speed ``omega0``.  Every bus carries a small shunt
capacitance so node voltages are states and the default model is a pure
ODE; pinned (infinite-bus) sources and degenerate virtual-admittance
branches introduce zero-mass algebraic rows that the engine handles as a
semi-explicit DAE.

Sign conventions: a dq pair maps to the complex phasor ``x_d + j x_q``;
the frame-rotation coupling enters every inductive/capacitive dynamic as
``-j omega0``, so a static branch satisfies the familiar phasor law
``v_from - v_to = (r + j omega0 l) i``.  Device injections are positive
into the bus; loads return consumed current and are subtracted.
"""

import math
from dataclasses import dataclass

import numpy as np

from .converters import (GflConverter, V_FLOOR, gfl_rates, gfm_rates,
                         pll_project)
from .engine import DaeSystem, Params
from .errors import DegenerateVoltageError, ModelValidationError
from .limits import rate_window, smooth_deadband
from .val import dval_rate, dval_realization, qval_correction

__all__ = [
    "OMEGA0",
    "Bus",
    "RlBranch",
    "ZipLoad",
    "InductionMachine",
    "LtcTransformer",
    "GridSource",
    "NetworkModel",
    "AssembledSystem",
    "zip_injection",
    "im_rates",
    "im_steady_torque",
    "ltc_rate",
    "reactance_to_inductance",
]

OMEGA0 = 2.0 * math.pi * 50.0


def reactance_to_inductance(x_pu: float, omega0: float = OMEGA0) -> float:
    """Convert a reactance at nominal frequency to the inductance used by
    the dynamic equations (``l = x / omega0``)."""
    return x_pu / omega0


@dataclass(frozen=True)
class Bus:
    """Network node; ``b_sh`` is the shunt susceptance at nominal frequency
    (pu, > 0) giving the capacitance ``c = b_sh / omega0``."""

    id: str
    b_sh: float = 1e-4
    v_d: float = 1.0   # initial guess
    v_q: float = 0.0

    def __post_init__(self):
        if self.b_sh <= 0.0:
            raise ModelValidationError(
                f"bus {self.id!r}: shunt susceptance must be positive")


@dataclass(frozen=True)
class RlBranch:
    """Series RL line between two buses; ``l`` in seconds (x/omega0)."""

    id: str
    from_bus: str
    to_bus: str
    r: float
    l: float

    def __post_init__(self):
        if self.l <= 0.0:
            raise ModelValidationError(f"branch {self.id!r}: l must be positive")
        if self.r < 0.0:
            raise ModelValidationError(f"branch {self.id!r}: r must be >= 0")
        if self.from_bus == self.to_bus:
            raise ModelValidationError(f"branch {self.id!r}: from == to")


@dataclass(frozen=True)
class ZipLoad:
    """Static load: constant-impedance + constant-current + constant-power
    mixture referenced to ``v0``."""

    id: str
    bus: str
    p0: float
    q0: float = 0.0
    a_z: float = 0.0
    a_i: float = 0.0
    a_p: float = 1.0
    b_z: float = 0.0
    b_i: float = 0.0
    b_p: float = 1.0
    v0: float = 1.0

    def __post_init__(self):
        for name, frac in (("a_z", self.a_z), ("a_i", self.a_i), ("a_p", self.a_p),
                           ("b_z", self.b_z), ("b_i", self.b_i), ("b_p", self.b_p)):
            if not 0.0 <= frac <= 1.0:
                raise ModelValidationError(
                    f"load {self.id!r}: fraction {name}={frac} outside [0, 1]")
        if abs(self.a_z + self.a_i + self.a_p - 1.0) > 1e-9:
            raise ModelValidationError(f"load {self.id!r}: active fractions must sum to 1")
        if abs(self.b_z + self.b_i + self.b_p - 1.0) > 1e-9:
            raise ModelValidationError(f"load {self.id!r}: reactive fractions must sum to 1")
        if self.v0 <= 0.0:
            raise ModelValidationError(f"load {self.id!r}: v0 must be positive")


@dataclass(frozen=True)
class InductionMachine:
    """Third-order induction-machine load (stator transients neglected)."""

    id: str
    bus: str
    x_s: float = 0.1
    x_r: float = 0.18
    x_m: float = 3.2
    r_r: float = 0.03
    r_s: float = 0.01
    h: float = 0.6
    t_mech: float = 0.5
    s0: float = 0.02         # initial slip guess
    omega0: float = OMEGA0

    def __post_init__(self):
        if self.h <= 0.0:
            raise ModelValidationError(f"machine {self.id!r}: inertia must be positive")
        if self.t0_prime <= 0.0 or self.x_prime <= 0.0:
            raise ModelValidationError(
                f"machine {self.id!r}: derived time constant / transient "
                "reactance must be positive")

    @property
    def x0(self) -> float:
        return self.x_s + self.x_m

    @property
    def x_prime(self) -> float:
        return self.x_s + self.x_m * self.x_r / (self.x_m + self.x_r)

    @property
    def t0_prime(self) -> float:
        return (self.x_r + self.x_m) / (self.omega0 * self.r_r)


@dataclass(frozen=True)
class LtcTransformer:
    """Transformer with a continuous load-tap-changer regulating the
    ``to``-side voltage magnitude within a smooth deadband."""

    id: str
    from_bus: str
    to_bus: str
    x_t: float = 0.1
    n0: float = 1.0
    n_min: float = 0.9
    n_max: float = 1.1
    t_ltc: float = 30.0
    v_ref: float = 1.0
    d_band: float = 0.01
    k_s: float = 5.0

    def __post_init__(self):
        if not self.n_min < self.n_max:
            raise ModelValidationError(f"ltc {self.id!r}: n_min must be < n_max")
        if self.t_ltc <= 0.0 or self.x_t <= 0.0 or self.k_s <= 0.0:
            raise ModelValidationError(f"ltc {self.id!r}: x_t, t_ltc, k_s must be positive")
        if self.from_bus == self.to_bus:
            raise ModelValidationError(f"ltc {self.id!r}: from == to")


@dataclass(frozen=True)
class GridSource:
    """Thevenin grid equivalent.  With ``r_g == l_g == 0`` the source pins
    its bus voltage (infinite bus, algebraic rows); otherwise the source
    current is a dynamic state behind ``r_g + j omega0 l_g``.

    ``rotating=True`` adds an angle state ``d(theta)/dt = omega_offset``
    so grid-frequency steps can be simulated; such a system has no
    equilibrium and is meant for time-domain studies initialized from the
    non-rotating twin.
    """

    id: str
    bus: str
    e_mag: float = 1.0
    r_g: float = 0.0
    l_g: float = 0.0
    rotating: bool = False

    def __post_init__(self):
        if self.e_mag <= 0.0:
            raise ModelValidationError(f"source {self.id!r}: e_mag must be positive")
        if self.r_g < 0.0 or self.l_g < 0.0:
            raise ModelValidationError(f"source {self.id!r}: impedance must be >= 0")

    @property
    def pinned(self) -> bool:
        return self.r_g == 0.0 and self.l_g == 0.0


def zip_injection(load: ZipLoad, vd: float, vq: float, lam: float,
                  strict: bool = True):
    """Consumed current of a ZIP load (load convention, out of the bus).

    ``P(V) = lam p0 (a_z (V/v0)^2 + a_i (V/v0) + a_p)`` and analogously for
    Q; the injection is ``conj((P + jQ)/v)``.  Below the voltage floor the
    strict form raises; the guarded form (used inside residual evaluation)
    freezes the magnitude of the 1/V branches at their floor value along
    the voltage angle so residuals stay bounded near collapse.
    """
    vmag = math.hypot(vd, vq)
    if strict and vmag <= V_FLOOR:
        raise DegenerateVoltageError(
            f"voltage magnitude {vmag:.4g} pu at bus {load.bus!r} is at or "
            f"below the {V_FLOOR} pu floor", bus=load.bus)
    if vmag == 0.0:
        return 0.0, 0.0
    veff = max(vmag, V_FLOOR)
    # constant-impedance part: P_z/V^2 is voltage independent
    cz_p = lam * load.p0 * load.a_z / (load.v0 * load.v0)
    cz_q = lam * load.q0 * load.b_z / (load.v0 * load.v0)
    i_d = cz_p * vd + cz_q * vq
    i_q = cz_p * vq - cz_q * vd
    # constant-current and constant-power parts share the guarded divisor
    p_ip = lam * load.p0 * (load.a_i * vmag / load.v0 + load.a_p)
    q_ip = lam * load.q0 * (load.b_i * vmag / load.v0 + load.b_p)
    den = vmag * veff
    i_d += (p_ip * vd + q_ip * vq) / den
    i_q += (p_ip * vq - q_ip * vd) / den
    return i_d, i_q


def zip_power(load: ZipLoad, vmag: float, lam: float):
    """P, Q drawn by a ZIP load at voltage magnitude ``vmag``."""
    rel = vmag / load.v0
    p = lam * load.p0 * (load.a_z * rel * rel + load.a_i * rel + load.a_p)
    q = lam * load.q0 * (load.b_z * rel * rel + load.b_i * rel + load.b_p)
    return p, q


def im_rates(m: InductionMachine, vd: float, vq: float, s: float,
             e_d: float, e_q: float, lam: float = 1.0):
    """Third-order machine residual rates and stator current.

    Returns ``(f_s, f_ed, f_eq, i_d, i_q)`` where the slip row has mass
    ``2h`` and the EMF rows mass ``t0'``; the stator current follows
    ``(v - e')/(r_s + j x')`` in motor convention and the electrical
    torque is ``Re(e' conj(i))``.
    """
    xp = m.x_prime
    x0 = m.x0
    t0p = m.t0_prime
    den = m.r_s * m.r_s + xp * xp
    dd = vd - e_d
    dq = vq - e_q
    i_d = (dd * m.r_s + dq * xp) / den
    i_q = (dq * m.r_s - dd * xp) / den
    t_e = e_d * i_d + e_q * i_q
    f_s = lam * m.t_mech - t_e
    f_ed = t0p * m.omega0 * s * e_q - e_d - (x0 - xp) * i_q
    f_eq = -t0p * m.omega0 * s * e_d - e_q + (x0 - xp) * i_d
    return f_s, f_ed, f_eq, i_d, i_q


def im_steady_torque(m: InductionMachine, vmag: float, s: float) -> float:
    """Electrical torque from the classic steady-state equivalent circuit
    (magnetizing branch in parallel with the rotor branch).  Used as an
    independent oracle for the dynamic-model equilibrium."""
    if s == 0.0:
        return 0.0
    v = complex(vmag, 0.0)
    z_rot = complex(m.r_r / s, m.x_r)
    z_mag = complex(0.0, m.x_m)
    z_par = z_mag * z_rot / (z_mag + z_rot)
    i_s = v / (complex(m.r_s, m.x_s) + z_par)
    i_r = i_s * z_mag / (z_mag + z_rot)
    return abs(i_r) ** 2 * m.r_r / s


def ltc_rate(t: LtcTransformer, v_reg: float, n: float, v_ref=None) -> float:
    """Tap rate ``dn/dt`` (the assembled row carries mass ``t_ltc``).

    The smooth deadband acts on the regulation error and the rate window
    suppresses motion toward a nearby tap limit.
    """
    ref = t.v_ref if v_ref is None else v_ref
    err = float(smooth_deadband(t.d_band, t.k_s, ref - v_reg))
    win = rate_window(n, t.n_min, t.n_max, t.k_s, err)
    return err * win / t.t_ltc


@dataclass(frozen=True)
class NetworkModel:
    """Immutable network description; ``build`` compiles it to a residual
    system."""

    buses: tuple
    branches: tuple = ()
    sources: tuple = ()
    zip_loads: tuple = ()
    machines: tuple = ()
    ltcs: tuple = ()
    gfls: tuple = ()
    gfms: tuple = ()
    omega0: float = OMEGA0

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ModelValidationError("duplicate bus id")
        device_ids = [d.id for group in (self.branches, self.sources,
                                         self.zip_loads, self.machines,
                                         self.ltcs, self.gfls, self.gfms)
                      for d in group]
        if len(set(device_ids)) != len(device_ids):
            raise ModelValidationError("duplicate device id")
        bus_set = set(ids)
        for group, attr in ((self.sources, "bus"), (self.zip_loads, "bus"),
                            (self.machines, "bus"), (self.gfls, "bus"),
                            (self.gfms, "bus")):
            for dev in group:
                if getattr(dev, attr) not in bus_set:
                    raise ModelValidationError(
                        f"device {dev.id!r} references unknown bus "
                        f"{getattr(dev, attr)!r}")
        for dev in (*self.branches, *self.ltcs):
            for end in (dev.from_bus, dev.to_bus):
                if end not in bus_set:
                    raise ModelValidationError(
                        f"device {dev.id!r} references unknown bus {end!r}")
        self._check_connected()

    def _check_connected(self):
        if len(self.buses) <= 1:
            return
        parent = {b.id: b.id for b in self.buses}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for dev in (*self.branches, *self.ltcs):
            parent[find(dev.from_bus)] = find(dev.to_bus)
        roots = {find(b.id) for b in self.buses}
        if len(roots) != 1:
            raise ModelValidationError(
                f"network graph is disconnected ({len(roots)} islands)")

    def build(self, rotating_sources: bool = False) -> "AssembledSystem":
        return AssembledSystem(self, rotating_sources)




class AssembledSystem(DaeSystem):
    """Compiled residual system for a :class:`NetworkModel`.

    State layout: bus voltage pairs, then branch currents, source currents
    (Thevenin only) and angles (rotating only), LTC current/tap, machine
    (slip, e') triples, GFL converter states and GFM droop states.  All
    runtime-variable quantities are read from the parameter vector through
    indices precomputed here, so residual evaluation allocates nothing but
    the output array.
    """

    def __init__(self, model: NetworkModel, rotating_sources: bool = False):
        self.model = model
        self.omega0 = model.omega0
        self.rotating = rotating_sources

        names = []
        mass_const = []
        mass_param = []        # (state index, parameter name) fixed up below
        pnames, pvals = ["lambda"], [1.0]

        def add_param(name, value):
            pnames.append(name)
            pvals.append(float(value))
            return len(pnames) - 1

        self.bus_ids = tuple(b.id for b in model.buses)
        self.bus_pos = {b.id: i for i, b in enumerate(model.buses)}
        self.vidx = {}
        pinned_sources = {}
        for src in model.sources:
            if src.pinned:
                if src.bus in pinned_sources:
                    raise ModelValidationError(
                        f"bus {src.bus!r} pinned by more than one source")
                pinned_sources[src.bus] = src
        self.pinned = pinned_sources

        for bus in model.buses:
            self.vidx[bus.id] = len(names)
            names += [f"{bus.id}.vd", f"{bus.id}.vq"]
            c = 0.0 if bus.id in pinned_sources else bus.b_sh / model.omega0
            mass_const += [c, c]
        self._bus_c = np.array([0.0 if b.id in pinned_sources
                                else b.b_sh / model.omega0
                                for b in model.buses])

        self._branches = []
        for br in model.branches:
            idx = len(names)
            names += [f"{br.id}.id", f"{br.id}.iq"]
            ip_r = add_param(f"{br.id}.r", br.r)
            ip_l = add_param(f"{br.id}.l", br.l)
            mass_const += [0.0, 0.0]
            mass_param += [(idx, ip_l), (idx + 1, ip_l)]
            self._branches.append((br, self.bus_pos[br.from_bus],
                                   self.bus_pos[br.to_bus],
                                   self.vidx[br.from_bus],
                                   self.vidx[br.to_bus], idx, ip_r, ip_l))

        self._sources = []
        for src in model.sources:
            ip_e = add_param(f"{src.id}.e_mag", src.e_mag)
            ip_th = add_param(f"{src.id}.theta", 0.0)
            i_idx = th_idx = -1
            ip_rg = ip_lg = ip_off = -1
            if not src.pinned:
                i_idx = len(names)
                names += [f"{src.id}.id", f"{src.id}.iq"]
                ip_rg = add_param(f"{src.id}.r_g", src.r_g)
                ip_lg = add_param(f"{src.id}.l_g", src.l_g)
                mass_const += [0.0, 0.0]
                mass_param += [(i_idx, ip_lg), (i_idx + 1, ip_lg)]
            if rotating_sources and src.rotating:
                th_idx = len(names)
                names += [f"{src.id}.theta_g"]
                ip_off = add_param(f"{src.id}.omega_offset", 0.0)
                mass_const += [1.0]
            self._sources.append((src, self.bus_pos[src.bus],
                                  self.vidx[src.bus], i_idx, th_idx,
                                  ip_e, ip_th, ip_rg, ip_lg, ip_off))

        self._ltcs = []
        for ltc in model.ltcs:
            idx = len(names)
            names += [f"{ltc.id}.id", f"{ltc.id}.iq", f"{ltc.id}.n"]
            ip_vref = add_param(f"{ltc.id}.v_ref", ltc.v_ref)
            l_t = ltc.x_t / model.omega0
            mass_const += [l_t, l_t, ltc.t_ltc]
            self._ltcs.append((ltc, self.bus_pos[ltc.from_bus],
                               self.bus_pos[ltc.to_bus],
                               self.vidx[ltc.from_bus], self.vidx[ltc.to_bus],
                               idx, ip_vref, l_t))

        self._machines = []
        for m in model.machines:
            idx = len(names)
            names += [f"{m.id}.s", f"{m.id}.ed", f"{m.id}.eq"]
            ip_tm = add_param(f"{m.id}.t_mech", m.t_mech)
            mass_const += [2.0 * m.h, m.t0_prime, m.t0_prime]
            self._machines.append((m, self.bus_pos[m.bus], self.vidx[m.bus],
                                   idx, ip_tm))

        self._zips = [(load, self.bus_pos[load.bus], self.vidx[load.bus])
                      for load in model.zip_loads]

        GFL_PARAMS = ("p_ref", "q0", "kq", "v_ref", "kp_pll", "ki_pll",
                      "kp_cc", "ki_cc", "k_aw", "i_max")
        self._gfls = []
        for conv in model.gfls:
            idx = len(names)
            names += [f"{conv.id}.theta", f"{conv.id}.eps", f"{conv.id}.id",
                      f"{conv.id}.iq", f"{conv.id}.xid", f"{conv.id}.xiq"]
            mass_const += [1.0, 1.0, conv.l_f, conv.l_f, 1.0, 1.0]
            pidx = tuple(add_param(f"{conv.id}.{nm}", getattr(conv, nm))
                         for nm in GFL_PARAMS)
            vm_idx = -1
            if conv.tau_meas > 0.0:
                vm_idx = len(names)
                names += [f"{conv.id}.vmd", f"{conv.id}.vmq"]
                mass_const += [conv.tau_meas, conv.tau_meas]
            val_idx = None
            real = None
            dv_idx = -1
            if conv.val_mode == "qval":
                val_idx = (add_param(f"{conv.id}.g_v", conv.val.g_v),
                           add_param(f"{conv.id}.b_v", conv.val.b_v),
                           add_param(f"{conv.id}.v_nom", conv.val.v_nom))
            elif conv.val_mode == "dval":
                real = dval_realization(conv.val.g_v, conv.val.b_v,
                                        model.omega0)
                dv_idx = len(names)
                names += [f"{conv.id}.ivd", f"{conv.id}.ivq"]
                mass_const += [real.l_mag, real.l_mag]
            self._gfls.append((conv, self.bus_pos[conv.bus],
                               self.vidx[conv.bus], idx, pidx, val_idx, real,
                               vm_idx, dv_idx))

        GFM_PARAMS = ("m_p", "n_q", "v_set", "p_set", "q_set")
        self._gfms = []
        for gfm in model.gfms:
            idx = len(names)
            names += [f"{gfm.id}.theta", f"{gfm.id}.pf", f"{gfm.id}.qf"]
            mass_const += [1.0, gfm.tau_p, gfm.tau_q]
            pidx = tuple(add_param(f"{gfm.id}.{nm}", getattr(gfm, nm))
                         for nm in GFM_PARAMS)
            self._gfms.append((gfm, self.bus_pos[gfm.bus],
                               self.vidx[gfm.bus], idx, pidx))

        self._mass_base = np.array(mass_const)
        self._mass_param = tuple(mass_param)
        params0 = Params(pnames, np.array(pvals))
        super().__init__(len(names), self._residual_impl, self._mass_impl,
                         params0, state_names=names,
                         limiter_activity_fn=self._activity_impl)

    # ------------------------------------------------------------------
    # evaluation

    def _mass_impl(self, p: Params):
        m = self._mass_base.copy()
        pv = p.values
        for i, j in self._mass_param:
            m[i] = pv[j]
        return m

    def _residual_impl(self, x, p: Params):
        f, _ = self._evaluate(x, p)
        return f

    def _evaluate(self, x, p: Params, outputs: dict | None = None):
        """Residual vector plus net injected current (bus, dq)."""
        w0 = self.omega0
        pv = p.values
        lam = pv[0]
        n_bus = len(self.bus_ids)
        inj = np.zeros((n_bus, 2))
        f = np.zeros(self.n)

        for br, fp, tp, vf, vt, idx, ip_r, ip_l in self._branches:
            i_d, i_q = x[idx], x[idx + 1]
            r, l = pv[ip_r], pv[ip_l]
            f[idx] = x[vf] - x[vt] - r * i_d + w0 * l * i_q
            f[idx + 1] = x[vf + 1] - x[vt + 1] - r * i_q - w0 * l * i_d
            inj[fp, 0] -= i_d
            inj[fp, 1] -= i_q
            inj[tp, 0] += i_d
            inj[tp, 1] += i_q

        for (src, bp, vi, i_idx, th_idx, ip_e, ip_th, ip_rg, ip_lg,
             ip_off) in self._sources:
            theta = x[th_idx] if th_idx >= 0 else pv[ip_th]
            e_d = pv[ip_e] * math.cos(theta)
            e_q = pv[ip_e] * math.sin(theta)
            if th_idx >= 0:
                f[th_idx] = pv[ip_off]
            if i_idx < 0:
                f[vi] = e_d - x[vi]
                f[vi + 1] = e_q - x[vi + 1]
            else:
                i_d, i_q = x[i_idx], x[i_idx + 1]
                r_g, l_g = pv[ip_rg], pv[ip_lg]
                f[i_idx] = e_d - x[vi] - r_g * i_d + w0 * l_g * i_q
                f[i_idx + 1] = e_q - x[vi + 1] - r_g * i_q - w0 * l_g * i_d
                inj[bp, 0] += i_d
                inj[bp, 1] += i_q

        for ltc, fp, tp, vf, vt, idx, ip_vref, l_t in self._ltcs:
            i_d, i_q, n_tap = x[idx], x[idx + 1], x[idx + 2]
            f[idx] = n_tap * x[vf] - x[vt] + w0 * l_t * i_q
            f[idx + 1] = n_tap * x[vf + 1] - x[vt + 1] - w0 * l_t * i_d
            v_reg = math.hypot(x[vt], x[vt + 1])
            err = float(smooth_deadband(ltc.d_band, ltc.k_s,
                                        pv[ip_vref] - v_reg))
            f[idx + 2] = err * rate_window(n_tap, ltc.n_min, ltc.n_max,
                                           ltc.k_s, err)
            inj[fp, 0] -= n_tap * i_d
            inj[fp, 1] -= n_tap * i_q
            inj[tp, 0] += i_d
            inj[tp, 1] += i_q

        for m, bp, vi, idx, ip_tm in self._machines:
            eff = m if pv[ip_tm] == m.t_mech else \
                _machine_with_torque(m, pv[ip_tm])
            f_s, f_ed, f_eq, i_d, i_q = im_rates(
                eff, x[vi], x[vi + 1], x[idx], x[idx + 1], x[idx + 2], lam)
            f[idx], f[idx + 1], f[idx + 2] = f_s, f_ed, f_eq
            inj[bp, 0] -= i_d
            inj[bp, 1] -= i_q
            if outputs is not None:
                outputs[f"{m.id}.i"] = (i_d, i_q)

        for load, bp, vi in self._zips:
            i_d, i_q = zip_injection(load, x[vi], x[vi + 1], lam, strict=False)
            inj[bp, 0] -= i_d
            inj[bp, 1] -= i_q
            if outputs is not None:
                outputs[f"{load.id}.i"] = (i_d, i_q)

        for conv, bp, vi, idx, pidx, val_idx, real, vm_idx, dv_idx in self._gfls:
            vd, vq = x[vi], x[vi + 1]
            if vm_idx >= 0:
                vm_d, vm_q = x[vm_idx], x[vm_idx + 1]
            else:
                vm_d, vm_q = pll_project(vd, vq, x[idx])
            corr_d = corr_q = 0.0
            if val_idx is not None:
                dv_d = pv[val_idx[2]] - vm_d
                dv_q = -vm_q
                corr_d, corr_q = qval_correction(pv[val_idx[0]],
                                                 pv[val_idx[1]], dv_d, dv_q)
            elif real is not None:
                corr_d, corr_q = x[dv_idx], x[dv_idx + 1]
            out = gfl_rates(
                w0, x[idx], x[idx + 1], x[idx + 2], x[idx + 3], x[idx + 4],
                x[idx + 5], vd, vq, vm_d, vm_q, corr_d, corr_q,
                pv[pidx[0]], pv[pidx[1]], pv[pidx[2]], pv[pidx[3]],
                pv[pidx[4]], pv[pidx[5]], pv[pidx[6]], pv[pidx[7]],
                pv[pidx[8]], pv[pidx[9]], conv.limiter_k, conv.l_f, conv.r_f,
                conv_id=conv.id)
            f[idx] = out["f_theta"]
            f[idx + 1] = out["f_eps"]
            f[idx + 2] = out["f_id"]
            f[idx + 3] = out["f_iq"]
            f[idx + 4] = out["f_xid"]
            f[idx + 5] = out["f_xiq"]
            if vm_idx >= 0:
                f[vm_idx] = out["f_vmd"]
                f[vm_idx + 1] = out["f_vmq"]
            if real is not None:
                dv_d = conv.val.v_nom - vm_d
                dv_q = -vm_q
                f[dv_idx], f[dv_idx + 1] = dval_rate(
                    real, x[dv_idx], x[dv_idx + 1], dv_d, dv_q, w0)
            inj[bp, 0] += out["inj_d"]
            inj[bp, 1] += out["inj_q"]
            if outputs is not None:
                outputs[conv.id] = out

        for gfm, bp, vi, idx, pidx in self._gfms:
            out = gfm_rates(w0, x[idx], x[idx + 1], x[idx + 2],
                            x[vi], x[vi + 1],
                            pv[pidx[0]], pv[pidx[1]], pv[pidx[2]],
                            pv[pidx[3]], pv[pidx[4]], gfm.r_v, gfm.l_v,
                            gfm.tau_p, gfm.tau_q)
            f[idx] = out["f_theta"]
            f[idx + 1] = out["f_pf"]
            f[idx + 2] = out["f_qf"]
            inj[bp, 0] += out["inj_d"]
            inj[bp, 1] += out["inj_q"]
            if outputs is not None:
                outputs[gfm.id] = out

        bus_c = self._bus_c
        for bp, bus_id in enumerate(self.bus_ids):
            if bus_id in self.pinned:
                continue
            vi = self.vidx[bus_id]
            c = bus_c[bp]
            f[vi] = inj[bp, 0] + w0 * c * x[vi + 1]
            f[vi + 1] = inj[bp, 1] - w0 * c * x[vi]
        return f, inj

    def _activity_impl(self, x, p: Params):
        if not self._gfls:
            return {}
        outputs = {}
        self._evaluate(x, p, outputs)
        return {conv.id: outputs[conv.id]["activity"]
                for conv, *_ in self._gfls}

    # ------------------------------------------------------------------
    # helpers

    def initial_guess(self) -> np.ndarray:
        x = np.zeros(self.n)
        for bus in self.model.buses:
            vi = self.vidx[bus.id]
            x[vi], x[vi + 1] = bus.v_d, bus.v_q
        for ltc, fp, tp, vf, vt, idx, ip_vref, l_t in self._ltcs:
            x[idx + 2] = ltc.n0
        for m, bp, vi, idx, ip_tm in self._machines:
            x[idx] = m.s0
            x[idx + 1], x[idx + 2] = 0.95, 0.0
        for conv, bp, vi, idx, pidx, val_idx, real, vm_idx, dv_idx in self._gfls:
            q_ref = conv.q0 + conv.kq * (conv.v_ref - 1.0)
            x[idx + 2] = conv.p_ref
            x[idx + 3] = -q_ref
            x[idx + 4] = conv.r_f * x[idx + 2]
            x[idx + 5] = conv.r_f * x[idx + 3]
            if vm_idx >= 0:
                x[vm_idx] = 1.0
        return x

    def bus_voltage(self, x, bus_id: str):
        vi = self.vidx[bus_id]
        return float(x[vi]), float(x[vi + 1])

    def bus_voltage_mag(self, x, bus_id: str) -> float:
        vd, vq = self.bus_voltage(x, bus_id)
        return math.hypot(vd, vq)

    def voltage_magnitudes(self, x) -> dict:
        return {b: self.bus_voltage_mag(x, b) for b in self.bus_ids}

    def outputs(self, x, p: Params) -> dict:
        """Per-device auxiliary outputs (converter internals, load currents)."""
        out = {}
        self._evaluate(np.asarray(x, dtype=float), p, out)
        return out

    def gfl_ids(self):
        return tuple(conv.id for conv, *_ in self._gfls)

    def gfm_ids(self):
        return tuple(gfm.id for gfm, *_ in self._gfms)

    def gfl_state_index(self, conv_id: str) -> int:
        for conv, bp, vi, idx, *_ in self._gfls:
            if conv.id == conv_id:
                return idx
        raise KeyError(f"unknown converter {conv_id!r}")

    def converter(self, conv_id: str) -> GflConverter:
        for conv, *_ in self._gfls:
            if conv.id == conv_id:
                return conv
        for gfm, *_ in self._gfms:
            if gfm.id == conv_id:
                return gfm
        raise KeyError(f"unknown converter {conv_id!r}")

    def rotate_states(self, x, phi: float) -> np.ndarray:
        """Rotate every network-frame dq pair by ``phi`` and shift every
        absolute angle state; PLL/converter-frame local states are
        untouched.  Combined with shifting the source angle parameters by
        ``phi`` this maps solutions to solutions."""
        x = np.asarray(x, dtype=float).copy()
        c, s = math.cos(phi), math.sin(phi)

        def rot(i):
            d, q = x[i], x[i + 1]
            x[i] = d * c - q * s
            x[i + 1] = d * s + q * c

        for bus in self.model.buses:
            rot(self.vidx[bus.id])
        for _br, fp, tp, vf, vt, idx, *_ in self._branches:
            rot(idx)
        for _src, bp, vi, i_idx, th_idx, *_ in self._sources:
            if i_idx >= 0:
                rot(i_idx)
            if th_idx >= 0:
                x[th_idx] += phi
        for _ltc, fp, tp, vf, vt, idx, *_ in self._ltcs:
            rot(idx)
        for _m, bp, vi, idx, ip in self._machines:
            rot(idx + 1)
        for _conv, bp, vi, idx, *_ in self._gfls:
            x[idx] += phi
        for _gfm, bp, vi, idx, _pidx in self._gfms:
            x[idx] += phi
        return x

    def rotate_params(self, p: Params, phi: float) -> Params:
        updates = {}
        for src, *_ in self._sources:
            updates[f"{src.id}.theta"] = p[f"{src.id}.theta"] + phi
        return p.with_values(updates) if updates else p

    def residual_rotation(self, f, phi: float) -> np.ndarray:
        """Apply the frame rotation to a residual vector (dq rows transform
        like their states; scalar and converter-frame rows are fixed)."""
        f = np.asarray(f, dtype=float).copy()
        c, s = math.cos(phi), math.sin(phi)

        def rot(i):
            d, q = f[i], f[i + 1]
            f[i] = d * c - q * s
            f[i + 1] = d * s + q * c

        for bus in self.model.buses:
            rot(self.vidx[bus.id])
        for _br, fp, tp, vf, vt, idx, *_ in self._branches:
            rot(idx)
        for _src, bp, vi, i_idx, th_idx, *_ in self._sources:
            if i_idx >= 0:
                rot(i_idx)
        for _ltc, fp, tp, vf, vt, idx, *_ in self._ltcs:
            rot(idx)
        for _m, bp, vi, idx, ip in self._machines:
            rot(idx + 1)
        return f

    def power_report(self, x, p: Params) -> dict:
        """Active-power bookkeeping at a solution point.

        Generated power is measured at the device terminals (bus side);
        pinned sources pick up the KCL slack of their bus including the
        local shunt.
        """
        x = np.asarray(x, dtype=float)
        outs = {}
        _, inj = self._evaluate(x, p, outs)
        w0 = self.omega0
        gen = 0.0
        for src, bp, vi, i_idx, th_idx, *_ in self._sources:
            vd, vq = x[vi], x[vi + 1]
            if i_idx < 0:
                c = next(b.b_sh for b in self.model.buses
                         if b.id == src.bus) / w0
                i_d = -inj[bp, 0] - w0 * c * vq
                i_q = -inj[bp, 1] + w0 * c * vd
            else:
                i_d, i_q = x[i_idx], x[i_idx + 1]
            gen += vd * i_d + vq * i_q
        for conv, bp, vi, idx, *_ in self._gfls:
            o = outs[conv.id]
            gen += x[vi] * o["inj_d"] + x[vi + 1] * o["inj_q"]
        for gfm, bp, vi, idx, _pidx in self._gfms:
            o = outs[gfm.id]
            gen += x[vi] * o["inj_d"] + x[vi + 1] * o["inj_q"]
        consumed = 0.0
        for load, bp, vi in self._zips:
            i_d, i_q = outs[f"{load.id}.i"]
            consumed += x[vi] * i_d + x[vi + 1] * i_q
        for m, bp, vi, idx, ip in self._machines:
            i_d, i_q = outs[f"{m.id}.i"]
            consumed += x[vi] * i_d + x[vi + 1] * i_q
        losses = 0.0
        pv = p.values
        for br, fp, tp, vf, vt, idx, ip_r, ip_l in self._branches:
            losses += pv[ip_r] * (x[idx] ** 2 + x[idx + 1] ** 2)
        return {"generated": gen, "consumed": consumed,
                "branch_losses": losses}


def _machine_with_torque(m: InductionMachine, t_mech: float) -> InductionMachine:
    return InductionMachine(id=m.id, bus=m.bus, x_s=m.x_s, x_r=m.x_r,
                            x_m=m.x_m, r_r=m.r_r, r_s=m.r_s, h=m.h,
                            t_mech=t_mech, s0=m.s0, omega0=m.omega0)
