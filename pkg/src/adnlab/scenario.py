"""Scenario files: strict JSON schema, defaulting and canonical form.

A scenario fully describes a study: the per-unit network tables, optional
initial parameter overrides and per-analysis settings.  Unknown keys are
rejected everywhere, defaults are applied deterministically, and the
canonical serialization (sorted keys, all defaults filled) round-trips
byte for byte.
"""

import json
import math
from dataclasses import dataclass

from .converters import GflConverter, GfmDroop
from .errors import ModelValidationError, ScenarioError
from .network import (
    Bus,
    GridSource,
    InductionMachine,
    LtcTransformer,
    NetworkModel,
    RlBranch,
    ZipLoad,
)
from .val import ValGains

__all__ = ["Scenario", "load_scenario", "loads_scenario"]

_REQUIRED = object()

BASE_FIELDS = {"f_hz": 50.0, "s_mva": 1.0, "v_kv": 1.0}
BUS_FIELDS = {"id": _REQUIRED, "b_sh": 1e-4, "v_d": 1.0, "v_q": 0.0}
BRANCH_FIELDS = {"id": _REQUIRED, "from": _REQUIRED, "to": _REQUIRED,
                 "r": 0.0, "x": _REQUIRED}
SOURCE_FIELDS = {"id": _REQUIRED, "bus": _REQUIRED, "e_mag": 1.0,
                 "r_g": 0.0, "x_g": 0.0, "rotating": False}
ZIP_FIELDS = {"id": _REQUIRED, "bus": _REQUIRED, "p0": _REQUIRED, "q0": 0.0,
              "a_z": 0.0, "a_i": 0.0, "a_p": 1.0,
              "b_z": 0.0, "b_i": 0.0, "b_p": 1.0, "v0": 1.0}
MACHINE_FIELDS = {"id": _REQUIRED, "bus": _REQUIRED, "x_s": 0.1, "x_r": 0.18,
                  "x_m": 3.2, "r_r": 0.03, "r_s": 0.01, "h": 0.6,
                  "t_mech": 0.5, "s0": 0.02}
LTC_FIELDS = {"id": _REQUIRED, "from": _REQUIRED, "to": _REQUIRED,
              "x_t": 0.1, "n0": 1.0, "n_min": 0.9, "n_max": 1.1,
              "t_ltc": 30.0, "v_ref": 1.0, "d_band": 0.01, "k_s": 5.0}
VAL_FIELDS = {"mode": "off", "g_v": 0.0, "b_v": 0.0, "v_nom": 1.0,
              "g_min": -5.0, "g_max": 5.0, "b_min": -5.0, "b_max": 5.0}
GFL_FIELDS = {"id": _REQUIRED, "bus": _REQUIRED, "kind": "gfl",
              "x_f": 0.08, "r_f": 0.005, "kp_cc": 0.3, "ki_cc": 20.0,
              "kp_pll": 20.0, "ki_pll": 200.0, "p_ref": 0.4, "kq": 0.0,
              "v_ref": 1.0, "q0": 0.0, "i_max": 1.2, "limiter_k": 10.0,
              "k_aw": 1.0, "tau_meas": 0.002, "val": None}
GFM_FIELDS = {"id": _REQUIRED, "bus": _REQUIRED, "kind": "gfm_droop",
              "m_p": 6.28, "n_q": 0.05, "v_set": 1.0, "p_set": 0.0,
              "q_set": 0.0, "r_v": 0.02, "x_v": 0.2, "tau_p": 0.02,
              "tau_q": 0.02}
CONTINUATION_FIELDS = {"param": "lambda", "direction": 1.0, "h0": 0.02,
                       "h_min": 1e-5, "h_max": 0.05, "max_steps": 2000,
                       "param_min": 0.0, "param_max": 1e6}
BOUNDARY_FIELDS = {"param2": _REQUIRED, "grid": _REQUIRED}
SIMULATION_FIELDS = {"t_end": 1.0, "h": 1e-3, "startup_be_steps": 2,
                     "damped_every": 25, "param_steps": None}
SECONDARY_FIELDS = {"weights": None, "default_weight": 1.0, "rho": 1e-8,
                    "alpha": 1.0, "max_iter": 30, "tol_v": 0.01}
CF_FIELDS = {"bus": _REQUIRED, "converter": None, "window": 2,
             "t_end": 1.0, "h": 2e-4, "theta_step": 0.0, "omega_step": 0.0,
             "startup_be_steps": 2, "damped_every": 25}
ANALYSIS_FIELDS = {"continuation": None, "boundary2d": None,
                   "simulation": None, "secondary": None, "cf": None}
TOP_FIELDS = {"name": "scenario", "base": None, "buses": _REQUIRED,
              "branches": [], "sources": [], "zip_loads": [],
              "machines": [], "ltcs": [], "converters": [],
              "analysis": None, "params": {}}


def _apply(fields: dict, data: dict, where: str) -> dict:
    if not isinstance(data, dict):
        raise ScenarioError(f"{where}: expected an object, got "
                            f"{type(data).__name__}")
    unknown = set(data) - set(fields)
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) "
                            f"{', '.join(sorted(repr(k) for k in unknown))}")
    out = {}
    for key, default in fields.items():
        if key in data:
            out[key] = data[key]
        elif default is _REQUIRED:
            raise ScenarioError(f"{where}: missing required key {key!r}")
        else:
            out[key] = default
    return out


@dataclass(frozen=True)
class Scenario:
    """Validated scenario: canonical dict plus the compiled network."""

    name: str
    f_hz: float
    canonical: dict
    model: NetworkModel
    analysis: dict
    param_overrides: dict

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi * self.f_hz

    def canonical_json(self) -> str:
        return json.dumps(self.canonical, sort_keys=True, indent=2,
                          separators=(",", ": ")) + "\n"

    def build(self, rotating_sources: bool = False):
        return self.model.build(rotating_sources=rotating_sources)

    def base_params(self, sys):
        p = sys.params0
        if self.param_overrides:
            try:
                p = p.with_values(self.param_overrides)
            except KeyError as exc:
                raise ScenarioError(f"params: {exc.args[0]}") from None
        return p


def loads_scenario(text: str) -> Scenario:
    """Parse and validate a scenario from a JSON string."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"JSON parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from None
    top = _apply(TOP_FIELDS, raw, "scenario")
    base = _apply(BASE_FIELDS, top["base"] or {}, "base")
    omega0 = 2.0 * math.pi * float(base["f_hz"])

    canonical = {"name": top["name"], "base": base, "params": dict(top["params"])}

    buses = []
    canonical["buses"] = []
    for i, entry in enumerate(top["buses"]):
        b = _apply(BUS_FIELDS, entry, f"buses[{i}]")
        canonical["buses"].append(b)
        buses.append(Bus(id=str(b["id"]), b_sh=float(b["b_sh"]),
                         v_d=float(b["v_d"]), v_q=float(b["v_q"])))

    branches = []
    canonical["branches"] = []
    for i, entry in enumerate(top["branches"]):
        b = _apply(BRANCH_FIELDS, entry, f"branches[{i}]")
        canonical["branches"].append(b)
        branches.append(RlBranch(id=str(b["id"]), from_bus=str(b["from"]),
                                 to_bus=str(b["to"]), r=float(b["r"]),
                                 l=float(b["x"]) / omega0))

    sources = []
    canonical["sources"] = []
    for i, entry in enumerate(top["sources"]):
        s = _apply(SOURCE_FIELDS, entry, f"sources[{i}]")
        canonical["sources"].append(s)
        sources.append(GridSource(id=str(s["id"]), bus=str(s["bus"]),
                                  e_mag=float(s["e_mag"]),
                                  r_g=float(s["r_g"]),
                                  l_g=float(s["x_g"]) / omega0,
                                  rotating=bool(s["rotating"])))

    zips = []
    canonical["zip_loads"] = []
    for i, entry in enumerate(top["zip_loads"]):
        z = _apply(ZIP_FIELDS, entry, f"zip_loads[{i}]")
        canonical["zip_loads"].append(z)
        zips.append(ZipLoad(id=str(z["id"]), bus=str(z["bus"]),
                            p0=float(z["p0"]), q0=float(z["q0"]),
                            a_z=float(z["a_z"]), a_i=float(z["a_i"]),
                            a_p=float(z["a_p"]), b_z=float(z["b_z"]),
                            b_i=float(z["b_i"]), b_p=float(z["b_p"]),
                            v0=float(z["v0"])))

    machines = []
    canonical["machines"] = []
    for i, entry in enumerate(top["machines"]):
        m = _apply(MACHINE_FIELDS, entry, f"machines[{i}]")
        canonical["machines"].append(m)
        machines.append(InductionMachine(
            id=str(m["id"]), bus=str(m["bus"]), x_s=float(m["x_s"]),
            x_r=float(m["x_r"]), x_m=float(m["x_m"]), r_r=float(m["r_r"]),
            r_s=float(m["r_s"]), h=float(m["h"]), t_mech=float(m["t_mech"]),
            s0=float(m["s0"]), omega0=omega0))

    ltcs = []
    canonical["ltcs"] = []
    for i, entry in enumerate(top["ltcs"]):
        t = _apply(LTC_FIELDS, entry, f"ltcs[{i}]")
        canonical["ltcs"].append(t)
        ltcs.append(LtcTransformer(
            id=str(t["id"]), from_bus=str(t["from"]), to_bus=str(t["to"]),
            x_t=float(t["x_t"]), n0=float(t["n0"]), n_min=float(t["n_min"]),
            n_max=float(t["n_max"]), t_ltc=float(t["t_ltc"]),
            v_ref=float(t["v_ref"]), d_band=float(t["d_band"]),
            k_s=float(t["k_s"])))

    gfls, gfms = [], []
    canonical["converters"] = []
    for i, entry in enumerate(top["converters"]):
        kind = entry.get("kind", "gfl") if isinstance(entry, dict) else "gfl"
        if kind == "gfl":
            c = _apply(GFL_FIELDS, entry, f"converters[{i}]")
            val = _apply(VAL_FIELDS, c["val"] or {}, f"converters[{i}].val")
            c["val"] = val
            canonical["converters"].append(c)
            gfls.append(GflConverter(
                id=str(c["id"]), bus=str(c["bus"]),
                l_f=float(c["x_f"]) / omega0, r_f=float(c["r_f"]),
                kp_cc=float(c["kp_cc"]), ki_cc=float(c["ki_cc"]),
                kp_pll=float(c["kp_pll"]), ki_pll=float(c["ki_pll"]),
                p_ref=float(c["p_ref"]), kq=float(c["kq"]),
                v_ref=float(c["v_ref"]), q0=float(c["q0"]),
                i_max=float(c["i_max"]), limiter_k=float(c["limiter_k"]),
                k_aw=float(c["k_aw"]), tau_meas=float(c["tau_meas"]),
                val_mode=str(val["mode"]),
                val=ValGains(g_v=float(val["g_v"]), b_v=float(val["b_v"]),
                             v_nom=float(val["v_nom"]),
                             g_min=float(val["g_min"]),
                             g_max=float(val["g_max"]),
                             b_min=float(val["b_min"]),
                             b_max=float(val["b_max"]))))
        elif kind == "gfm_droop":
            c = _apply(GFM_FIELDS, entry, f"converters[{i}]")
            canonical["converters"].append(c)
            gfms.append(GfmDroop(
                id=str(c["id"]), bus=str(c["bus"]), m_p=float(c["m_p"]),
                n_q=float(c["n_q"]), v_set=float(c["v_set"]),
                p_set=float(c["p_set"]), q_set=float(c["q_set"]),
                r_v=float(c["r_v"]), l_v=float(c["x_v"]) / omega0,
                tau_p=float(c["tau_p"]), tau_q=float(c["tau_q"])))
        else:
            raise ScenarioError(f"converters[{i}]: unknown kind {kind!r}")

    analysis_raw = _apply(ANALYSIS_FIELDS, top["analysis"] or {}, "analysis")
    analysis = {}
    if analysis_raw["continuation"] is not None:
        analysis["continuation"] = _apply(
            CONTINUATION_FIELDS, analysis_raw["continuation"],
            "analysis.continuation")
    if analysis_raw["boundary2d"] is not None:
        analysis["boundary2d"] = _apply(
            BOUNDARY_FIELDS, analysis_raw["boundary2d"], "analysis.boundary2d")
    if analysis_raw["simulation"] is not None:
        sim = _apply(SIMULATION_FIELDS, analysis_raw["simulation"],
                     "analysis.simulation")
        sim["param_steps"] = dict(sim["param_steps"] or {})
        analysis["simulation"] = sim
    if analysis_raw["secondary"] is not None:
        sec = _apply(SECONDARY_FIELDS, analysis_raw["secondary"],
                     "analysis.secondary")
        sec["weights"] = dict(sec["weights"] or {})
        analysis["secondary"] = sec
    if analysis_raw["cf"] is not None:
        analysis["cf"] = _apply(CF_FIELDS, analysis_raw["cf"], "analysis.cf")
    canonical["analysis"] = analysis

    try:
        model = NetworkModel(
            buses=tuple(buses), branches=tuple(branches),
            sources=tuple(sources), zip_loads=tuple(zips),
            machines=tuple(machines), ltcs=tuple(ltcs), gfls=tuple(gfls),
            gfms=tuple(gfms), omega0=omega0)
    except (ModelValidationError, ValueError) as exc:
        raise ScenarioError(str(exc)) from None

    return Scenario(name=str(top["name"]), f_hz=float(base["f_hz"]),
                    canonical=canonical, model=model, analysis=analysis,
                    param_overrides={str(k): float(v)
                                     for k, v in top["params"].items()})


def load_scenario(path) -> Scenario:
    """Parse, validate and default a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from None
    return loads_scenario(text)
