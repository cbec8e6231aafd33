"""JSON experiment configuration: validation, defaults, overrides and echo-dump.

Validation collects every problem before failing, so a bad config is reported
in one pass and never partially accepted.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import Any

from .env import EnvSpec, LawKind, OffspringLaw
from .measure import TestFunction, constant, gaussian_bump, linear_cutoff, poly_cutoff, smooth_exp_decay, zero
from .particles import Mode, RunConfig
from .spde import Boundary, Scheme, SpdeGrid, SpdeParams

SUBCOMMANDS = ("simulate", "moments", "duality", "spde", "audit-env", "identity-check")

# blocks each subcommand needs
REQUIRED = {
    "simulate": ("env", "run"),
    "moments": ("env", "run"),
    "identity-check": ("env", "run"),
    "audit-env": (),
    "spde": ("spde",),
    "duality": ("spde", "duality"),
}

RUN_DEFAULTS = {"replicas": 1, "horizon": 0, "mode": "annealed", "initial": None, "tagged": False}
SPDE_DEFAULTS = {"x_min": -10.0, "x_max": 10.0, "h": 0.05, "tau": None, "boundary": "neumann",
                 "gamma": 1.0, "beta": 0.0, "t_end": 0.1, "scheme": "em", "dual_noise": None,
                 "replicas": 1, "initial": {"kind": "gauss", "center": 0.0, "var": 1.0, "scale": 1.0}}
DUALITY_DEFAULTS = {"phi": {"kind": "gauss", "center": 0.0, "var": 1.0, "scale": 0.5}, "t": None,
                    "source": "spde", "x0": None, "replicas": 1000, "budget": 0.02}
OUTPUT_DEFAULTS = {"snapshots": True, "steps": False, "ledger": True, "per_replica": False}

PHI_KINDS = {
    "const": ({"c": 1.0}, lambda p: constant(p["c"])),
    "zero": ({}, lambda p: zero()),
    "gauss": ({"center": 0.0, "var": 1.0, "scale": 1.0},
              lambda p: gaussian_bump(p["center"], p["var"], p["scale"])),
    "expdecay": ({"rate": 1.0}, lambda p: smooth_exp_decay(p["rate"])),
    "poly": ({"coeffs": [0.0, 1.0], "width": 2.0}, lambda p: poly_cutoff(tuple(p["coeffs"]), p["width"])),
    "linear": ({"width": 2.0}, lambda p: linear_cutoff(p["width"])),
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _num(errs, d, key, path, kind=float, lo=None, strict=False, required=False):
    if key not in d or d[key] is None:
        if required:
            errs.append(f"{path}.{key}: required")
        return None
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
        errs.append(f"{path}.{key}: expected {'integer' if kind is int else 'number'}, got {v!r}")
        return None
    v = kind(v)
    if isinstance(v, float) and not math.isfinite(v):
        errs.append(f"{path}.{key}: must be finite")
        return None
    if lo is not None and (v <= lo if strict else v < lo):
        errs.append(f"{path}.{key}: must be {'>' if strict else '>='} {lo}, got {v}")
        return None
    return v


def _choice(errs, d, key, path, options):
    v = d.get(key)
    if v not in options:
        errs.append(f"{path}.{key}: expected one of {sorted(options)}, got {v!r}")
        return None
    return v


def _phi_block(errs, raw, path) -> dict | None:
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        errs.append(f"{path}: expected an object or kind name")
        return None
    kind = raw.get("kind")
    if kind not in PHI_KINDS:
        errs.append(f"{path}.kind: expected one of {sorted(PHI_KINDS)}, got {kind!r}")
        return None
    defaults, _ = PHI_KINDS[kind]
    unknown = set(raw) - set(defaults) - {"kind"}
    if unknown:
        errs.append(f"{path}: unknown keys {sorted(unknown)}")
    out = {"kind": kind, **defaults, **{k: raw[k] for k in defaults if k in raw}}
    if kind == "gauss":
        _num(errs, out, "var", path, lo=0.0, strict=True)
    return out


def build_phi(block: dict) -> TestFunction:
    _, make = PHI_KINDS[block["kind"]]
    return make(block)


def _check_unknown(errs, block, allowed, path):
    extra = set(block) - set(allowed)
    if extra:
        errs.append(f"{path}: unknown keys {sorted(extra)}")


def _env_block(errs, raw) -> dict | None:
    if not isinstance(raw, dict):
        errs.append("env: expected an object")
        return None
    _check_unknown(errs, raw, {"N", "beta", "seed", "law", "gamma_target", "custom_laws"}, "env")
    N = _num(errs, raw, "N", "env", int, lo=1, required=True)
    beta = _num(errs, raw, "beta", "env", float, lo=0.0, required=True)
    seed = _num(errs, raw, "seed", "env", int, lo=0, required=True)
    law = raw.get("law", "example")
    if law not in ("example", "custom"):
        errs.append(f"env.law: expected 'example' or 'custom', got {law!r}")
    if N is not None and beta is not None and beta > N**0.25 * (1 + 1e-12):
        errs.append(f"env.beta: beta={beta:g} exceeds N^(1/4)={N**0.25:g}")
    out = {"N": N, "beta": beta, "seed": seed, "law": law,
           "gamma_target": raw.get("gamma_target", 1.0)}
    if law == "custom":
        laws = raw.get("custom_laws")
        if not isinstance(laws, dict) or set(laws) != {"-1", "1"}:
            errs.append("env.custom_laws: need pmf lists under keys '-1' and '1'")
        else:
            for key, pmf in laws.items():
                try:
                    OffspringLaw([(int(k), float(p)) for k, p in pmf])
                except (TypeError, ValueError) as exc:
                    errs.append(f"env.custom_laws.{key}: {exc}")
            out["custom_laws"] = {k: [[int(a), float(b)] for a, b in v] for k, v in sorted(laws.items())}
    return out


def _run_block(errs, raw, env) -> dict | None:
    if not isinstance(raw, dict):
        errs.append("run: expected an object")
        return None
    _check_unknown(errs, raw, set(RUN_DEFAULTS) | {"seed"}, "run")
    out = {**RUN_DEFAULTS, **raw}
    out["seed"] = _num(errs, raw, "seed", "run", int, lo=0, required=True)
    _num(errs, out, "replicas", "run", int, lo=1)
    _num(errs, out, "horizon", "run", int, lo=0)
    _choice(errs, out, "mode", "run", {m.value for m in Mode})
    if not isinstance(out["tagged"], bool):
        errs.append("run.tagged: expected a boolean")
    if out["initial"] is None:
        out["initial"] = [[0, env["N"]]] if env and env.get("N") else [[0, 1]]
    try:
        init = [[int(s), int(c)] for s, c in out["initial"]]
        if any(float(s) != int(s) or float(c) != int(c) for s, c in out["initial"]):
            raise ValueError
        if any(c < 0 for _, c in init):
            errs.append("run.initial: counts must be nonnegative")
        if any(s % 2 for s, c in init if c):
            errs.append("run.initial: initial sites must be even")
        out["initial"] = init
    except (TypeError, ValueError):
        errs.append("run.initial: expected a list of [site, count] integer pairs")
    return out


def _spde_block(errs, raw) -> dict | None:
    if not isinstance(raw, dict):
        errs.append("spde: expected an object")
        return None
    _check_unknown(errs, raw, set(SPDE_DEFAULTS) | {"noise_seed"}, "spde")
    out = {**SPDE_DEFAULTS, **raw}
    out["noise_seed"] = _num(errs, raw, "noise_seed", "spde", int, lo=0, required=True)
    for k in ("x_min", "x_max"):
        _num(errs, out, k, "spde")
    h = _num(errs, out, "h", "spde", lo=0.0, strict=True)
    if out["tau"] is None and h is not None:
        out["tau"] = 0.5 * h * h
    tau = _num(errs, out, "tau", "spde", lo=0.0, strict=True)
    for k in ("gamma", "beta", "t_end"):
        _num(errs, out, k, "spde", lo=0.0)
    _num(errs, out, "replicas", "spde", int, lo=1)
    if out["dual_noise"] is not None:
        _num(errs, out, "dual_noise", "spde", lo=0.0)
    _choice(errs, out, "boundary", "spde", {b.value for b in Boundary})
    _choice(errs, out, "scheme", "spde", {s.value for s in Scheme})
    if h is not None and tau is not None and tau > 0.5 * h * h * (1 + 1e-12):
        errs.append(f"spde.tau: unstable explicit scheme, tau={tau:g} > h^2/2={0.5 * h * h:g}")
    try:
        lo, hi = float(out["x_min"]), float(out["x_max"])
        if hi <= lo:
            errs.append("spde.x_max: must exceed x_min")
        elif h:
            cells = (hi - lo) / h
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                errs.append("spde.h: must divide x_max - x_min")
    except (TypeError, ValueError):
        pass
    out["initial"] = _phi_block(errs, out["initial"], "spde.initial")
    return out


def _duality_block(errs, raw) -> dict | None:
    if not isinstance(raw, dict):
        errs.append("duality: expected an object")
        return None
    _check_unknown(errs, raw, set(DUALITY_DEFAULTS), "duality")
    out = {**DUALITY_DEFAULTS, **raw}
    out["phi"] = _phi_block(errs, out["phi"], "duality.phi")
    if out["t"] is not None:
        _num(errs, out, "t", "duality", lo=0.0)
    _choice(errs, out, "source", "duality", {"spde", "particle"})
    if out["x0"] is None:
        # atoms for the particle system, a density for the SPDE
        out["x0"] = "dirac" if out["source"] == "particle" else {"kind": "gauss"}
    if out["x0"] != "dirac":
        out["x0"] = _phi_block(errs, out["x0"], "duality.x0")
    _num(errs, out, "replicas", "duality", int, lo=1)
    _num(errs, out, "budget", "duality", lo=0.0)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    subcommand: str
    data: dict[str, Any]  # normalized blocks, defaults filled

    def dump(self) -> str:
        return json.dumps({"subcommand": self.subcommand, **self.data}, indent=2, sort_keys=True) + "\n"

    @property
    def workers(self) -> int:
        return int(self.data.get("workers", 1))

    @property
    def outputs(self) -> dict[str, Any]:
        return self.data["outputs"]

    def env_spec(self) -> EnvSpec:
        e = self.data["env"]
        laws = None
        if e["law"] == "custom":
            laws = {int(k): OffspringLaw([tuple(kp) for kp in v]) for k, v in e["custom_laws"].items()}
        return EnvSpec(e["N"], e["beta"], e["seed"], LawKind(e["law"]), e["gamma_target"], laws)

    def run_config(self, **changes: Any) -> RunConfig:
        r = {**self.data["run"], **changes}
        return RunConfig(self.env_spec(), [tuple(p) for p in r["initial"]], r["horizon"], r["replicas"],
                         Mode(r["mode"]), r["seed"], r["tagged"], record_snapshots=self.outputs["snapshots"],
                         record_steps=self.outputs["steps"])

    def phis(self) -> list[TestFunction]:
        return [build_phi(b) for b in self.data["phis"]]

    def spde_grid(self) -> SpdeGrid:
        s = self.data["spde"]
        return SpdeGrid(s["x_min"], s["x_max"], s["h"], s["tau"], Boundary(s["boundary"]))

    def spde_params(self, t: float | None = None) -> SpdeParams:
        s = self.data["spde"]
        return SpdeParams(s["gamma"], s["beta"], s["t_end"] if t is None else t, s["noise_seed"],
                          s["dual_noise"], Scheme(s["scheme"]))


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """key.path=value pairs; values parse as JSON, else stay strings."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        key, val = item.split("=", 1)
        try:
            value = json.loads(val)
        except json.JSONDecodeError:
            value = val
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError([f"override {key}: {p} is not an object"])
            node = nxt
        node[parts[-1]] = value
    return out


def validate_config(raw: str | dict, subcommand: str | None = None) -> ExperimentConfig:
    """Parse and fully validate; raises ConfigError listing every problem."""
    errs: list[str] = []
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: invalid JSON ({exc})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be an object"])
    sub = subcommand or raw.get("subcommand")
    if sub not in SUBCOMMANDS:
        raise ConfigError([f"subcommand: expected one of {list(SUBCOMMANDS)}, got {sub!r}"])
    allowed = {"subcommand", "env", "run", "spde", "duality", "phis", "audit", "outputs", "workers"}
    _check_unknown(errs, raw, allowed, "config")
    for block in REQUIRED[sub]:
        if block not in raw:
            errs.append(f"{block}: block required for '{sub}'")

    data: dict[str, Any] = {}
    env = _env_block(errs, raw["env"]) if "env" in raw else None
    if env is not None:
        data["env"] = env
    if "run" in raw:
        data["run"] = _run_block(errs, raw["run"], env)
    if "spde" in raw:
        data["spde"] = _spde_block(errs, raw["spde"])
    if "duality" in raw:
        data["duality"] = _duality_block(errs, raw["duality"])
        if data["duality"] and data["duality"]["source"] == "particle":
            errs.extend(f"{b}: block required for a particle duality source"
                        for b in ("env", "run") if b not in raw)

    phis = raw.get("phis", [{"kind": "const", "c": 1.0}, {"kind": "gauss"}, {"kind": "linear"}])
    if not isinstance(phis, list) or not phis:
        errs.append("phis: expected a nonempty list")
        phis = []
    data["phis"] = [_phi_block(errs, p, f"phis[{i}]") for i, p in enumerate(phis)]

    audit = raw.get("audit", {})
    if not isinstance(audit, dict):
        errs.append("audit: expected an object")
        audit = {}
    _check_unknown(errs, audit, {"betas", "Ns"}, "audit")
    betas = audit.get("betas", [env["beta"]] if env and env.get("beta") is not None else [1.0])
    Ns = audit.get("Ns", [env["N"]] if env and env.get("N") else [16, 64, 256, 1024])
    if not all(isinstance(b, (int, float)) and not isinstance(b, bool) and b >= 0 for b in betas):
        errs.append("audit.betas: expected nonnegative numbers")
    if not all(isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in Ns):
        errs.append("audit.Ns: expected positive integers")
    elif sub == "audit-env":
        for b in betas:
            for n in Ns:
                if isinstance(b, (int, float)) and b > n**0.25 * (1 + 1e-12):
                    errs.append(f"audit: beta={b:g} exceeds N^(1/4) for N={n}")
    data["audit"] = {"betas": [float(b) for b in betas], "Ns": list(Ns)}

    outputs = raw.get("outputs", {})
    if not isinstance(outputs, dict):
        errs.append("outputs: expected an object")
        outputs = {}
    _check_unknown(errs, outputs, set(OUTPUT_DEFAULTS), "outputs")
    data["outputs"] = {**OUTPUT_DEFAULTS, **outputs}
    for k, v in data["outputs"].items():
        if not isinstance(v, bool):
            errs.append(f"outputs.{k}: expected a boolean")
    data["workers"] = raw.get("workers", 1)
    _num(errs, data, "workers", "config", int, lo=1)

    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(sub, data)
