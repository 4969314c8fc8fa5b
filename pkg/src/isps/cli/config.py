"""Run configuration: TOML file, JSON-schema validation and typed views.

Every relative path in the file is resolved against the file's directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from ..sfsys import (MAGLEV_DOMAIN, TWOLINK_DOMAIN, Box, MaglevParams, StrictFeedbackSystem, TwoLinkParams,
                     as_strict_feedback)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        lines = "\n".join(f"  {p}: {m}" for p, m in errors)
        super().__init__(f"invalid configuration:\n{lines}")


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_count = {"type": "integer", "minimum": 1}
_kernel = {
    "type": "object",
    "properties": {"signal_std": _pos, "length_scales": {"type": "array", "items": _pos, "minItems": 1}},
    "required": ["signal_std", "length_scales"],
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "plant", "data", "gp", "bounds", "controller", "simulation", "scenario"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string", "minLength": 1},
        "plant": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["maglev", "twolink"]},
                "maglev": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"M": _pos, "g": _pos, "R": _pos, "alpha": _pos},
                },
                "twolink": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"m": _pos, "l": _pos, "a_g": _pos},
                },
            },
        },
        "domain": {
            "type": "object",
            "required": ["lower", "upper"],
            "additionalProperties": False,
            "properties": {"lower": _vec, "upper": _vec},
        },
        "data": {
            "type": "object",
            "required": ["samples", "noise_std"],
            "additionalProperties": False,
            "properties": {
                "samples": _count,
                "noise_std": _pos,
                "derivative_mode": {"enum": ["exact", "finite-difference"]},
                "sampling_time": _pos,
            },
        },
        "gp": {
            "type": "object",
            "required": ["subsystem"],
            "additionalProperties": False,
            "properties": {
                "rho_grid": {"type": "integer", "minimum": 2},
                "subsystem": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["mode", "kernels"],
                        "additionalProperties": False,
                        "properties": {
                            "mode": {"enum": ["fit", "fixed"]},
                            "kernels": {"type": "array", "items": _kernel, "minItems": 1},
                            "log_bounds": {
                                "type": "array", "minItems": 2, "maxItems": 2,
                                "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                            },
                            "n_starts": _count,
                        },
                    },
                },
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 1000},
                "confidence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "probabilistic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "target_probability": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "thresholds": {"type": "array", "items": {"type": "number", "minimum": 0}},
                        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "gamma_info": {"type": "array", "items": {"type": "number", "minimum": 0}},
                        "reference": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["subsystem", "threshold"],
                                "additionalProperties": False,
                                "properties": {"subsystem": _count, "threshold": _pos,
                                               "label": {"type": "string"}},
                            },
                        },
                    },
                },
                "deterministic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "holder": {"oneOf": [{"const": "estimate"},
                                             {"type": "array", "items": {"type": "number", "minimum": 0}}]},
                        "holder_samples": {"type": "integer", "minimum": 100},
                        "holder_safety": {"type": "number", "minimum": 1},
                    },
                },
            },
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "margin": _pos,
                "fixed_gains": {"type": "array", "items": _pos},
                "grid_per_dim": {"type": "integer", "minimum": 2},
                "safety": {"type": "number", "minimum": 1},
                "derivative_mode": {"enum": ["analytic", "finite-difference"]},
                "certificate": {"enum": ["probabilistic", "deterministic"]},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_end": _pos,
                "dt": _pos,
                "method": {"enum": ["rk4", "euler"]},
                "clamp_to_domain": {"type": "boolean"},
            },
        },
        "scenario": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "x0", "x0_prime", "u_hat"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_-]+$"},
                    "label": {"type": "string"},
                    "x0": _vec,
                    "x0_prime": _vec,
                    "u_hat": {"type": "array", "minItems": 1},
                    "u_hat_prime": {"type": "array", "minItems": 1},
                    "u_times": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                    "allow_outside": {"type": "boolean"},
                },
            },
        },
    },
}


def _path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (f".{p}" if parts else str(p)))
    return "".join(parts) or "<root>"


@dataclass(frozen=True)
class SubsystemGp:
    mode: str
    kernels: tuple[dict, ...]
    log_bounds: tuple[tuple[float, float], tuple[float, float]] = ((-9.0, 14.0), (-7.0, 16.0))
    n_starts: int = 3


@dataclass(frozen=True)
class Scenario:
    name: str
    x0: tuple[float, ...]
    x0_prime: tuple[float, ...]
    u_times: tuple[float, ...]
    u_hat: tuple[tuple[float, ...], ...]
    u_hat_prime: tuple[tuple[float, ...], ...]
    allow_outside: bool = False
    label: str = ""


@dataclass(frozen=True)
class RunConfig:
    raw: dict = field(repr=False)
    base_dir: Path
    seed: int
    out: Path
    system: StrictFeedbackSystem = field(repr=False)
    subsystems: tuple[SubsystemGp, ...]
    scenarios: tuple[Scenario, ...]

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def hash_of(self, *names: str) -> str:
        """Stable digest of the named sections (``seed`` included when named)."""
        payload = {n: (self.seed if n == "seed" else self.raw.get(n)) for n in names}
        return digest(payload)

    @property
    def config_hash(self) -> str:
        return digest({k: v for k, v in self.raw.items() if k != "out"} | {"seed": self.seed})


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _as_rows(u, n: int, where: str, errors: list) -> tuple[tuple[float, ...], ...]:
    arr = u if u and isinstance(u[0], list) else [u]
    rows = []
    for k, r in enumerate(arr):
        if not isinstance(r, list) or len(r) != n or not all(isinstance(v, (int, float)) for v in r):
            errors.append((f"{where}[{k}]" if len(arr) > 1 else where, f"expected {n} numbers"))
            return ()
        rows.append(tuple(float(v) for v in r))
    return tuple(rows)


def _build_system(raw: dict, errors: list) -> StrictFeedbackSystem | None:
    plant = raw["plant"]
    kind = plant["kind"]
    default = MAGLEV_DOMAIN if kind == "maglev" else TWOLINK_DOMAIN
    dom = raw.get("domain")
    if dom is not None:
        lo, hi = dom["lower"], dom["upper"]
        if len(lo) != default.dim or len(hi) != default.dim:
            errors.append(("domain", f"{kind} needs {default.dim} bounds per side"))
            return None
        bad = [k for k, (a, b) in enumerate(zip(lo, hi)) if not a < b]
        if bad:
            errors.append((f"domain.lower[{bad[0]}]", "empty domain: lower must be < upper"))
            return None
        box = Box(tuple(lo), tuple(hi))
    else:
        box = default
    try:
        params = MaglevParams(**plant.get("maglev", {})) if kind == "maglev" else \
            TwoLinkParams(**plant.get("twolink", {}))
        system = as_strict_feedback(kind, params, box)
        system.check_input_gain()
    except (ValueError, ArithmeticError) as exc:
        errors.append((f"plant.{kind}", str(exc)))
        return None
    return system


def validate(raw: dict, base_dir: Path, seed_override: int | None = None,
             out_override: str | Path | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errs:
        raise ConfigError([(_path(e), e.message) for e in errs])
    errors: list[tuple[str, str]] = []
    system = _build_system(raw, errors)
    if errors:
        raise ConfigError(errors)
    h, n, d = system.h, system.n, system.dim

    subs = raw["gp"]["subsystem"]
    if len(subs) != h:
        errors.append(("gp.subsystem", f"need {h} entries, got {len(subs)}"))
    parsed = []
    for i, s in enumerate(subs[:h], start=1):
        where = f"gp.subsystem[{i - 1}]"
        ks = s["kernels"]
        if len(ks) not in (1, n):
            errors.append((f"{where}.kernels", f"give 1 kernel or one per output ({n})"))
        for k, kp in enumerate(ks):
            if len(kp["length_scales"]) != i * n:
                errors.append((f"{where}.kernels[{k}].length_scales", f"need {i * n} length scales"))
        lb = s.get("log_bounds", [[-9.0, 14.0], [-7.0, 16.0]])
        if any(not a < b for a, b in lb):
            errors.append((f"{where}.log_bounds", "each pair must be increasing"))
        parsed.append(SubsystemGp(s["mode"], tuple(ks), (tuple(lb[0]), tuple(lb[1])), s.get("n_starts", 3)))

    sim = raw["simulation"]
    t_end, dt = sim.get("t_end", 10.0), sim.get("dt", 1e-3)
    if not dt < t_end:
        errors.append(("simulation.dt", f"dt must be smaller than t_end ({t_end})"))

    prob = raw["bounds"].get("probabilistic")
    if prob is not None:
        modes = [k for k in ("target_probability", "thresholds", "epsilon") if k in prob]
        if len(modes) != 1:
            errors.append(("bounds.probabilistic", "set exactly one of target_probability, thresholds, epsilon"))
        if "thresholds" in prob and len(prob["thresholds"]) != h:
            errors.append(("bounds.probabilistic.thresholds", f"need {h} entries"))
        if "epsilon" in prob and len(prob.get("gamma_info", [])) != h:
            errors.append(("bounds.probabilistic.gamma_info", f"need {h} entries alongside epsilon"))
        for k, ref in enumerate(prob.get("reference", [])):
            if ref["subsystem"] > h:
                errors.append((f"bounds.probabilistic.reference[{k}].subsystem", f"must be <= {h}"))
    det = raw["bounds"].get("deterministic")
    if det is not None and isinstance(det.get("holder"), list) and len(det["holder"]) != h:
        errors.append(("bounds.deterministic.holder", f"need {h} entries"))
    if prob is None and det is None:
        errors.append(("bounds", "configure a probabilistic or a deterministic bound"))
    cert_kind = raw["controller"].get("certificate", "probabilistic" if prob is not None else "deterministic")
    if raw["bounds"].get(cert_kind) is None:
        errors.append(("controller.certificate", f"no {cert_kind} bound is configured"))
    if len(raw["controller"].get("fixed_gains", [])) > h:
        errors.append(("controller.fixed_gains", f"at most {h} entries"))

    scenarios = []
    names = set()
    for k, sc in enumerate(raw["scenario"]):
        where = f"scenario[{k}]"
        if sc["name"] in names:
            errors.append((f"{where}.name", f"duplicate scenario name {sc['name']!r}"))
        names.add(sc["name"])
        for key in ("x0", "x0_prime"):
            if len(sc[key]) != d:
                errors.append((f"{where}.{key}", f"need {d} entries"))
            elif not sc.get("allow_outside", False) and not system.domain.contains(sc[key]):
                errors.append((f"{where}.{key}", "initial state outside the domain (set allow_outside)"))
        u = _as_rows(sc["u_hat"], n, f"{where}.u_hat", errors)
        up = _as_rows(sc.get("u_hat_prime", sc["u_hat"]), n, f"{where}.u_hat_prime", errors)
        times = tuple(float(t) for t in sc.get("u_times", [0.0]))
        if u and up and not (len(times) == len(u) == len(up)):
            errors.append((f"{where}.u_times", "need one breakpoint per u_hat row"))
        if any(b <= a for a, b in zip(times, times[1:])):
            errors.append((f"{where}.u_times", "breakpoints must increase"))
        scenarios.append(Scenario(sc["name"], tuple(sc["x0"]), tuple(sc["x0_prime"]), times, u, up,
                                  sc.get("allow_outside", False), sc.get("label", "")))
    if errors:
        raise ConfigError(errors)

    seed = int(seed_override if seed_override is not None else raw.get("seed", 0))
    out = Path(out_override) if out_override is not None else base_dir / raw.get("out", "run")
    if not out.is_absolute():
        out = (Path.cwd() / out) if out_override is not None else out
    return RunConfig(raw, base_dir, seed, out.resolve(), system, tuple(parsed), tuple(scenarios))


def load_config(path, seed: int | None = None, out: str | Path | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([("<file>", f"config file {path} not found")]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("<file>", f"TOML syntax error: {exc}")]) from None
    return validate(raw, path.resolve().parent, seed, out)
