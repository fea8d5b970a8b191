"""Run-configuration documents (YAML) and their validation.

Schema (units in brackets)::

    process:                      # required
      kind: gbm                   # only GBM is configurable from a file
      sigma: 0.2                  # [1/sqrt(year)] scalar or list
      mu: 0.0                     # [1/year]
      dim: 1
      x0: 1.0                     # [price units] scalar or list
    payoff:                       # required
      name: digital               # digital | cva_digital | constant
      strike: 1.0                 # [price units] digital payoffs
      value: 1.0                  # constant payoff level
      bound: 1.0                  # optional sup-norm, must dominate the payoff
    nonlinearity:                 # required, exactly one of
      preset: choiceu             # named polynomial
      coefficients: [[0, 0.1], [2, 0.5]]   # (degree, coefficient) pairs
      fit: {degrees: [0, 1, 2, 4], samples: 1001}
      exact: true                 # exact positive part (not for branching)
    branching:                    # required
      beta: 0.05                  # [1/year] normal-form intensity, or
      hazard: 0.05                # [1/year] with recovery, beta = hazard*(1-R)
      recovery: 0.4               # [fraction]
      T: 10                       # [years]
      mode: nonlinear             # nonlinear | mtm | timeweighted
      seed: 0
      paths: 2^16                 # integer or power of two "2^N"
      probabilities: optimal      # optimal | uniform | explicit list
      max_particles: 1000000
    engine:                       # optional
      name: branching             # branching | fd | nested_mc | bsde
      workers: 1
      sampler: batch              # batch | tree
      n_space: 801
      n_time: 400
      n_outer: 10000
      n_inner: 100
      n_times: 20
      theta: 0.5
      n_steps: 50
      basis_degree: 6
    output:                       # optional
      format: json                # json | csv
      path: null                  # stdout when null
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any

import yaml

from ..diffusion import ItoProcessSpec
from ..errors import BranchCvaError, ConfigError
from ..gwtree import Mode
from ..nonlinearity import (PAYOFFS, PRESETS, PayoffSpec, Polynomial, ProbabilityVector,
                            fit_positive_part)

_NUM = (int, float)
_POW2 = re.compile(r"^\s*2\s*\^\s*(\d+)\s*$")

SCHEMA: dict[str, dict[str, Any]] = {
    "process": {"kind": str, "sigma": (_NUM, list), "mu": (_NUM, list), "dim": int,
                "x0": (_NUM, list)},
    "payoff": {"name": str, "strike": _NUM, "value": _NUM, "bound": _NUM},
    "nonlinearity": {"preset": str, "coefficients": list, "fit": dict, "exact": bool},
    "branching": {"beta": _NUM, "hazard": _NUM, "recovery": _NUM, "T": _NUM, "mode": str,
                  "seed": int, "paths": (int, str), "probabilities": (str, list),
                  "max_particles": int},
    "engine": {"name": str, "workers": int, "sampler": str, "n_space": int, "n_time": int,
               "n_outer": int, "n_inner": int, "n_times": int, "theta": _NUM,
               "n_steps": int, "basis_degree": int},
    "output": {"format": str, "path": (str, type(None))},
}
REQUIRED = ("process", "payoff", "nonlinearity", "branching")
ENGINES = ("branching", "fd", "nested_mc", "bsde")


@dataclass(frozen=True)
class RunConfig:
    spec: ItoProcessSpec
    x0: float | tuple[float, ...]
    payoff: PayoffSpec = field(compare=False)
    nonlinearity: Polynomial | None
    beta: float
    recovery: float
    T: float
    mode: Mode
    seed: int = 0
    n_paths: int = 1 << 16
    probabilities: str | tuple[float, ...] = "optimal"
    max_particles: int = 1_000_000
    hazard: float | None = None
    engine: dict[str, Any] = field(default_factory=dict)
    output: dict[str, Any] = field(default_factory=dict)

    @property
    def engine_name(self) -> str:
        return self.engine.get("name", "branching")

    def probs_for(self, target: Polynomial) -> ProbabilityVector | None:
        """Explicit or uniform probabilities; ``None`` means optimal."""
        if self.probabilities == "optimal":
            return None
        if self.probabilities == "uniform":
            return ProbabilityVector.uniform_on(target)
        return ProbabilityVector(tuple(self.probabilities))


def parse_paths(value) -> int:
    """``65536`` or ``"2^16"``."""
    if isinstance(value, bool):
        raise ValueError("path count must be an integer")
    if isinstance(value, int):
        n = value
    else:
        m = _POW2.match(str(value))
        if m:
            n = 1 << int(m.group(1))
        else:
            try:
                n = int(str(value))
            except ValueError:
                raise ValueError(f"bad path count {value!r}; use an integer or 2^N") from None
    if n < 2:
        raise ValueError("path count must be at least 2")
    return n


def _line(node) -> int:
    return node.start_mark.line + 1


def _type_ok(value, expected) -> bool:
    kinds = expected if isinstance(expected, tuple) else (expected,)
    flat = []
    for k in kinds:
        flat.extend(k if isinstance(k, tuple) else (k,))
    if isinstance(value, bool) and bool not in flat:
        return False
    return isinstance(value, tuple(flat))


def _type_name(expected) -> str:
    kinds = expected if isinstance(expected, tuple) else (expected,)
    names = []
    for k in kinds:
        for t in (k if isinstance(k, tuple) else (k,)):
            names.append("null" if t is type(None) else t.__name__)
    return " or ".join(dict.fromkeys(names))


def _validate(doc_node) -> list[str]:
    """Schema errors with line references, collected over the whole document."""
    errors: list[str] = []
    if doc_node is None:
        return [f"missing required section '{s}'" for s in REQUIRED]
    if not isinstance(doc_node, yaml.MappingNode):
        return [f"line {_line(doc_node)}: top level must be a mapping of sections"]
    seen = set()
    for knode, vnode in doc_node.value:
        key = knode.value
        if key not in SCHEMA:
            errors.append(f"line {_line(knode)}: unknown section '{key}'")
            continue
        if key in seen:
            errors.append(f"line {_line(knode)}: duplicate section '{key}'")
        seen.add(key)
        if not isinstance(vnode, yaml.MappingNode):
            errors.append(f"line {_line(vnode)}: section '{key}' must be a mapping")
            continue
        fields_seen = set()
        for fk, fv in vnode.value:
            name = fk.value
            if name not in SCHEMA[key]:
                errors.append(f"line {_line(fk)}: unknown key '{key}.{name}'")
                continue
            if name in fields_seen:
                errors.append(f"line {_line(fk)}: duplicate key '{key}.{name}'")
            fields_seen.add(name)
            value = yaml.safe_load(yaml.serialize(fv))
            if not _type_ok(value, SCHEMA[key][name]):
                errors.append(f"line {_line(fv)}: '{key}.{name}' must be "
                              f"{_type_name(SCHEMA[key][name])}, got {value!r}")
    for s in REQUIRED:
        if s not in seen:
            errors.append(f"missing required section '{s}'")
    return errors


def _lines_of(doc_node) -> dict[tuple[str, ...], int]:
    out: dict[tuple[str, ...], int] = {}
    if isinstance(doc_node, yaml.MappingNode):
        for k, v in doc_node.value:
            out[(k.value,)] = _line(k)
            if isinstance(v, yaml.MappingNode):
                for fk, _ in v.value:
                    out[(k.value, fk.value)] = _line(fk)
    return out


def parse_config(document: str) -> RunConfig:
    """Validate ``document`` and build a :class:`RunConfig`.

    Raises :class:`ConfigError` listing every violation found.
    """
    try:
        node = yaml.compose(document)
    except yaml.YAMLError as exc:
        raise ConfigError([f"malformed document: {exc}"]) from None
    errors = _validate(node)
    if errors:
        raise ConfigError(errors)
    data = yaml.safe_load(document)
    lines = _lines_of(node)
    errs: list[str] = []

    def where(*path) -> str:
        ln = lines.get(tuple(path)) or lines.get(tuple(path[:1]))
        return f"line {ln}: " if ln else ""

    def positive(sec, key, value, strict=True):
        bad = not math.isfinite(value) or (value <= 0 if strict else value < 0)
        if bad:
            errs.append(f"{where(sec, key)}'{sec}.{key}' must be "
                        f"{'positive' if strict else 'non-negative'}, got {value!r}")

    proc = data["process"]
    if proc.get("kind", "gbm") != "gbm":
        errs.append(f"{where('process', 'kind')}only kind 'gbm' is supported in config files")
    spec = None
    try:
        spec = ItoProcessSpec.gbm(proc.get("sigma", 0.2), proc.get("mu", 0.0), proc.get("dim"))
    except (BranchCvaError, ValueError) as exc:
        errs.append(f"{where('process')}{exc}")
    x0 = proc.get("x0", 1.0)
    x0 = tuple(float(v) for v in x0) if isinstance(x0, list) else float(x0)
    if any(v <= 0 for v in (x0 if isinstance(x0, tuple) else (x0,))):
        errs.append(f"{where('process', 'x0')}'process.x0' must be positive")

    pay = data["payoff"]
    payoff = None
    name = pay.get("name")
    if name is None:
        errs.append(f"{where('payoff')}'payoff.name' is required")
    elif name not in PAYOFFS:
        errs.append(f"{where('payoff', 'name')}unknown payoff '{name}' "
                    f"(choose from {', '.join(PAYOFFS)})")
    elif name == "constant":
        if "value" not in pay:
            errs.append(f"{where('payoff')}constant payoff needs 'value'")
        else:
            payoff = PAYOFFS[name](float(pay["value"]))
    else:
        payoff = PAYOFFS[name](float(pay.get("strike", 1.0)))
    if payoff is not None and "bound" in pay:
        b = float(pay["bound"])
        if b < payoff.sup_norm:
            errs.append(f"{where('payoff', 'bound')}bound {b} is below the payoff sup-norm "
                        f"{payoff.sup_norm}")
        else:
            payoff = PayoffSpec(payoff.fn, b, payoff.tag)

    nl = data["nonlinearity"]
    poly = None
    chosen = [k for k in ("preset", "coefficients", "fit", "exact") if k in nl]
    if len(chosen) != 1:
        errs.append(f"{where('nonlinearity')}give exactly one of preset, coefficients, fit, exact")
    elif "preset" in nl:
        if nl["preset"] not in PRESETS:
            errs.append(f"{where('nonlinearity', 'preset')}unknown preset '{nl['preset']}' "
                        f"(choose from {', '.join(PRESETS)})")
        else:
            poly = PRESETS[nl["preset"]]
    elif "coefficients" in nl:
        try:
            poly = Polynomial.from_pairs(tuple(p) for p in nl["coefficients"])
        except (BranchCvaError, ValueError, TypeError) as exc:
            errs.append(f"{where('nonlinearity', 'coefficients')}{exc}")
    elif "fit" in nl:
        fit = nl["fit"]
        unknown = set(fit) - {"degrees", "samples"}
        if unknown:
            errs.append(f"{where('nonlinearity', 'fit')}unknown fit keys {sorted(unknown)}")
        else:
            try:
                poly = fit_positive_part(fit.get("degrees", (0, 1, 2, 4)),
                                         int(fit.get("samples", 1001))).poly
            except (BranchCvaError, ValueError, TypeError) as exc:
                errs.append(f"{where('nonlinearity', 'fit')}{exc}")
    elif nl["exact"] is not True:
        errs.append(f"{where('nonlinearity', 'exact')}'exact' may only be true")

    br = data["branching"]
    mode = None
    try:
        mode = Mode(br.get("mode", "nonlinear"))
    except ValueError:
        errs.append(f"{where('branching', 'mode')}unknown mode '{br.get('mode')}' "
                    f"(choose from {', '.join(m.value for m in Mode)})")
    R = float(br.get("recovery", 0.0))
    if not 0.0 <= R <= 1.0:
        errs.append(f"{where('branching', 'recovery')}'branching.recovery' must lie in [0, 1]")
    hazard = None
    beta = 0.0
    if "beta" in br and "hazard" in br:
        errs.append(f"{where('branching', 'hazard')}give either beta or hazard, not both")
    elif "hazard" in br:
        hazard = float(br["hazard"])
        positive("branching", "hazard", hazard, strict=False)
        beta = hazard * (1.0 - R)
    elif "beta" in br:
        beta = float(br["beta"])
        positive("branching", "beta", beta, strict=False)
    else:
        errs.append(f"{where('branching')}one of 'beta' or 'hazard' is required")
    if "T" not in br:
        errs.append(f"{where('branching')}'branching.T' is required")
        T = 0.0
    else:
        T = float(br["T"])
        positive("branching", "T", T, strict=False)
    n_paths = 1 << 16
    if "paths" in br:
        try:
            n_paths = parse_paths(br["paths"])
        except ValueError as exc:
            errs.append(f"{where('branching', 'paths')}{exc}")
    probs = br.get("probabilities", "optimal")
    if isinstance(probs, str) and probs not in ("optimal", "uniform"):
        errs.append(f"{where('branching', 'probabilities')}probabilities must be 'optimal', "
                    f"'uniform' or a list")
    elif isinstance(probs, list):
        try:
            probs = tuple(ProbabilityVector(tuple(float(p) for p in probs)).probs)
        except (BranchCvaError, ValueError, TypeError) as exc:
            errs.append(f"{where('branching', 'probabilities')}{exc}")
    seed = int(br.get("seed", 0))
    if seed < 0:
        errs.append(f"{where('branching', 'seed')}'branching.seed' must be non-negative")
    max_particles = int(br.get("max_particles", 1_000_000))
    if max_particles < 1:
        errs.append(f"{where('branching', 'max_particles')}must be positive")
    if mode is Mode.MTM and R >= 1.0:
        errs.append(f"{where('branching', 'recovery')}mtm mode needs recovery < 1")

    eng = dict(data.get("engine") or {})
    if eng.get("name", "branching") not in ENGINES:
        errs.append(f"{where('engine', 'name')}unknown engine '{eng.get('name')}' "
                    f"(choose from {', '.join(ENGINES)})")
    if eng.get("sampler", "batch") not in ("batch", "tree"):
        errs.append(f"{where('engine', 'sampler')}sampler must be 'batch' or 'tree'")
    for key in ("workers", "n_space", "n_time", "n_outer", "n_inner", "n_times", "n_steps"):
        if key in eng and eng[key] < 1:
            errs.append(f"{where('engine', key)}'engine.{key}' must be positive")
    if eng.get("name") == "branching" and "nonlinearity" in data and poly is None \
            and "exact" in nl:
        errs.append(f"{where('nonlinearity', 'exact')}the branching engine needs a polynomial")

    out = dict(data.get("output") or {})
    if out.get("format", "json") not in ("json", "csv"):
        errs.append(f"{where('output', 'format')}format must be 'json' or 'csv'")

    if errs:
        raise ConfigError(errs)
    return RunConfig(spec=spec, x0=x0, payoff=payoff, nonlinearity=poly, beta=beta, recovery=R,
                     T=T, mode=mode, seed=seed, n_paths=n_paths, probabilities=probs,
                     max_particles=max_particles, hazard=hazard, engine=eng, output=out)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
