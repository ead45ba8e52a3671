"""Run configuration: a YAML problem/options file with line-aware validation.

Layout (every section optional unless noted)::

    preset: cosine1d            # or give `linear` for an inline problem
    params: {r: 1.0e-4}         # extra preset parameters
    linear: {A: .., B: .., F: .., Q: .., R: ..}
    init: {mu_0: .., Sigma_0: ..}
    constraint: {mu_T: .., Sigma_T: ..}
    T: 1.0
    dt: 0.01
    kappa: 0
    seed: 0
    solver: {eta1, eta2, tol, max_outer, samples_coarse, samples_fine,
             coarse_threshold, estimator, sddp_max_iter, sddp_tol_k}
    outputs: [nominal, gains, samples, moments, trace]
    sample_paths: 20

Scalars given for matrices mean multiples of the identity.  A sample
count of 0 selects the Gaussian-closure moment estimator.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import yaml

from .covcon import CovControlOptions
from .errors import ConfigError
from .sddp.solver import SDDPOptions
from .systems import PRESETS, ProblemPreset, _linear_preset, _mat, build_preset, horizon_steps

OUTPUTS = ("nominal", "gains", "samples", "moments", "trace")

SOLVER_DEFAULTS = {
    "eta1": None,
    "eta2": None,
    "tol": 0.01,
    "max_outer": 300,
    "samples_coarse": 80,
    "samples_fine": 800,
    "coarse_threshold": 0.1,
    "estimator": "mc",
    "sddp_max_iter": 200,
    "sddp_tol_k": 1e-6,
}

_TOP_KEYS = {
    "preset", "params", "linear", "init", "constraint", "T", "dt", "kappa",
    "seed", "solver", "outputs", "sample_paths",
}
_PROMOTED = ("T", "dt", "kappa")


class ConfigValidationError(ConfigError):
    """Several schema violations at once; ``errors`` lists each one."""

    def __init__(self, errors: list[ConfigError]):
        self.errors = errors
        first = errors[0]
        super().__init__(first.bare_message, first.field, first.line)

    def report(self) -> str:
        return "\n".join(str(e) for e in self.errors)


@dataclass
class RunConfig:
    """Validated, normalized configuration for one run."""

    preset: Optional[str] = "cosine1d"
    params: dict = field(default_factory=dict)
    linear: Optional[dict] = None
    init: Optional[dict] = None
    constraint: Optional[dict] = None
    T: Optional[float] = None
    dt: Optional[float] = None
    kappa: Optional[int] = None
    seed: int = 0
    solver: dict = field(default_factory=dict)
    outputs: list = field(default_factory=lambda: list(OUTPUTS))
    sample_paths: int = 20

    def __post_init__(self):
        self.solver = resolved_solver(self.solver)

    # -- construction -----------------------------------------------------

    def build_problem(self) -> ProblemPreset:
        overrides = {k: getattr(self, k) for k in _PROMOTED if getattr(self, k) is not None}
        if self.linear is not None:
            lin = self.linear
            n = np.atleast_2d(np.asarray(lin["A"], dtype=float)).shape[0]
            m = np.asarray(lin["B"], dtype=float).reshape(n, -1).shape[1]
            T = overrides.get("T", 1.0)
            dt = overrides.get("dt", 0.01)
            F = np.asarray(lin.get("F", 0.0), dtype=float)
            if F.ndim == 0:
                F = float(F) * np.eye(n)
            return _linear_preset(
                "linear", lin["A"], lin["B"], F,
                _mat(lin.get("Q", 0.0), n), _mat(lin.get("R", 1.0), m),
                self.init["mu_0"], self.init.get("Sigma_0", 0.0),
                self.constraint["mu_T"], self.constraint["Sigma_T"],
                dt, T, overrides.get("kappa", 0), self.seed, self.to_dict(),
            )
        params = dict(self.params)
        params.update(overrides)
        for section in (self.init, self.constraint):
            if section:
                params.update(section)
        return build_preset(self.preset, params)

    def options(self, problem: ProblemPreset | None = None) -> CovControlOptions:
        problem = problem or self.build_problem()
        s = resolved_solver(self.solver)
        if s["samples_coarse"] == 0 or s["samples_fine"] == 0:
            # no sampling budget: moments come from the Gaussian closure
            s["estimator"] = "gaussian"
        return problem.options(
            eta1=problem.eta1 if s["eta1"] is None else s["eta1"],
            eta2=problem.eta2 if s["eta2"] is None else s["eta2"],
            tol_constraint=s["tol"],
            max_outer=s["max_outer"],
            samples_coarse=s["samples_coarse"],
            samples_fine=s["samples_fine"],
            coarse_threshold=s["coarse_threshold"],
            estimator=s["estimator"],
            seed=self.seed,
            sddp=SDDPOptions(max_iter=s["sddp_max_iter"], tol_k=s["sddp_tol_k"]),
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.linear is not None:
            out["linear"] = copy.deepcopy(self.linear)
        else:
            out["preset"] = self.preset
            if self.params:
                out["params"] = copy.deepcopy(self.params)
        for key in ("init", "constraint"):
            if getattr(self, key):
                out[key] = copy.deepcopy(getattr(self, key))
        for key in _PROMOTED:
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        out["seed"] = self.seed
        out["solver"] = resolved_solver(self.solver)
        out["outputs"] = list(self.outputs)
        out["sample_paths"] = self.sample_paths
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def resolved(self) -> dict:
        """``to_dict`` plus the horizon the problem actually uses."""
        problem = self.build_problem()
        out = self.to_dict()
        out["resolved"] = {
            "problem": problem.name, "T": problem.T, "dt": problem.dt, "N": problem.N,
            "kappa": problem.kappa, "state_dim": problem.model.state_dim,
            "control_dim": problem.model.control_dim,
        }
        return out

    @classmethod
    def from_preset(cls, name: str, **kw) -> "RunConfig":
        cfg = cls(preset=name, **kw)
        errors = validate_dict(cfg.to_dict(), {})
        if errors:
            raise ConfigValidationError(errors)
        return cfg


def resolved_solver(solver: dict) -> dict:
    out = dict(SOLVER_DEFAULTS)
    out.update(solver or {})
    return out


# -- parsing -------------------------------------------------------------------


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _line_map(node, path=(), out=None) -> dict:
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (str(k.value),)
            out[".".join(p)] = k.start_mark.line + 1
            _line_map(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[".".join(path + (str(i),))] = v.start_mark.line + 1
            _line_map(v, path + (str(i),), out)
    return out


def parse_config_text(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = None if mark is None else mark.line + 1
        raise ConfigError(f"malformed YAML: {exc.problem}", None, line) from None
    if data is None:
        data = {}
    lines = _line_map(node) if node is not None else {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", None, 1)
    errors = validate_dict(data, lines)
    if errors:
        raise ConfigValidationError(errors)
    return _from_dict(data)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _from_dict(data: dict) -> RunConfig:
    return RunConfig(
        preset=None if "linear" in data else data.get("preset", "cosine1d"),
        params=dict(data.get("params") or {}),
        linear=data.get("linear"),
        init=data.get("init"),
        constraint=data.get("constraint"),
        T=None if data.get("T") is None else float(data["T"]),
        dt=None if data.get("dt") is None else float(data["dt"]),
        kappa=data.get("kappa"),
        seed=int(data.get("seed", 0)),
        solver={k: v for k, v in (data.get("solver") or {}).items()},
        outputs=list(data.get("outputs", OUTPUTS)),
        sample_paths=int(data.get("sample_paths", 20)),
    )


# -- validation ------------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def validate_dict(data: dict, lines: dict) -> list[ConfigError]:
    """Every schema violation in ``data``; an empty list means valid."""
    errors: list[ConfigError] = []

    def err(msg, fld):
        line = lines.get(fld)
        parent = fld
        while line is None and "." in parent:
            parent = parent.rsplit(".", 1)[0]
            line = lines.get(parent)
        errors.append(ConfigError(msg, fld, line))

    for key in data:
        if key not in _TOP_KEYS:
            err(f"unknown key '{key}'", str(key))

    inline = "linear" in data
    if inline and "preset" in data:
        err("give either preset or linear, not both", "linear")
    if not inline:
        name = data.get("preset", "cosine1d")
        if name not in PRESETS:
            err(f"unknown preset '{name}'; choose from {', '.join(sorted(PRESETS))}", "preset")
        if not isinstance(data.get("params") or {}, dict):
            err("params must be a mapping", "params")

    for key in ("T", "dt"):
        if key in data and data[key] is not None:
            if not _is_number(data[key]):
                err(f"{key} must be a number", key)
            elif data[key] <= 0:
                err(f"{key} must be positive", key)
    if "kappa" in data and data["kappa"] not in (0, 1):
        err("kappa must be 0 or 1", "kappa")
    if "seed" in data and (not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0):
        err("seed must be a non-negative integer", "seed")
    if "sample_paths" in data and (not isinstance(data["sample_paths"], int) or data["sample_paths"] < 0):
        err("sample_paths must be a non-negative integer", "sample_paths")

    outs = data.get("outputs", list(OUTPUTS))
    if not isinstance(outs, list):
        err("outputs must be a list", "outputs")
    else:
        for i, o in enumerate(outs):
            if o not in OUTPUTS:
                err(f"unknown output '{o}'; choose from {', '.join(OUTPUTS)}", f"outputs.{i}")

    _validate_sections(data, inline, err)
    _validate_solver(data.get("solver"), err)
    if not errors:
        # dimension and feasibility checks need a problem instance
        try:
            cfg = _from_dict(data)
            problem = cfg.build_problem()
            horizon_steps(problem.T, problem.dt)
        except ConfigError as exc:
            errors.append(exc)
        except (ValueError, TypeError, KeyError) as exc:
            err(f"invalid problem: {exc}", "linear" if inline else "params")
    return errors


def _validate_sections(data, inline, err):
    required = {"init": ("mu_0",), "constraint": ("mu_T", "Sigma_T")}
    allowed = {"init": {"mu_0", "Sigma_0"}, "constraint": {"mu_T", "Sigma_T"}}
    for sec in ("init", "constraint"):
        body = data.get(sec)
        if body is None:
            if inline:
                for k in required[sec]:
                    err(f"{sec}.{k} required", f"{sec}.{k}")
            continue
        if not isinstance(body, dict):
            err(f"{sec} must be a mapping", sec)
            continue
        for k in body:
            if k not in allowed[sec]:
                err(f"unknown key '{k}'", f"{sec}.{k}")
        # a constraint given explicitly must be complete
        needed = required[sec] if (inline or sec == "constraint") else ()
        for k in needed:
            if k not in body:
                err(f"{sec}.{k} required", f"{sec}.{k}")
        for k, v in body.items():
            if not _numeric_array(v):
                err(f"{sec}.{k} must be a number or a numeric array", f"{sec}.{k}")
    if inline:
        lin = data.get("linear")
        if not isinstance(lin, dict):
            err("linear must be a mapping", "linear")
            return
        for k in ("A", "B"):
            if k not in lin:
                err(f"linear.{k} required", f"linear.{k}")
        for k, v in lin.items():
            if k not in ("A", "B", "F", "Q", "R"):
                err(f"unknown key '{k}'", f"linear.{k}")
            elif not _numeric_array(v):
                err(f"linear.{k} must be a number or a numeric array", f"linear.{k}")


def _numeric_array(v) -> bool:
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        return False
    return bool(np.all(np.isfinite(a)))


def _validate_solver(solver, err):
    if solver is None:
        return
    if not isinstance(solver, dict):
        err("solver must be a mapping", "solver")
        return
    for k, v in solver.items():
        f = f"solver.{k}"
        if k not in SOLVER_DEFAULTS:
            err(f"unknown key '{k}'", f)
        elif k == "estimator":
            if v not in ("mc", "gaussian"):
                err("estimator must be 'mc' or 'gaussian'", f)
        elif k in ("eta1", "eta2"):
            if v is not None and not (_is_number(v) and 0 <= v <= 1):
                err(f"{k} must lie in [0, 1]", f)
        elif k in ("max_outer", "sddp_max_iter"):
            if not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
                err(f"{k} must be a positive integer", f)
        elif k in ("samples_coarse", "samples_fine"):
            if not (isinstance(v, int) and not isinstance(v, bool) and (v == 0 or v >= 2)):
                err(f"{k} must be 0 or an integer of at least 2", f)
        elif not (_is_number(v) and v > 0):
            err(f"{k} must be positive", f)
