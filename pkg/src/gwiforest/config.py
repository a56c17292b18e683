"""Run configuration for the command line: a JSON file plus flag overrides.

A RunConfig is the one object every command consumes and every artifact
echoes.  Validation here is structural (known keys, types, ranges); the
semantic checks stay with the domain constructors, whose errors are
re-raised with the config path that triggered them.  Law and matrix indices
in those paths are 1-based to match the type indices used everywhere else.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError, LawError
from .laws import parse_law
from .scaling import Mechanism, OffspringEnsemble, ScalingFamily

__all__ = ["RunConfig", "COMMAND_KEYS"]


def _fail(name, want, got):
    raise ConfigError(f"{name} must be {want}, got {got!r}")


def _as_str(name, x):
    if not isinstance(x, str) or not x:
        _fail(name, "a non-empty string", x)
    return x


def _as_bool(name, x):
    if not isinstance(x, bool):
        _fail(name, "true or false", x)
    return x


def _as_int(name, x, low=None):
    if isinstance(x, bool) or not isinstance(x, int):
        _fail(name, "an integer", x)
    if low is not None and x < low:
        _fail(name, f"an integer >= {low}", x)
    return x


def _as_pos_int(name, x):
    return _as_int(name, x, low=1)


def _as_nonneg_int(name, x):
    return _as_int(name, x, low=0)


def _as_float(name, x, low=None, strict=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        _fail(name, "a number", x)
    x = float(x)
    if low is not None and (x <= low if strict else x < low):
        _fail(name, f"a number {'>' if strict else '>='} {low}", x)
    return x


def _as_pos_float(name, x):
    return _as_float(name, x, low=0.0, strict=True)


def _as_float_list(name, x):
    if not isinstance(x, (list, tuple)) or not x:
        _fail(name, "a non-empty list of numbers", x)
    return [_as_float(f"{name}[{k}]", v) for k, v in enumerate(x)]


def _as_int_list(name, x):
    if not isinstance(x, (list, tuple)) or not x:
        _fail(name, "a non-empty list of integers", x)
    return [_as_pos_int(f"{name}[{k}]", v) for k, v in enumerate(x)]


def _as_str_list(name, x):
    if isinstance(x, str):
        x = [x]
    if not isinstance(x, (list, tuple)) or not x:
        _fail(name, "a non-empty list of paths", x)
    return [_as_str(f"{name}[{k}]", v) for k, v in enumerate(x)]


def _as_dict(name, x):
    if not isinstance(x, dict):
        _fail(name, "an object", x)
    return dict(x)


def _as_thresholds(name, x):
    x = _as_dict(name, x)
    return {_as_str(f"{name} key", k): _as_float(f"{name}[{k}]", v, low=0.0)
            for k, v in x.items()}


_FIELDS = {
    "out_dir": _as_str,
    "seed": _as_nonneg_int,
    "threads": _as_pos_int,
    "p": _as_pos_int,
    "p_list": _as_int_list,
    "h_max": _as_pos_int,
    "n_forests": _as_pos_int,
    "replicates": _as_pos_int,
    "dt": _as_pos_float,
    "band": _as_pos_float,
    "occupation_dt": _as_pos_float,
    "occupation_t_max": _as_pos_float,
    "occupation_replicates": _as_pos_int,
    "flow_v_max": _as_pos_float,
    "t": _as_pos_float,
    "v_list": _as_float_list,
    "t_list": _as_float_list,
    "experiment": _as_str,
    "engine": _as_str,
    "component": _as_pos_int,
    "h_first": _as_pos_int,
    "h_cap": _as_pos_int,
    "chunk": _as_pos_int,
    "reference_paths": _as_pos_int,
    "extremes_replicates": _as_pos_int,
    "sde_paths": _as_pos_int,
    "grid_points": _as_pos_int,
    "max_vertices": _as_pos_int,
    "thresholds": _as_thresholds,
    "inputs": _as_str_list,
    "mechanism": _as_dict,
    "ensemble": _as_dict,
    "family": _as_dict,
    "dry_run": _as_bool,
    "dump_samples": _as_bool,
    "n_paths": _as_pos_int,
    "v_max": _as_pos_float,
    "t_max": _as_pos_float,
    "target": _as_str,
    "report": _as_str,
    "samples": _as_str,
}

_COMMON = {"seed", "threads", "out_dir"}
_SOURCE = {"ensemble", "mechanism", "family", "p"}

COMMAND_KEYS = {
    "generate": _COMMON | _SOURCE | {"h_max", "n_forests", "max_vertices"},
    "encode": _COMMON | {"inputs"},
    "verify": _COMMON | _SOURCE | {"inputs", "h_max", "n_forests",
                                   "max_vertices"},
    "simulate": _COMMON | {"mechanism", "target", "dt", "v_max", "t_max",
                           "n_paths", "component"},
    "experiment": _COMMON | {
        "experiment", "mechanism", "family", "thresholds", "dry_run",
        "dump_samples", "p", "p_list", "replicates", "dt", "band",
        "v_list", "t_list", "t", "engine", "component", "h_first", "h_cap",
        "chunk", "reference_paths", "extremes_replicates", "sde_paths",
        "grid_points", "max_vertices", "occupation_dt", "occupation_t_max",
        "occupation_replicates", "flow_v_max",
    },
    "report": {"report", "samples", "out_dir", "threads"},
}


@dataclass(frozen=True)
class RunConfig:
    """Validated key-value configuration for one command invocation."""

    command: str
    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command, file_values=None, overrides=None) -> "RunConfig":
        """Merge config-file values with flag overrides (flags win) and
        validate every key against the command's schema."""
        if command not in COMMAND_KEYS:
            raise ConfigError(
                f"unknown command {command!r}; "
                f"choose from {sorted(COMMAND_KEYS)}"
            )
        merged = {}
        for source in (file_values or {}, overrides or {}):
            if not isinstance(source, dict):
                raise ConfigError("configuration must be a JSON object")
            for k, v in source.items():
                if v is not None:
                    merged[k] = v
        allowed = COMMAND_KEYS[command]
        values = {}
        for k in sorted(merged):
            if k == "command":
                if merged[k] != command:
                    raise ConfigError(
                        f"config file says command {merged[k]!r} "
                        f"but {command!r} was invoked"
                    )
                continue
            if k not in _FIELDS:
                raise ConfigError(f"unknown config key {k!r}")
            if k not in allowed:
                raise ConfigError(
                    f"config key {k!r} does not apply to command {command!r}"
                )
            values[k] = _FIELDS[k](k, merged[k])
        return cls(command=command, values=values)

    @classmethod
    def load(cls, command, path, overrides=None) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fp:
                data = json.load(fp)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.build(command, data, overrides)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"command {self.command!r} needs config key {key!r}")
        return self.values[key]

    def to_dict(self) -> dict:
        """Echo for artifacts: the command plus every resolved value."""
        return {"command": self.command, **{k: self.values[k] for k in sorted(self.values)}}

    # ------------------------------------------------------------------
    # domain builders

    def mechanism(self) -> Mechanism:
        spec = self.require("mechanism")
        try:
            return Mechanism.from_dict(spec)
        except (ConfigError, LawError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"mechanism: {exc}") from exc

    def family(self) -> ScalingFamily:
        mech = self.mechanism()
        spec = self.get("family") or {"kind": "diffusion"}
        unknown = set(spec) - {"kind", "tail_index", "coeffs"}
        if unknown:
            raise ConfigError(f"family: unknown key {sorted(unknown)[0]!r}")
        kind = _as_str("family.kind", spec.get("kind", "diffusion"))
        kwargs = {}
        if "tail_index" in spec:
            kwargs["tail_index"] = _as_pos_float("family.tail_index", spec["tail_index"])
        if "coeffs" in spec:
            kwargs["coeffs"] = tuple(_as_float_list("family.coeffs", spec["coeffs"]))
        try:
            return ScalingFamily(mech, kind=kind, **kwargs)
        except (ConfigError, LawError) as exc:
            raise ConfigError(f"family: {exc}") from exc

    def ensemble(self) -> OffspringEnsemble:
        """Offspring laws: an explicit ensemble spec if given, otherwise the
        scaling family evaluated at the configured p."""
        spec = self.get("ensemble")
        if spec is None:
            if "mechanism" not in self.values:
                raise ConfigError(
                    f"command {self.command!r} needs either an ensemble spec "
                    "or a mechanism with a scale p"
                )
            return self.family().ensemble(self.require("p"))
        unknown = set(spec) - {"mu", "nu", "roots"}
        if unknown:
            raise ConfigError(f"ensemble: unknown key {sorted(unknown)[0]!r}")
        for key in ("mu", "nu", "roots"):
            if key not in spec:
                raise ConfigError(f"ensemble: missing key {key!r}")
        mu_spec, nu_spec, roots = spec["mu"], spec["nu"], spec["roots"]
        if not isinstance(mu_spec, (list, tuple)) or not mu_spec:
            _fail("ensemble.mu", "a non-empty matrix of law specs", mu_spec)
        n = len(mu_spec)
        mu = []
        for i, row in enumerate(mu_spec, start=1):
            if not isinstance(row, (list, tuple)) or len(row) != n:
                _fail(f"ensemble.mu[{i}]", f"a row of {n} law specs", row)
            mu.append(tuple(
                self._law(f"ensemble.mu[{i}][{j}]", text)
                for j, text in enumerate(row, start=1)
            ))
        if not isinstance(nu_spec, (list, tuple)) or len(nu_spec) != n:
            _fail("ensemble.nu", f"a list of {n} law specs", nu_spec)
        nu = tuple(
            self._law(f"ensemble.nu[{j}]", text)
            for j, text in enumerate(nu_spec, start=1)
        )
        if not isinstance(roots, (list, tuple)) or len(roots) != n:
            _fail("ensemble.roots", f"a list of {n} counts", roots)
        roots = tuple(
            _as_nonneg_int(f"ensemble.roots[{j}]", r)
            for j, r in enumerate(roots, start=1)
        )
        try:
            return OffspringEnsemble(mu=tuple(mu), nu=nu, roots=roots)
        except (ConfigError, LawError) as exc:
            raise ConfigError(f"ensemble: {exc}") from exc

    @staticmethod
    def _law(path, text):
        if not isinstance(text, str):
            _fail(path, "a law spec string like 'poisson(0.8)'", text)
        try:
            return parse_law(text)
        except LawError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
