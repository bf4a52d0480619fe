"""Experiment configuration: a strict, sectioned key-value file.

Example::

    [target]
    family = gmm
    weights = 0.5, 0.5
    means = 1, 1; -1, -1
    variance = 1

    [slips]
    t0 = 0.02
    T = 10000
    K = 200

    [run]
    n_runs = 5000
    seed = 42

Unknown sections or keys are rejected with their line number.  A
``manifest.json`` written by the CLI holds the same sections as JSON and is
accepted wherever a config file is.
"""

from __future__ import annotations

import configparser
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, SlipsError
from .sl_core import SlipsConfig, T_for_snr, sigma_default
from .targets import GaussianMixture, gaussian, symmetric_bimodal


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _int(v):
    if isinstance(v, bool):
        raise ValueError("expected an integer")
    f = float(v)
    if not f.is_integer():
        raise ValueError(f"expected an integer, got {v!r}")
    return int(f)


def _float(v):
    f = float(v)
    if not math.isfinite(f):
        raise ValueError(f"expected a finite number, got {v!r}")
    return f


def _floats(v):
    if isinstance(v, (list, tuple)):
        return [_float(x) for x in v]
    return [_float(x) for x in str(v).replace(",", " ").split()]


def _ints(v):
    if isinstance(v, (list, tuple)):
        return [_int(x) for x in v]
    return [_int(x) for x in str(v).replace(",", " ").split()]


def _matrix(v):
    if isinstance(v, (list, tuple)):
        rows = [_floats(r) for r in v]
    else:
        rows = [_floats(r) for r in str(v).split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("expected rows of equal length separated by ';'")
    return rows


def _choice(*options):
    def parse(v):
        s = str(v).strip().lower().replace("_", "-")
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return s
    return parse


def _sigma(v):
    if str(v).strip().lower() == "auto":
        return "auto"
    return _float(v)


def _names(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _text(v):
    return str(v)


SCHEMA = {
    "target": {
        "family": _choice("gmm", "gaussian", "symmetric-bimodal"),
        "dim": _int, "variance": _float, "mean": _floats,
        "weights": _floats, "means": _matrix,
        "offset": _float, "weight": _float,
    },
    "slips": {
        "t0": _float, "T": _float, "snr_target": _float, "K": _int, "M": _int, "N": _int,
        "sigma": _sigma, "grid": _choice("log-snr", "uniform"), "denoiser": _choice("mala", "oracle"),
        "mala_step": _float, "mala_adapt": _bool, "burn_in_fraction": _float,
        "target_accept": _float, "reuse_init_chain": _bool,
    },
    "run": {"n_runs": _int, "workers": _int, "seed": _int, "block_size": _int},
    "output": {"directory": _text, "trace": _bool},
    "metrics": {"n_reference": _int, "n_projections": _int},
    "verify": {
        "checks": _names, "n_paths": _int, "times": _floats, "cov_s": _float, "cov_t": _float,
        "grid_t0": _float, "grid_tK": _float, "grid_K": _int, "n_restarts": _int,
        "info_t": _floats, "tweedie_t": _floats, "eps": _float, "dims": _ints,
        "n_runs": _int, "n_reference": _int,
    },
    "compare": {"K_values": _ints, "n_runs": _int, "n_reference": _int, "ratios": _floats},
}

DEFAULTS = {
    "run": {"n_runs": 100, "workers": 1, "seed": 0, "block_size": 256},
    "output": {"directory": "slips-output", "trace": False},
    "metrics": {"n_reference": 100000, "n_projections": 64},
    "verify": {
        "checks": [], "n_paths": 100000, "times": [0.1, 1.0, 10.0], "cov_s": 1.0, "cov_t": 4.0,
        "grid_t0": 1.0, "grid_tK": 16.0, "grid_K": 4, "n_restarts": 8,
        "info_t": [1.0, 10.0, 100.0], "tweedie_t": [0.5, 2.0, 8.0], "eps": 0.2, "dims": [2, 8, 32],
        "n_runs": 2000, "n_reference": 100000,
    },
    "compare": {"K_values": [], "n_runs": 2000, "n_reference": 1000000,
                "ratios": [10.0, 100.0, 1000.0, 10000.0]},
}

# keys whose case matters (configparser lowercases by default)
_CASED = {k.lower(): k for sec in SCHEMA.values() for k in sec}


def _locate(text):
    """Map (section, key) to 1-based line numbers, and sections to their header line."""
    where, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), i)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), i)
    return where


def _parse_sections(raw, where=None):
    where = where or {}
    out = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section; expected one of {', '.join(SCHEMA)}",
                              section=section, line=where.get((section, None)))
        parsed = {}
        for key, value in items.items():
            name = _CASED.get(key.lower(), key)
            line = where.get((section, key.lower()))
            if name not in SCHEMA[section]:
                raise ConfigError(f"unknown key; allowed: {', '.join(SCHEMA[section])}",
                                  section=section, key=key, line=line)
            try:
                parsed[name] = SCHEMA[section][name](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), section=section, key=name, line=line) from None
        out[section] = parsed
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``sections`` is fully normalized."""

    sections: dict

    def section(self, name):
        merged = dict(DEFAULTS.get(name, {}))
        merged.update(self.sections.get(name, {}))
        return merged

    def as_dict(self):
        """Canonical, fully explicit form used in manifests."""
        return {name: self.section(name) for name in SCHEMA if name in self.sections or name in DEFAULTS}

    def with_overrides(self, **kv):
        """Apply ``(section, key) -> value`` style overrides given as ``section__key``."""
        sections = {k: dict(v) for k, v in self.sections.items()}
        for name, value in kv.items():
            if value is None:
                continue
            sec, key = name.split("__")
            sections.setdefault(sec, {})[key] = SCHEMA[sec][key](value)
        return validate(sections)

    def target(self):
        return build_target(self.section("target"))

    def slips_config(self):
        return build_slips_config(self.section("slips"), self.target(), self.section("run")["seed"])


def build_target(params):
    family = params.get("family")
    if family is None:
        raise ConfigError("missing key 'family'", section="target")
    allowed = {
        "gmm": {"family", "weights", "means", "variance"},
        "gaussian": {"family", "dim", "variance", "mean"},
        "symmetric-bimodal": {"family", "dim", "offset", "variance", "weight"},
    }[family]
    extra = set(params) - allowed
    if extra:
        raise ConfigError(f"keys {sorted(extra)} do not apply to family {family!r}", section="target")
    try:
        if family == "gmm":
            if "means" not in params or "weights" not in params:
                raise ConfigError("family gmm needs 'weights' and 'means'", section="target")
            gmm = GaussianMixture(np.array(params["weights"]), np.array(params["means"]), params.get("variance", 1.0))
        elif family == "gaussian":
            mean = params.get("mean")
            dim = params.get("dim", 1 if mean is None else len(mean))
            if mean is not None and len(mean) != dim:
                raise ConfigError("mean length differs from dim", section="target", key="mean")
            gmm = gaussian(dim, params.get("variance", 1.0), mean)
        else:
            gmm = symmetric_bimodal(params.get("dim", 2), params.get("offset", 1.0),
                                    params.get("variance", 1.0), params.get("weight", 0.5))
    except ConfigError:
        raise
    except SlipsError as exc:
        raise ConfigError(str(exc), section="target") from None
    return gmm.to_target(name=family)


def build_slips_config(params, target, seed):
    params = dict(params)
    for key in ("t0", "K"):
        if key not in params:
            raise ConfigError(f"missing key {key!r}", section="slips")
    if ("T" in params) == ("snr_target" in params):
        raise ConfigError("give exactly one of 'T' and 'snr_target'", section="slips")
    sigma = params.get("sigma", "auto")
    if "snr_target" in params:
        s = sigma_default(target.variance_proxy, target.dim) if sigma == "auto" else sigma
        params["T"] = T_for_snr(params.pop("snr_target"), target.variance_proxy, target.dim, s)
    kwargs = {
        "t0": params["t0"], "T": params["T"], "K": params["K"], "sigma": sigma, "seed": seed,
        "grid": params.get("grid", "log-snr"), "denoiser_mode": params.get("denoiser", "mala"),
    }
    for key in ("M", "N", "mala_step", "mala_adapt", "burn_in_fraction", "target_accept", "reuse_init_chain"):
        if key in params:
            kwargs[key] = params[key]
    try:
        return SlipsConfig(**kwargs)
    except SlipsError as exc:
        raise ConfigError(str(exc), section="slips") from None


def validate(sections, where=None) -> ExperimentConfig:
    # parsers are idempotent, so already-normalized sections pass through
    parsed = _parse_sections(sections, where)
    cfg = ExperimentConfig(parsed)
    if "target" not in parsed:
        raise ConfigError("missing section", section="target")
    if "slips" not in parsed:
        raise ConfigError("missing section", section="slips")
    cfg.slips_config()  # builds the target too
    run = cfg.section("run")
    for key in ("n_runs", "workers", "block_size"):
        if run[key] < 1:
            raise ConfigError("must be >= 1", section="run", key=key, line=(where or {}).get(("run", key.lower())))
    if not 0 <= run["seed"] < 2**64:
        raise ConfigError("must be in [0, 2^64)", section="run", key="seed")
    return cfg


def loads(text) -> ExperimentConfig:
    """Parse config text (INI style) or a manifest's JSON."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        sections = data.get("config", data)
        if not isinstance(sections, dict):
            raise ConfigError("manifest has no 'config' object")
        return validate(sections)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", section=exc.section, key=exc.option, line=exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", section=exc.section, line=exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any section", line=exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    return validate(raw, _locate(text))


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}") from None
    return loads(text)
