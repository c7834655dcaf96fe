"""
Config parser module for the Slow SDE Laboratory.
Reads sectioned TOML files, applies command-line overrides and the seed
environment variable, and resolves everything into typed dataclasses.
"""

import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Union

from config import Config
from exceptions import ConfigError
from harness import HarnessConfig
from models import ModelSpec
from optim import RunConfig
from slowsde import (
    KIND_NAMES,
    Kappa,
    LabelNoiseLocal,
    LabelNoiseLocalInf,
    LabelNoiseSgd,
    Local,
    LocalInf,
    LocalLsr,
    Sgd,
)

logger = logging.getLogger(__name__)


@dataclass
class SdeSpec:
    """[sde] section; unset B, K and ηH fall back to the [run] values."""

    kind: str = "local"
    B: Optional[float] = None
    K: Optional[int] = None
    eta_h: Optional[float] = None
    kappa: float = 1.0
    kappa1: Optional[float] = None
    kappa2: Optional[float] = None
    horizon: float = 1.0
    dt: Optional[float] = None
    record_every: int = 1
    zeta0: Optional[List[float]] = None

    def build(self, run: RunConfig):
        """The SdeKind described by this section."""
        B = self.B if self.B is not None else run.batch
        K = self.K if self.K is not None else run.K
        eta_h = self.eta_h if self.eta_h is not None else run.alpha
        builders = {
            "sgd": lambda: Sgd(B),
            "local": lambda: Local(B, K, eta_h),
            "kappa": lambda: Kappa(self.kappa1 if self.kappa1 is not None else 1.0 / B,
                                   self.kappa2 if self.kappa2 is not None else 1.0 / (2 * B)),
            "local_lsr": lambda: LocalLsr(B, K, self.kappa, eta_h),
            "local_inf": lambda: LocalInf(B, K),
            "label_noise_sgd": lambda: LabelNoiseSgd(B),
            "label_noise_local": lambda: LabelNoiseLocal(B, K, eta_h),
            "label_noise_local_inf": lambda: LabelNoiseLocalInf(B, K),
        }
        if self.kind not in builders:
            raise ConfigError(f"sde.kind must be one of {sorted(KIND_NAMES)}, got {self.kind!r}", key="sde.kind")
        return builders[self.kind]()


@dataclass
class SweepSpec:
    """[sweep] section: vary one [run] key over a list of values."""

    key: str = "eta"
    values: list = field(default_factory=list)


@dataclass
class VerifySpec:
    scale: str = "full"


@dataclass
class ResolvedConfig:
    """Every section after defaults, file, environment and overrides."""

    run: RunConfig
    model: ModelSpec
    sde: SdeSpec
    harness: HarnessConfig
    sweep: SweepSpec
    verify: VerifySpec
    seed: int
    output: str
    source: Optional[str] = None

    def to_dict(self):
        return {
            "source": self.source,
            "seed": self.seed,
            "output": self.output,
            "run": self.run.describe(),
            "model": asdict(self.model),
            "sde": asdict(self.sde),
            "harness": {k: v for k, v in asdict(self.harness).items() if k != "model"},
            "sweep": asdict(self.sweep),
            "verify": asdict(self.verify),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


SECTIONS = {
    "run": RunConfig,
    "model": ModelSpec,
    "sde": SdeSpec,
    "harness": HarnessConfig,
    "sweep": SweepSpec,
    "verify": VerifySpec,
}

# Fields filled from other sections rather than from the file
_DERIVED = {"harness": {"model", "output"}}
_GLOBAL_KEYS = {"seed", "output"}


def section_keys(section):
    skip = _DERIVED.get(section, set())
    return [f.name for f in fields(SECTIONS[section]) if f.name not in skip]


def _owners(key):
    return [name for name in SECTIONS if key in section_keys(name)]


def valid_keys():
    keys = {f"{section}.{key}" for section in SECTIONS for key in section_keys(section)}
    return sorted(keys | _GLOBAL_KEYS)


def _unknown(key):
    return ConfigError(f"unknown key: {key} (valid keys: {', '.join(valid_keys())})", key=key)


def _coerce(path, value, hint):
    """Check value against a dataclass field type; ints widen to floats."""
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is Union:
        inner = [a for a in args if a is not type(None)][0]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            return None
        return _coerce(path, value, inner)
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}", key=path)
        if not args:
            return list(value)
        return [_coerce(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}", key=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}", key=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}", key=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}", key=path)
        return value
    return value


def parse_value(text):
    """A TOML literal, or the raw text when it is not one."""
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text.strip()


class _Layers:
    """Raw values per section, assigned in precedence order."""

    def __init__(self):
        self.sections = {name: {} for name in SECTIONS}
        self.globals = {}

    def assign(self, key, value, origin):
        if "." in key:
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in section_keys(section):
                raise _unknown(key)
            self.sections[section][name] = value
            return
        if key in _GLOBAL_KEYS:
            self.globals[key] = value
            for section in _owners(key):
                self.sections[section].pop(key, None)
            return
        if key == "model" and not isinstance(value, dict):
            self.sections["model"]["name"] = value
            return
        owners = _owners(key)
        if not owners:
            raise _unknown(key)
        for section in owners:
            self.sections[section][key] = value
        logger.debug(f"{origin}: {key} applied to {', '.join(owners)}")

    def load_table(self, table, origin):
        for key, value in table.items():
            if key in SECTIONS and isinstance(value, dict):
                for name, inner in value.items():
                    self.assign(f"{key}.{name}", inner, origin)
            else:
                self.assign(key, value, origin)


def _build(section, raw, extra=None):
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    values = {name: _coerce(f"{section}.{name}", value, hints[name]) for name, value in raw.items()}
    values.update(extra or {})
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}", key=section)


def _env_seed(env):
    text = env.get(Config.SEED_ENV_VAR)
    if text is None or text == "":
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{Config.SEED_ENV_VAR} must be an integer, got {text!r}", key=Config.SEED_ENV_VAR)


def _effective_seed(layers):
    if "seed" in layers.globals:
        return _coerce("seed", layers.globals["seed"], int)
    for section in ("run", "harness"):
        if "seed" in layers.sections[section]:
            return _coerce(f"{section}.seed", layers.sections[section]["seed"], int)
    return Config.MASTER_SEED


def parse_config(path=None, overrides=(), env=None, output=None):
    """
    Resolve a config file plus `key=value` overrides.

    Seed precedence: an override > the SLOWSDE_SEED environment variable > the file.
    Without a global seed, a section seed ([run] first, then [harness]) becomes
    the recorded one.
    """
    env = os.environ if env is None else env
    layers = _Layers()

    if path is not None:
        try:
            with open(path, "rb") as f:
                table = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", key="--config")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML: {e}", key="--config")
        layers.load_table(table, str(path))

    seed = _env_seed(env)
    if seed is not None:
        layers.assign("seed", seed, Config.SEED_ENV_VAR)

    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}", key=item)
        layers.assign(key.strip(), parse_value(text), "--set")

    seed = _effective_seed(layers)
    out = output or layers.globals.get("output", Config.OUTPUT_DIR)
    out = _coerce("output", out, str)

    for section in ("run", "harness"):
        layers.sections[section].setdefault("seed", seed)
    model = _build("model", layers.sections["model"])
    run = _build("run", layers.sections["run"])
    if run.rounds is not None or run.total_steps is not None:
        run.validate()
    resolved = ResolvedConfig(
        run=run,
        model=model,
        sde=_build("sde", layers.sections["sde"]),
        harness=_build("harness", layers.sections["harness"], {"model": model, "output": out}),
        sweep=_build("sweep", layers.sections["sweep"]),
        verify=_build("verify", layers.sections["verify"]),
        seed=seed,
        output=out,
        source=str(path) if path is not None else None,
    )
    if resolved.verify.scale not in ("full", "smoke"):
        raise ConfigError(f"verify.scale must be full or smoke, got {resolved.verify.scale!r}", key="verify.scale")
    logger.info(f"Resolved configuration from {path or 'defaults'} with {len(overrides)} override(s), seed {seed}")
    return resolved


def with_run_value(resolved: ResolvedConfig, key, value):
    """Copy of the configuration with one [run] key replaced (used by sweeps)."""
    if key not in section_keys("run"):
        raise _unknown(f"run.{key}")
    hints = typing.get_type_hints(RunConfig)
    run = replace(resolved.run, **{key: _coerce(f"run.{key}", value, hints[key])})
    run.validate()
    return replace(resolved, run=run)


def write_resolved_config(resolved: ResolvedConfig, directory):
    """Write resolved_config.json into the output directory; returns its path or None."""
    try:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, Config.RESOLVED_CONFIG_FILE)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(resolved.to_json() + "\n")
        logger.info(f"Wrote resolved configuration to {path}")
        return path
    except Exception as e:
        logger.error(f"Error writing resolved configuration: {e}")
        return None
