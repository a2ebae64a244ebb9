"""Validated key-value configuration for the command-line tools.

Configuration lives in an INI-style file with sections; every key is
checked against the schema below and unknown sections or keys are hard
errors, so typos never silently fall back to defaults.  All values have
defaults, so the file (and any section in it) is optional.  Command-line
flags override individual entries after the file is parsed.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

from .barrier import BarrierConfig
from .dynamics import InputBounds
from .learning import TrainConfig
from .safety_filter import MODES
from .sim import SCENARIO_KINDS


class ConfigError(ValueError):
    pass


def _kinds(raw: str) -> tuple:
    vals = tuple(s.strip() for s in raw.split(",") if s.strip())
    bad = [v for v in vals if v not in SCENARIO_KINDS]
    if bad:
        raise ConfigError(
            f"unknown scenario kind(s) {', '.join(bad)}; valid kinds: {', '.join(SCENARIO_KINDS)}"
        )
    if not vals:
        raise ConfigError("at least one scenario kind is required")
    return vals


def _modes(raw: str) -> tuple:
    vals = tuple(s.strip() for s in raw.split(",") if s.strip())
    bad = [v for v in vals if v not in MODES]
    if bad:
        raise ConfigError(f"unknown mode(s) {', '.join(bad)}; valid modes: {', '.join(MODES)}")
    if not vals:
        raise ConfigError("at least one mode is required")
    return vals


def _filtered(raw: str) -> str:
    if raw not in ("ego", "all", "none"):
        raise ConfigError(f"filtered must be ego|all|none, got {raw!r}")
    return raw


@dataclass
class DatasetSection:
    kinds: tuple = ("car_follow",)
    count: int = 40
    horizon: float = 10.0
    dt: float = 0.1
    seed: int = 0
    gamma_trail: float = 0.3
    gamma_lead: float = -0.3


@dataclass
class SimSection:
    kinds: tuple = ("car_follow",)
    count: int = 20
    horizon: float = 10.0
    dt: float = 0.1
    seed: int = 100
    accel_bias: float = 1.0
    filtered: str = "ego"
    modes: tuple = ("worst", "even", "learned")


@dataclass
class GridSection:
    delta_a: float = 0.25
    delta_omega: float = 0.1


@dataclass
class CliConfig:
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    bounds: InputBounds = field(default_factory=InputBounds)
    grid: GridSection = field(default_factory=GridSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sim: SimSection = field(default_factory=SimSection)
    out_dir: str = "out"


_SCHEMA = {
    "barrier": {
        "d_bar": float, "horizon": float, "flow_dt": float,
        "rho": float, "radius": float, "alpha_slope": float,
    },
    "bounds": {"a_max": float, "omega_max": float},
    "grid": {"delta_a": float, "delta_omega": float},
    "train": {
        "lambda1": float, "lambda2": float, "lambda3": float,
        "learning_rate": float, "epochs": int, "batch_size": int, "seed": int,
        "theta_max_deg": float, "hidden1": int, "hidden2": int,
        "l1": float, "l2": float, "holdout_fraction": float,
    },
    "dataset": {
        "kinds": _kinds, "count": int, "horizon": float, "dt": float,
        "seed": int, "gamma_trail": float, "gamma_lead": float,
    },
    "sim": {
        "kinds": _kinds, "count": int, "horizon": float, "dt": float,
        "seed": int, "accel_bias": float, "filtered": _filtered, "modes": _modes,
    },
    "output": {"dir": str},
}


def load_config(path: str | None = None, overrides: dict | None = None) -> CliConfig:
    """Parse, validate, and merge config file entries with flag overrides.

    overrides maps (section, key) to raw string values and passes through
    the same schema validation as the file.
    """
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(
                    f"unknown config section [{section}]; valid sections: "
                    f"{', '.join(sorted(_SCHEMA))}"
                )
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(
                        f"unknown key {key!r} in [{section}]; valid keys: "
                        f"{', '.join(sorted(_SCHEMA[section]))}"
                    )
                values[(section, key)] = raw
    for sk, raw in (overrides or {}).items():
        section, key = sk
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override {section}.{key}")
        values[(section, key)] = str(raw)

    parsed: dict = {}
    for (section, key), raw in values.items():
        conv = _SCHEMA[section][key]
        try:
            parsed.setdefault(section, {})[key] = conv(raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None

    try:
        barrier = BarrierConfig(
            d_bar=parsed.get("barrier", {}).get("d_bar", 0.4),
            horizon=parsed.get("barrier", {}).get("horizon", 1.0),
            flow_dt=parsed.get("barrier", {}).get("flow_dt", 0.01),
            rho=parsed.get("barrier", {}).get("rho", 20.0),
            radius=parsed.get("barrier", {}).get("radius", 1.0),
            alpha_slope=parsed.get("barrier", {}).get("alpha_slope", 0.5),
        )
        bounds = InputBounds(
            a_max=parsed.get("bounds", {}).get("a_max", 4.0),
            omega_max=parsed.get("bounds", {}).get("omega_max", 1.0),
        )
        tr = parsed.get("train", {})
        train = TrainConfig(
            lambda1=tr.get("lambda1", 1.0),
            lambda2=tr.get("lambda2", 10.0),
            lambda3=tr.get("lambda3", 0.01),
            learning_rate=tr.get("learning_rate", 1e-3),
            epochs=tr.get("epochs", 200),
            batch_size=tr.get("batch_size", 64),
            seed=tr.get("seed", 0),
            theta_max=math.radians(tr.get("theta_max_deg", 100.0)),
            hidden=(tr.get("hidden1", 128), tr.get("hidden2", 128)),
            l1=tr.get("l1", 0.1),
            l2=tr.get("l2", 0.01),
            holdout_fraction=tr.get("holdout_fraction", 0.2),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    ds = parsed.get("dataset", {})
    sm = parsed.get("sim", {})
    return CliConfig(
        barrier=barrier,
        bounds=bounds,
        grid=GridSection(**parsed.get("grid", {})),
        train=train,
        dataset=DatasetSection(**ds),
        sim=SimSection(**sm),
        out_dir=parsed.get("output", {}).get("dir", "out"),
    )
