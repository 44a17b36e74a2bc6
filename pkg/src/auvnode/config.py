"""Configuration loading and validation.

All settings live in one INI file with sections [run], [truth_params],
[excitation], [dataset], [train], [eval]. Parsing is strict: unknown
sections or keys are errors, and every validation error names the
offending key. A complete default file ships as package data; user files
only need the keys they override, except [truth_params], which is all or
nothing when present.
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from importlib import resources

from .plant import TruthParams


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class ExcitationConfig:
    """Bands for the randomized excitation and initial conditions."""

    n_segments: int = 50
    thrust_band: tuple = (0.1, 1.0)      # step/knot levels, within [0, 1]
    elevator_band: tuple = (-0.8, 0.8)   # within [-1, 1]
    rudder_band: tuple = (-0.8, 0.8)     # within [-1, 1]
    freq_band: tuple = (0.05, 0.5)       # sinusoid frequency [Hz]
    spline_knots: int = 4
    ic_theta_frac: float = 0.9           # fraction of pi/2
    ic_u_band: tuple = (0.5, 2.5)        # initial surge [m/s]
    ic_rate_max: float = 0.2             # |q0|, |r0| bound [rad/s]

    def validate(self):
        if self.n_segments < 1:
            raise ConfigError(f"excitation.n_segments must be >= 1, got {self.n_segments}")
        if self.spline_knots < 4:
            raise ConfigError(f"excitation.spline_knots must be >= 4, got {self.spline_knots}")
        for key, band, lo, hi in (
            ("thrust_band", self.thrust_band, 0.0, 1.0),
            ("elevator_band", self.elevator_band, -1.0, 1.0),
            ("rudder_band", self.rudder_band, -1.0, 1.0),
        ):
            if not (lo <= band[0] < band[1] <= hi):
                raise ConfigError(
                    f"excitation.{key} must satisfy {lo} <= lo < hi <= {hi}, got {band}"
                )
        if not (0.0 < self.freq_band[0] < self.freq_band[1]):
            raise ConfigError(f"excitation.freq_band must be increasing and positive, got {self.freq_band}")
        if not (0.0 < self.ic_theta_frac < 1.0):
            raise ConfigError(f"excitation.ic_theta_frac must be in (0, 1), got {self.ic_theta_frac}")
        if not (0.0 <= self.ic_u_band[0] < self.ic_u_band[1]):
            raise ConfigError(f"excitation.ic_u_band must be increasing and non-negative, got {self.ic_u_band}")
        if self.ic_rate_max < 0.0:
            raise ConfigError(f"excitation.ic_rate_max must be >= 0, got {self.ic_rate_max}")


@dataclass(frozen=True)
class DatasetConfig:
    """Training-set shape: curriculum horizons and sampling interval."""

    name: str = "default"
    schedule: tuple = (100, 200, 400, 800, 1600)
    delta: float = 0.01  # [s]

    def validate(self):
        if self.delta <= 0.0:
            raise ConfigError(f"dataset.delta must be positive, got {self.delta}")
        if len(self.schedule) < 1:
            raise ConfigError("dataset.schedule must not be empty")
        for n in self.schedule:
            if n < 1:
                raise ConfigError(f"dataset.schedule entries must be >= 1, got {n}")
        for a, b in zip(self.schedule, self.schedule[1:]):
            if b != 2 * a:
                raise ConfigError(
                    f"dataset.schedule must double at each stage, got {a} -> {b}"
                )


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer, curriculum, and variant-specific knobs."""

    epochs: int = 300
    patience: int = 30
    lr: float = 1e-3
    graybox_lr: float = 0.1
    lr_batch_decay: float = 0.5       # lr multiplier per curriculum batch
    weight_decay: float = 0.01        # decoupled, weight matrices only
    grad_clip: float = 10.0           # global-norm threshold
    penalty_weight: float = 1.0       # boundary penalty, cblackbox only
    divergence_threshold: float = 1e6
    seeds: int = 10                   # instances per variant
    cbb_sigma: tuple = (0.5, 1.0)     # singular-value band, constrained blackbox
    hybrid_sigma: tuple = (0.0, 1.0)  # singular-value band, hybrid residual nets

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"train.patience must be >= 1, got {self.patience}")
        for key in ("lr", "graybox_lr", "grad_clip", "divergence_threshold"):
            if getattr(self, key) <= 0.0:
                raise ConfigError(f"train.{key} must be positive, got {getattr(self, key)}")
        if not (0.0 < self.lr_batch_decay <= 1.0):
            raise ConfigError(f"train.lr_batch_decay must be in (0, 1], got {self.lr_batch_decay}")
        for key in ("weight_decay", "penalty_weight"):
            if getattr(self, key) < 0.0:
                raise ConfigError(f"train.{key} must be >= 0, got {getattr(self, key)}")
        if self.seeds < 1:
            raise ConfigError(f"train.seeds must be >= 1, got {self.seeds}")
        for key in ("cbb_sigma", "hybrid_sigma"):
            lo, hi = getattr(self, key)
            if not (0.0 <= lo <= hi):
                raise ConfigError(f"train.{key} must satisfy 0 <= lo <= hi, got {(lo, hi)}")


@dataclass(frozen=True)
class EvalSettings:
    """Test-set shape for the fixed evaluation protocol."""

    n_initial_conditions: int = 5
    n_input_trajectories: int = 5
    test_n: int = 5000  # steps per test trajectory

    def validate(self):
        for key in ("n_initial_conditions", "n_input_trajectories", "test_n"):
            if getattr(self, key) < 1:
                raise ConfigError(f"eval.{key} must be >= 1, got {getattr(self, key)}")


@dataclass(frozen=True)
class AppConfig:
    """Everything one pipeline run needs, fully validated up front."""

    truth: TruthParams
    excitation: ExcitationConfig = ExcitationConfig()
    dataset: DatasetConfig = DatasetConfig()
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()
    seed: int = 1
    out: str = "auvnode-out"

    def validate(self) -> "AppConfig":
        self.truth.validate_physical()
        self.excitation.validate()
        self.dataset.validate()
        self.train.validate()
        self.eval.validate()
        return self


def _parse_scalar(section: str, key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw.strip()
        if kind == "int_tuple":
            return tuple(int(v) for v in raw.split(","))
        if kind == "float_pair":
            parts = [float(v) for v in raw.split(",")]
            if len(parts) != 2:
                raise ValueError(f"expected two comma-separated values, got {len(parts)}")
            return tuple(parts)
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind} ({e})") from e
    raise AssertionError(f"unhandled kind {kind}")


# section -> key -> (dataclass field, parse kind)
_SCHEMA = {
    "run": {
        "seed": ("seed", "int"),
        "out": ("out", "str"),
    },
    "excitation": {
        "n_segments": ("n_segments", "int"),
        "thrust_band": ("thrust_band", "float_pair"),
        "elevator_band": ("elevator_band", "float_pair"),
        "rudder_band": ("rudder_band", "float_pair"),
        "freq_band": ("freq_band", "float_pair"),
        "spline_knots": ("spline_knots", "int"),
        "ic_theta_frac": ("ic_theta_frac", "float"),
        "ic_u_band": ("ic_u_band", "float_pair"),
        "ic_rate_max": ("ic_rate_max", "float"),
    },
    "dataset": {
        "name": ("name", "str"),
        "schedule": ("schedule", "int_tuple"),
        "delta": ("delta", "float"),
    },
    "train": {
        "epochs": ("epochs", "int"),
        "patience": ("patience", "int"),
        "lr": ("lr", "float"),
        "graybox_lr": ("graybox_lr", "float"),
        "lr_batch_decay": ("lr_batch_decay", "float"),
        "weight_decay": ("weight_decay", "float"),
        "grad_clip": ("grad_clip", "float"),
        "penalty_weight": ("penalty_weight", "float"),
        "divergence_threshold": ("divergence_threshold", "float"),
        "seeds": ("seeds", "int"),
        "cbb_sigma": ("cbb_sigma", "float_pair"),
        "hybrid_sigma": ("hybrid_sigma", "float_pair"),
    },
    "eval": {
        "n_initial_conditions": ("n_initial_conditions", "int"),
        "n_input_trajectories": ("n_input_trajectories", "int"),
        "test_n": ("test_n", "int"),
    },
}

_SECTION_TYPES = {
    "excitation": ("excitation", ExcitationConfig),
    "dataset": ("dataset", DatasetConfig),
    "train": ("train", TrainSettings),
    "eval": ("eval", EvalSettings),
}


def _read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (coefficient names)
    with open(path, "r", encoding="utf-8") as fh:
        cp.read_file(fh)
    return cp


def default_config() -> AppConfig:
    """The packaged default configuration."""
    ref = resources.files("auvnode").joinpath("data/default.ini")
    with resources.as_file(ref) as path:
        return load_config(path)


def load_config(path, base: AppConfig | None = None) -> AppConfig:
    """Parse an INI file into a validated AppConfig.

    Keys present override `base` (or the dataclass defaults); unknown
    sections/keys raise ConfigError. [truth_params] must be complete when
    given; absent that section, the truth coefficients come from `base`,
    which must then be provided.
    """
    cp = _read_ini(path)

    known_sections = set(_SCHEMA) | {"truth_params"}
    for section in cp.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown config section [{section}]")

    if cp.has_section("truth_params"):
        truth = TruthParams.from_mapping(dict(cp.items("truth_params")))
    elif base is not None:
        truth = base.truth
    else:
        raise ConfigError(f"{path}: missing [truth_params] section")

    values = {"truth": truth}
    if base is not None:
        values["seed"] = base.seed
        values["out"] = base.out

    for section, keys in _SCHEMA.items():
        if section == "run":
            if cp.has_section("run"):
                for key, raw in cp.items("run"):
                    if key not in keys:
                        raise ConfigError(f"unknown key run.{key}")
                    field, kind = keys[key]
                    values[field] = _parse_scalar("run", key, raw, kind)
            continue
        attr, cls = _SECTION_TYPES[section]
        overrides = {}
        if cp.has_section(section):
            for key, raw in cp.items(section):
                if key not in keys:
                    raise ConfigError(f"unknown key {section}.{key}")
                field, kind = keys[key]
                overrides[field] = _parse_scalar(section, key, raw, kind)
        start = getattr(base, attr) if base is not None else cls()
        values[attr] = dataclasses.replace(start, **overrides) if overrides else start

    return AppConfig(**values).validate()


def load_truth_params(path) -> TruthParams:
    """Read just the [truth_params] section of a config file."""
    cp = _read_ini(path)
    if not cp.has_section("truth_params"):
        raise ConfigError(f"{path}: missing [truth_params] section")
    return TruthParams.from_mapping(dict(cp.items("truth_params"))).validate_physical()


def apply_preset(cfg: AppConfig, preset: str | None) -> AppConfig:
    """Named down-scalings of the full experiment.

    "small" shrinks the curriculum to (50, 100, 200), trains 3 instances
    per variant, and shortens test trajectories to 1000 steps. The
    per-batch optimization budget is raised, not lowered: with so few
    steps per trajectory the physical coefficients are only pinned down
    near the loss minimum, so each batch runs up to 1000 epochs with a
    patience of 150. Everything else is untouched.
    """
    if preset is None or preset == "full":
        return cfg
    if preset == "small":
        return dataclasses.replace(
            cfg,
            dataset=dataclasses.replace(cfg.dataset, schedule=(50, 100, 200)),
            train=dataclasses.replace(cfg.train, seeds=3, epochs=1000, patience=150),
            eval=dataclasses.replace(cfg.eval, test_n=1000),
        ).validate()
    raise ConfigError(f"unknown preset {preset!r} (expected 'small' or 'full')")


def config_hash(cfg: AppConfig) -> str:
    """Stable hash of the full configuration, for manifests/checkpoints."""
    payload = dataclasses.asdict(cfg)
    blob = json.dumps(payload, sort_keys=True, default=repr).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
