"""Run configuration: flat key=value files, env and flag overrides.

Precedence, lowest to highest: built-in defaults, config file, environment
variables (``WAVELETCF_<KEY>`` upper-cased), command-line ``key=value``
overrides. The merged mapping is validated as a whole before any compute
so a bad run dies with an actionable message instead of mid-pipeline.

All randomness flows from the single ``seed`` key; stage seeds are derived
from it via :mod:`waveletcf.seeds` (split, init, eig; training re-derives
val-split and triples from its own stage seed).
"""

import difflib
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import seeds
from .errors import ConfigError, DataError
from .ingest import SplitSpec
from .model import ModelConfig
from .train import TrainConfig

ENV_PREFIX = "WAVELETCF_"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _parse_int(raw: str) -> int:
    return int(raw.strip())


def _parse_float(raw: str) -> float:
    return float(raw.strip())


def _parse_str(raw: str) -> str:
    return raw.strip()


def _parse_int_list(raw: str) -> Tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _parse_float_list(raw: str) -> Tuple[float, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(p) for p in parts)


# key -> (parser, default). Defaults are already-parsed values; None means
# "unset" for optional keys.
KEY_SPECS = {
    # artifact paths
    "input": (_parse_str, None),
    "input_format": (_parse_str, "auto"),
    "dataset": (_parse_str, None),
    "spectral_cache": (_parse_str, None),
    "checkpoint": (_parse_str, None),
    "train_state": (_parse_str, None),
    "report": (_parse_str, None),
    # ingest thresholds keep only sufficiently active rows/cols
    "min_user_interactions": (_parse_int, 5),
    "min_item_interactions": (_parse_int, 5),
    # split
    "train_fraction": (_parse_float, 0.8),
    "per_user_cap": (_parse_int, 0),  # 0 disables the cap
    # spectral
    "q": (_parse_int, 0),  # 0 means auto (default_q of the graph size)
    "eig_tol": (_parse_float, 1e-9),
    "drop_threshold": (_parse_float, 1e-7),
    "exponent_mode": (_parse_str, "power"),
    # model
    "layers": (_parse_int, 3),
    "width": (_parse_int, 64),
    "t": (_parse_float, 0.5),
    "eta": (_parse_float, 0.01),
    "materialize_wavelets": (_parse_bool, False),
    # training
    "batch_size": (_parse_int, 1024),
    "learning_rate": (_parse_float, 0.05),
    "adam_beta1": (_parse_float, 0.9),
    "adam_beta2": (_parse_float, 0.999),
    "adam_eps": (_parse_float, 1e-8),
    "max_epochs": (_parse_int, 200),
    "patience": (_parse_int, 10),
    "val_fraction": (_parse_float, 0.1),
    # grid search (unset = plain single fit)
    "grid_learning_rates": (_parse_float_list, None),
    "grid_t_values": (_parse_float_list, None),
    # evaluation
    "k_values": (_parse_int_list, (20,)),
    "cohort_boundaries": (_parse_int_list, (25, 50, 100)),
    "cold_start_caps": (_parse_int_list, (3, 5, 7, 9, 12)),
    # run control
    "seed": (_parse_int, 0),
    "threads": (_parse_int, 1),
}


def _unknown_key_message(key: str) -> str:
    close = difflib.get_close_matches(key, KEY_SPECS, n=3)
    hint = f"; did you mean {', '.join(close)}?" if close else ""
    return f"unknown config key '{key}'{hint} (see README for the key list)"


def parse_value(key: str, raw: str):
    """Parse one raw string for `key`, or raise ConfigError."""
    if key not in KEY_SPECS:
        raise ConfigError(_unknown_key_message(key))
    parser, _ = KEY_SPECS[key]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse '{raw}' ({exc})")


def load_config_file(path) -> Dict[str, object]:
    """Read a flat key=value file; '#' starts a comment, blanks ignored."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}")
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{path}:{lineno}: expected key=value, got '{stripped}'"
            )
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = parse_value(key, raw)
    return values


def env_overrides(environ=None) -> Dict[str, object]:
    """Collect WAVELETCF_* variables that name known keys."""
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in KEY_SPECS:
            raise ConfigError(
                f"environment variable {name}: {_unknown_key_message(key)}"
            )
        values[key] = parse_value(key, raw)
    return values


def flag_overrides(pairs: List[str]) -> Dict[str, object]:
    """Parse --set style key=value strings from the command line."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}': expected key=value")
        key, raw = pair.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


@dataclass
class RunConfig:
    """Fully validated configuration for one pipeline run."""

    values: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {key: default for key, (_, default) in KEY_SPECS.items()}
        for key, value in self.values.items():
            if key not in KEY_SPECS:
                raise ConfigError(_unknown_key_message(key))
            merged[key] = value
        self.values = merged
        self._validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def _validate(self):
        v = self.values
        if v["input_format"] not in ("auto", "tsv", "csv"):
            raise ConfigError(
                "input_format must be one of auto/tsv/csv, got "
                f"'{v['input_format']}'"
            )
        if v["exponent_mode"] not in ("power", "boxcox"):
            raise ConfigError(
                "exponent_mode must be 'power' or 'boxcox', got "
                f"'{v['exponent_mode']}'"
            )
        if not (0.0 < v["train_fraction"] < 1.0):
            raise ConfigError(
                "train_fraction must lie strictly in (0,1), got "
                f"{v['train_fraction']}"
            )
        if not (0.0 < v["val_fraction"] < 1.0):
            raise ConfigError(
                f"val_fraction must lie strictly in (0,1), got {v['val_fraction']}"
            )
        if v["per_user_cap"] < 0:
            raise ConfigError(
                f"per_user_cap must be >= 0 (0 disables), got {v['per_user_cap']}"
            )
        if v["q"] < 0:
            raise ConfigError(f"q must be >= 0 (0 means auto), got {v['q']}")
        if v["eig_tol"] <= 0:
            raise ConfigError(f"eig_tol must be positive, got {v['eig_tol']}")
        if v["drop_threshold"] < 0:
            raise ConfigError(
                f"drop_threshold must be >= 0, got {v['drop_threshold']}"
            )
        if v["min_user_interactions"] < 1 or v["min_item_interactions"] < 1:
            raise ConfigError("activity thresholds must be >= 1")
        if v["threads"] < 1:
            raise ConfigError(f"threads must be >= 1, got {v['threads']}")
        for key in ("k_values", "cohort_boundaries", "cold_start_caps"):
            if any(x < 1 for x in v[key]):
                raise ConfigError(f"{key} entries must be >= 1, got {v[key]}")
        if list(v["cohort_boundaries"]) != sorted(set(v["cohort_boundaries"])):
            raise ConfigError(
                "cohort_boundaries must be strictly increasing, got "
                f"{v['cohort_boundaries']}"
            )
        if (v["grid_learning_rates"] is None) != (v["grid_t_values"] is None):
            raise ConfigError(
                "grid_learning_rates and grid_t_values must be set together"
            )
        if v["grid_learning_rates"] is not None:
            # reject dead grid cells up front, before any training runs
            if any(lr <= 0 for lr in v["grid_learning_rates"]):
                raise ConfigError(
                    "grid_learning_rates must all be positive, got "
                    f"{v['grid_learning_rates']}"
                )
            if any(t < 0 for t in v["grid_t_values"]):
                raise ConfigError(
                    f"grid_t_values must all be >= 0, got {v['grid_t_values']}"
                )
        # nested configs validate their own fields; surface theirs as config
        # errors since they originate from config text here
        try:
            self.model_config()
            self.train_config()
            self.split_spec()
        except (ConfigError, DataError) as exc:
            raise ConfigError(str(exc))

    # -- derived stage objects -------------------------------------------

    def require(self, key: str) -> str:
        value = self.values[key]
        if value is None:
            raise ConfigError(
                f"config key '{key}' is required for this command "
                "(set it in the config file, WAVELETCF_"
                f"{key.upper()}, or a key=value override)"
            )
        return value

    def split_spec(self) -> SplitSpec:
        cap = self.values["per_user_cap"]
        return SplitSpec(
            train_fraction=self.values["train_fraction"],
            seed=seeds.child_seed(self.values["seed"], seeds.SPLIT),
            per_user_cap=None if cap == 0 else cap,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            layers=self.values["layers"],
            width=self.values["width"],
            t=self.values["t"],
            eta=self.values["eta"],
            seed=seeds.child_seed(self.values["seed"], seeds.INIT),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.values["batch_size"],
            learning_rate=self.values["learning_rate"],
            adam_beta1=self.values["adam_beta1"],
            adam_beta2=self.values["adam_beta2"],
            adam_eps=self.values["adam_eps"],
            eta=self.values["eta"],
            max_epochs=self.values["max_epochs"],
            patience=self.values["patience"],
            seed=self.values["seed"],
        )

    def eig_seed(self) -> int:
        return seeds.child_seed(self.values["seed"], seeds.EIG)

    def echo_lines(self) -> List[str]:
        """Sorted key=value lines for report headers."""
        out = []
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(str(x) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out.append(f"{key}={value}")
        return out


def resolve(
    config_path: Optional[str],
    overrides: Optional[List[str]] = None,
    environ=None,
) -> RunConfig:
    """Merge defaults < file < environment < flag overrides and validate."""
    values: Dict[str, object] = {}
    if config_path is not None:
        values.update(load_config_file(config_path))
    values.update(env_overrides(environ))
    values.update(flag_overrides(overrides or []))
    return RunConfig(values)
