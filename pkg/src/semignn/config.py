"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Training keys are bare (``alpha``, ``lr``, ``d_final`` ...) with walk settings
under ``walk.``; generator keys live under ``synth.``; ``seed`` sets both
random seeds. Every key is checked against the table below and an unknown
key is an error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .synth import SynthConfig
from .training import TrainConfig
from .walker import WalkConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _float_list(text: str) -> tuple:
    return tuple(float(p) for p in text.replace(",", " ").split() if p)


TRAIN_KEYS = {
    "alpha": float, "lam": float, "lr": float, "lr_decay": float, "batch_size": int,
    "epochs": int, "Q": int, "d0": int, "mlp": _int_list, "d_final": int,
    "edge_weight_transform": str, "view_attention": str, "walks_once": _bool,
}
WALK_KEYS = {"walks_per_node": int, "walk_length": int, "window": int}
SYNTH_KEYS = {
    "user_count": int, "fraud_rate": float, "labeled_fraction": float, "split": _float_list,
    "p_in": float, "p_out": float, "fraud_block_prob": float, "views": int, "vocab_size": int,
    "planted": int, "draws": int, "signal": float, "background": float,
}
PATH_KEYS = ("data", "checkpoint", "telemetry", "report", "out", "truth")
ALIASES = {"lambda": "lam"}


def known_keys() -> list:
    keys = list(TRAIN_KEYS) + [f"walk.{k}" for k in WALK_KEYS]
    keys += [f"synth.{k}" for k in SYNTH_KEYS] + list(PATH_KEYS) + ["seed"]
    return keys


def _parser_for(key: str):
    if key in TRAIN_KEYS:
        return TRAIN_KEYS[key]
    if key.startswith("walk.") and key[5:] in WALK_KEYS:
        return WALK_KEYS[key[5:]]
    if key.startswith("synth.") and key[6:] in SYNTH_KEYS:
        return SYNTH_KEYS[key[6:]]
    if key in PATH_KEYS:
        return str
    if key == "seed":
        return int
    return None


def parse_value(key: str, text: str):
    key = ALIASES.get(key, key)
    parse = _parser_for(key)
    if parse is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return key, parse(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def read_config_file(path) -> dict:
    """Parse a config file; ``#`` starts a comment, blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            try:
                k, v = parse_value(key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            out[k] = v
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        """File values first, then ``overrides`` (already parsed) on top."""
        vals = read_config_file(path) if path else {}
        vals.update(overrides or {})
        cfg = cls(vals)
        cfg.train()  # surface invalid combinations early
        cfg.synth()
        return cfg

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_value(self, key: str, value) -> "RunConfig":
        return RunConfig({**self.values, key: value})

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def train(self) -> TrainConfig:
        kw = {k: v for k, v in self.values.items() if k in TRAIN_KEYS}
        walk = {k[5:]: v for k, v in self.values.items() if k.startswith("walk.")}
        try:
            return TrainConfig(walk=WalkConfig(rng_seed=self.seed, **walk), rng_seed=self.seed, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def synth(self) -> SynthConfig:
        kw = {k[6:]: v for k, v in self.values.items() if k.startswith("synth.")}
        cfg = SynthConfig(rng_seed=self.seed, **kw)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg


def sweepable(key: str) -> bool:
    key = ALIASES.get(key, key)
    return key in TRAIN_KEYS or key.startswith(("walk.", "synth.")) and _parser_for(key) is not None

