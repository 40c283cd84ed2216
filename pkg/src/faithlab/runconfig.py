"""Flat ``key = value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .unlearn.config import ConfigError, UnlearnConfig


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none", "auto"):
            return None
        return conv(text)
    parse.__name__ = f"optional_{conv.__name__}"
    return parse


def _strings(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    group: str
    help: str = ""


KEYS = [
    # paths
    Key("out_dir", str, "runs/default", "paths", "output directory of the subcommand"),
    Key("dataset", _optional(str), None, "paths", "dataset JSONL (default: <out_dir>/dataset.jsonl)"),
    Key("checkpoint", _optional(str), None, "paths", "memorized checkpoint (default: <out_dir>/model.npz)"),
    Key("resume", _optional(str), None, "paths", "checkpoint to continue memorization training from"),
    Key("baseline_checkpoint", _optional(str), None, "paths", "pre-unlearning checkpoint for eval"),
    # seeds
    Key("seed", int, 0, "seed", "root seed; split into world/model/unlearn/eval streams"),
    # world
    Key("n_famous", int, 200, "world"),
    Key("n_background", int, 600, "world"),
    Key("n_relations", int, 19, "world"),
    Key("chain_density", float, 0.6, "world"),
    Key("templates_per_relation", int, 4, "world"),
    Key("max_same_answer", int, 8, "world"),
    Key("forget_fraction", float, 0.05, "world"),
    Key("retain_fraction", float, 0.10, "world"),
    Key("test_fraction", float, 0.70, "world"),
    # model
    Key("d_model", int, 64, "model"),
    Key("n_layers", int, 3, "model"),
    Key("n_heads", int, 4, "model"),
    Key("d_ffn", int, 256, "model"),
    Key("max_seq_len", int, 32, "model"),
    Key("dtype", str, "float32", "model"),
    # memorization training
    Key("train_target", float, 95.0, "train", "base/corpus memorization target in percent"),
    Key("train_epochs", int, 200, "train", "epoch cap for memorization training"),
    Key("train_lr", float, 3e-3, "train"),
    Key("train_batch_size", int, 64, "train"),
    Key("train_extra_epochs", int, 5, "train"),
    # unlearning (names follow UnlearnConfig)
    Key("method", str, "klue", "unlearn"),
    Key("lr", _optional(float), None, "unlearn", "unlearning learning rate (auto: per-method default)"),
    Key("forget_weight", float, 0.7, "unlearn"),
    Key("retain_weight", float, 1.0, "unlearn"),
    Key("batch_size", int, 4, "unlearn"),
    Key("max_epochs", int, 150, "unlearn"),
    Key("ua_stop_threshold", float, 33.34, "unlearn"),
    Key("alpha", float, 10.0, "unlearn"),
    Key("n_mismatch", int, 5, "unlearn"),
    Key("neuron_ratio", float, 0.05, "unlearn"),
    Key("neuron_selection", str, "attribution", "unlearn"),
    Key("regularization", _bool, True, "unlearn"),
    Key("localization", _bool, True, "unlearn"),
    Key("sample_selection", _optional(_bool), None, "unlearn", "auto: on for klue only"),
    Key("beta_pref", float, 0.1, "unlearn"),
    Key("rmu_c", float, 20.0, "unlearn"),
    Key("rmu_layer", int, 1, "unlearn"),
    Key("rmu_alpha", float, 1.0, "unlearn"),
    Key("momentum", float, 0.0, "unlearn"),
    Key("checkpoint_every", int, 0, "unlearn"),
    # sweep
    Key("sweep_key", str, "neuron_ratio", "sweep", "unlearning key varied by the sweep subcommand"),
    Key("sweep_values", _strings, ("0.01", "0.05", "0.1", "0.5"), "sweep", "comma-separated values"),
]
KEY_INDEX = {k.name: k for k in KEYS}
STREAMS = ("world", "model", "unlearn", "eval")


def stream_seed(root: int, name: str) -> int:
    """Deterministic child seed of ``root`` for the named stream."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence(root, spawn_key=(tag,)).generate_state(1)[0])


class RunConfig:
    """Validated mapping of every configuration key to its value."""

    def __init__(self, values=None):
        self.values = {k.name: k.default for k in KEYS}
        for name, value in (values or {}).items():
            self.set(name, value)
        self.validate()

    def set(self, name, value):
        if name not in KEY_INDEX:
            raise ConfigError(f"unknown configuration key {name!r}")
        key = KEY_INDEX[name]
        if isinstance(value, str) or value is None:
            try:
                value = key.parse(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {exc}") from None
        self.values[name] = value

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def validate(self):
        fr = (self.forget_fraction, self.retain_fraction, self.test_fraction)
        if any(f < 0 for f in fr) or sum(fr) > 1 + 1e-12:
            raise ConfigError("split fractions must be non-negative and sum to at most 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        self.unlearn_config()

    @property
    def seeds(self):
        return {"root": self.seed, **{s: stream_seed(self.seed, s) for s in STREAMS}}

    def unlearn_config(self, **overrides) -> UnlearnConfig:
        kw = {name: self.values[name] for name in UnlearnConfig.field_names() if name in self.values}
        kw["seed"] = stream_seed(self.seed, "unlearn")
        kw.update(overrides)
        try:
            return UnlearnConfig(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def world_kwargs(self):
        return dict(seed=self.seeds["world"], n_famous=self.n_famous, n_background=self.n_background,
                    n_relations=self.n_relations, chain_density=self.chain_density,
                    templates_per_relation=self.templates_per_relation, max_same_answer=self.max_same_answer,
                    fractions=(self.forget_fraction, self.retain_fraction, self.test_fraction))

    def path(self, key, default_name):
        value = self.values[key]
        return Path(value) if value else Path(self.out_dir) / default_name

    def to_dict(self):
        out = {}
        for k, v in self.values.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"{source}:{n}: unknown configuration key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return RunConfig(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    group = None
    for k in KEYS:
        if k.group != group:
            group = k.group
            lines.append(f"# {group}")
        v = cfg.values[k.name]
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{k.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def versions():
    import sklearn

    from . import __version__
    from .microlm import CHECKPOINT_VERSION
    from .worldgen import GENERATOR_VERSION

    return {"faithlab": __version__, "generator": GENERATOR_VERSION, "checkpoint": CHECKPOINT_VERSION,
            "numpy": np.__version__, "scikit-learn": sklearn.__version__, "python": sys.version.split()[0]}
