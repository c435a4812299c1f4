"""Line-oriented ``key = value`` run configuration.

One flat namespace covers data generation, model shape, training and
decoding.  A key shared by two sections (``feat_dim``) sets both.
"""

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields

from .data import SyntheticConfig
from .decoding import FusionWeights
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = (
    ("data", SyntheticConfig),
    ("model", ModelConfig),
    ("train", TrainConfig),
    ("decode", FusionWeights),
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: FusionWeights = field(default_factory=FusionWeights)


# Desk-scale settings used by the acceptance suite and the CLI's --toy flag.
TOY = {
    "vocab_size": 6,
    "feat_dim": 16,
    "frames_per_token_mean": 3.0,
    "frames_per_token_std": 1.0,
    "gap_frames_mean": 4.0,
    "gap_frames_std": 1.0,
    "noise_std": 0.8,
    "confusion": 0.5,
    "n_utts": 1000,
    "n_test": 100,
    "text_only_multiplier": 9,
    "n_words": 40,
    "subsample": 2,
    "model_dim": 48,
    "heads": 4,
    "ff_dim": 96,
    "encoder_blocks": 2,
    "decoder_blocks": 3,
    "conv_kernel": 5,
    "lm_blocks": 1,
    "batch_size": 8,
    "max_steps": 2000,
    "warmup_steps": 200,
    "noam_scale": 1.0,
    "lm_steps": 400,
    "lm_batch_size": 16,
    "beam": 4,
    "length_penalty": 0.0,
}


def _key_owners():
    owners = {}
    for section, cls in SECTIONS:
        for f in fields(cls):
            owners.setdefault(f.name, []).append(section)
    return owners


def _parse_value(text, default):
    low = text.lower()
    if isinstance(default, bool):
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if default is None or isinstance(default, int):
        if low in ("inf", "none", "exhaustive"):
            return None
        return int(text)
    if isinstance(default, float):
        return float(text)  # accepts inf
    return text


def parse_config_text(text, source="<config>"):
    """Returns ``{key: raw string}`` after syntax and key checks."""
    owners = _key_owners()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in owners:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(values=None, base=None):
    """Applies ``{key: value}`` (strings or typed values) over ``base`` defaults."""
    owners = _key_owners()
    base = base or RunConfig()
    updates = {section: {} for section, _ in SECTIONS}
    for key, value in (values or {}).items():
        if key not in owners:
            raise ConfigError(f"unknown key {key!r}")
        for section in owners[key]:
            default = getattr(getattr(base, section), key)
            try:
                parsed = _parse_value(value, default) if isinstance(value, str) else value
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            updates[section][key] = parsed
    try:
        return RunConfig(**{
            section: dataclasses.replace(getattr(base, section), **updates[section])
            for section, _ in SECTIONS
        })
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=None, toy=False):
    base = build_config(TOY) if toy else RunConfig()
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read(), path))
    values.update(overrides or {})
    return build_config(values, base)


def _format_value(v):
    if v is None:
        return "inf"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v) if isinstance(v, float) else str(v)


def format_config(run):
    lines, seen = [], set()
    for section, _ in SECTIONS:
        lines.append(f"# {section}")
        for f in fields(getattr(run, section)):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name} = {_format_value(getattr(getattr(run, section), f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(run):
    return hashlib.sha256(format_config(run).encode("utf-8")).hexdigest()[:16]
