"""Run configuration: a JSON document with ``dataset``, ``model`` and ``train`` sections.

Any field can be overridden from the command line with ``--set section.key=value``
(values are parsed as JSON, falling back to a plain string).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .positions import scheme_for
from .probe import NUM_SLOTS, PromptFormat
from .train import TrainConfig

DEFAULTS: dict = {
    "scheme": "bapa",
    "seeds": [0, 1, 2],
    "out": "runs/default",
    "workers": 1,
    "dataset": {
        "seed": 0,
        "vocab_size": 256,
        "num_keys": 40,
        "patch_dim": 16,
        "cell_size": 1,
        "system_len": 2,
        "train_size": 20000,
        "disjoint": False,
    },
    "model": {
        "embed_dim": 64,
        "num_heads": 4,
        "head_dim": 16,
        "num_layers": 2,
        "enc_hidden": 64,
        "mlp_hidden": 128,
        "encoder": "per_patch",
        # a 9-token image span is tiny next to the slowest wavelength at base 1e4;
        # a small base keeps span/wavelength closer to a full-size model
        "rope_base": 20.0,
        "dtype": "float64",
    },
    "train": {
        "steps": 1600,
        "batch_size": 64,
        "lr": 1e-3,
        "clip_norm": 1.0,
        "align_steps": 400,
        "align_temperature": 0.1,
        "log_every": 50,
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = _merge(cfg, user)
    for ov in overrides:
        keys, value = parse_override(ov)
        nested: dict = value
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Check every module precondition up front, before any work starts."""
    scheme_for(cfg["scheme"])
    if not cfg["seeds"] or not all(isinstance(s, int) for s in cfg["seeds"]):
        raise ConfigError("seeds must be a non-empty list of integers")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    d = cfg["dataset"]
    if d["vocab_size"] < NUM_SLOTS + 1:
        raise ConfigError(f"dataset.vocab_size must be >= {NUM_SLOTS + 1}")
    if not 1 <= d["num_keys"] <= d["vocab_size"] - NUM_SLOTS:
        raise ConfigError("dataset.num_keys must be in [1, vocab_size - 9]")
    if d["patch_dim"] < 1 or d["cell_size"] < 1 or d["system_len"] < 0 or d["train_size"] < 0:
        raise ConfigError("dataset sizes must be non-negative (patch_dim, cell_size >= 1)")
    model_config(cfg, cfg["scheme"], cfg["seeds"][0])
    train_config(cfg, cfg["seeds"][0])


def model_config(cfg: dict, scheme: str, seed: int) -> ModelConfig:
    d = cfg["dataset"]
    prompt = PromptFormat(d["vocab_size"], d["system_len"])
    return ModelConfig(
        **cfg["model"],
        patch_dim=d["patch_dim"],
        text_vocab_size=prompt.text_vocab_size,
        grid_side=3 * d["cell_size"],
        scheme=scheme,
        seed=seed,
    )


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=seed)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
