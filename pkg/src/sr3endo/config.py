"""Flat-key run configuration, presets, and the resolved-config dump format.

A config file holds one ``key = value`` line per setting, values written as
JSON literals (``#`` starts a comment).  The same keys can be overridden on
the command line as ``--key value``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

from .denoiser import DenoiserConfig
from .schedule import NoiseSchedule, make_cosine, make_linear
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "preset": None,
    "seed": 0,
    "precision": "single",
    "model.base_channels": 64,
    "model.channel_multipliers": [1, 2, 4, 8, 16],
    "model.res_blocks_per_level": 1,
    "model.attention_resolutions": [],
    "model.dropout_p": 0.0,
    "model.groups": 16,
    "model.gamma_embed_dim": 64,
    "schedule.kind": "linear",
    "schedule.T": 2000,
    "schedule.beta_start": 1e-6,
    "schedule.beta_end": 1e-2,
    "schedule.cosine_s": 0.008,
    "train.batch_size": 8,
    "train.base_lr": 3e-6,
    "train.lr_milestones": [],
    "train.lr_factor": 1.0,
    "train.total_iters": 1_000_000,
    "train.val_every": 10_000,
    "train.ema_decay": None,
    "train.clip_max_norm": None,
    "train.p_norm": 2,
    "train.val_steps": None,
    "train.val_items": 4,
    "sample.clip_x0": False,
    "data.root": None,
    "data.toy": False,
    "data.toy_train_items": 512,
    "data.toy_val_items": 16,
    "data.hr_size": 512,
    "data.scale": 8,
    "data.val_fraction": 0.05,
}

# keys whose value may be null
NULLABLE = {"preset", "train.ema_decay", "train.clip_max_norm", "train.val_steps", "data.root"}

PRESETS: dict = {
    # first generation: vanilla U-Net, linear betas
    "gen1": {
        "model.channel_multipliers": [1, 2, 4, 8, 16],
        "model.res_blocks_per_level": 1,
        "model.attention_resolutions": [],
        "model.dropout_p": 0.0,
        "model.groups": 16,
        "schedule.kind": "linear",
        "schedule.T": 2000,
        "schedule.beta_start": 1e-6,
        "schedule.beta_end": 1e-2,
        "train.batch_size": 8,
        "train.base_lr": 3e-6,
        "train.total_iters": 1_000_000,
        "train.val_every": 10_000,
        "train.ema_decay": None,
        "train.clip_max_norm": None,
        "train.lr_milestones": [],
        "train.lr_factor": 1.0,
        "sample.clip_x0": False,
    },
    # second generation: attention, deeper blocks, cosine schedule, EMA, clipping
    "gen2": {
        "model.channel_multipliers": [1, 2, 4, 8, 16],
        "model.res_blocks_per_level": 2,
        "model.attention_resolutions": [16, 32, 64],
        "model.dropout_p": 0.1,
        "model.groups": 16,
        "schedule.kind": "cosine",
        "schedule.T": 2000,
        "schedule.cosine_s": 0.008,
        "train.batch_size": 8,
        "train.base_lr": 3e-6,
        "train.total_iters": 1_000_000,
        "train.val_every": 10_000,
        "train.ema_decay": 0.9999,
        "train.clip_max_norm": 1.0,
        "train.lr_milestones": [150_000, 230_000],
        "train.lr_factor": 0.5,
        # the cosine schedule's last beta is 0.999; see diffusion.reverse_step
        "sample.clip_x0": True,
    },
}

# desk-scale overrides applied on top of a preset by --toy
TOY_SCALE: dict = {
    "data.toy": True,
    "data.hr_size": 32,
    "data.scale": 4,
    "model.base_channels": 16,
    "model.channel_multipliers": [1, 2, 4, 8],
    "model.gamma_embed_dim": 16,
    "schedule.T": 200,
    "train.batch_size": 4,
    "train.base_lr": 5e-4,
    "train.total_iters": 2000,
    "train.val_every": 500,
    "train.val_steps": 50,
    "train.val_items": 4,
}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        if key not in NULLABLE:
            raise ConfigError(f"{key} may not be null")
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float) or key in ("train.ema_decay", "train.clip_max_norm"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        return list(value)
    if key == "train.val_steps":
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{key} must be a positive integer or null")
        return value
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def __getitem__(self, key):
        return self.values[key]

    def update(self, values: dict) -> "RunConfig":
        for k, v in values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {k!r}")
            self.values[k] = _coerce(k, v)
        return self

    @classmethod
    def resolve(cls, preset: str | None = None, toy: bool = False, file: str | Path | None = None,
                overrides: dict | None = None) -> "RunConfig":
        """Defaults < config file < preset < --toy scaling < explicit overrides."""
        cfg = cls()
        if file is not None:
            cfg.update(read_config_file(file))
        preset = preset or cfg["preset"]
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            if file is None or cfg["preset"] != preset:
                cfg.update(PRESETS[preset])
            cfg.update({"preset": preset})
        if toy and not (file is not None and cfg["data.toy"]):
            cfg.update(toy_overrides(cfg))
        if overrides:
            cfg.update(overrides)
        return cfg

    # derived objects ---------------------------------------------------------

    def denoiser_config(self) -> DenoiserConfig:
        v = self.values
        try:
            return DenoiserConfig(
                base_channels=v["model.base_channels"],
                channel_multipliers=tuple(v["model.channel_multipliers"]),
                res_blocks_per_level=v["model.res_blocks_per_level"],
                attention_resolutions=tuple(v["model.attention_resolutions"]),
                dropout_p=v["model.dropout_p"],
                groups=v["model.groups"],
                gamma_embed_dim=v["model.gamma_embed_dim"],
                image_size=v["data.hr_size"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                batch_size=v["train.batch_size"], base_lr=v["train.base_lr"],
                lr_milestones=tuple(v["train.lr_milestones"]), lr_factor=v["train.lr_factor"],
                total_iters=v["train.total_iters"], val_every=v["train.val_every"],
                ema_decay=v["train.ema_decay"], clip_max_norm=v["train.clip_max_norm"],
                p_norm=v["train.p_norm"], seed=v["seed"], val_steps=v["train.val_steps"],
                val_items=v["train.val_items"], clip_x0=v["sample.clip_x0"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self) -> NoiseSchedule:
        v = self.values
        try:
            if v["schedule.kind"] == "linear":
                return make_linear(v["schedule.T"], v["schedule.beta_start"], v["schedule.beta_end"])
            if v["schedule.kind"] == "cosine":
                return make_cosine(v["schedule.T"], v["schedule.cosine_s"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        raise ConfigError(f"schedule.kind must be 'linear' or 'cosine', got {v['schedule.kind']!r}")

    def validate(self, need_data: bool = False) -> None:
        """Cross-field checks, run before any work starts."""
        v = self.values
        levels = len(v["model.channel_multipliers"])
        if v["data.hr_size"] % (2 ** (levels - 1)):
            raise ConfigError(f"data.hr_size={v['data.hr_size']} must be divisible by 2^{levels - 1}")
        if v["data.hr_size"] % v["data.scale"]:
            raise ConfigError(f"data.hr_size={v['data.hr_size']} must be divisible by data.scale={v['data.scale']}")
        if v["precision"] not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")
        if not 0 <= v["data.val_fraction"] < 1:
            raise ConfigError("data.val_fraction must lie in [0, 1)")
        self.denoiser_config()
        self.train_config()
        self.schedule()
        if need_data and not v["data.toy"]:
            root = v["data.root"]
            if root is None:
                raise ConfigError("data.root is not set (use --data.root, SR3_DATA_ROOT or --toy)")
            if not (Path(root) / "manifest.tsv").is_file():
                raise ConfigError(f"data.root {root} has no manifest.tsv (run preprocess first)")

    def dump(self) -> str:
        return "".join(f"{k} = {json.dumps(self.values[k])}\n" for k in DEFAULTS)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump())


def toy_overrides(cfg: RunConfig) -> dict:
    """Desk-scale version of the current settings (see TOY_SCALE)."""
    out = dict(TOY_SCALE)
    ratio = cfg["schedule.T"] / out["schedule.T"]
    if cfg["schedule.kind"] == "linear":
        # keep the total noise of the long schedule with fewer, larger steps
        out["schedule.beta_end"] = min(cfg["schedule.beta_end"] * ratio, 0.5)
    if cfg["train.ema_decay"] is not None:
        out["train.ema_decay"] = 0.995
    if cfg["train.lr_milestones"]:
        out["train.lr_milestones"] = [1500, 1800]
    out["model.attention_resolutions"] = list(cfg["model.attention_resolutions"])
    if math.gcd(out["model.base_channels"], cfg["model.groups"]) != cfg["model.groups"]:
        out["model.groups"] = out["model.base_channels"]
    return out


def read_config_file(path) -> dict:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        values[k.strip()] = parse_value(v)
    return values
