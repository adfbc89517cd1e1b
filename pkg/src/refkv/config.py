"""Run configuration: a flat table of dotted keys with typed defaults.

Config files are UTF-8 text with optional ``[section]`` headers and
``key = value`` lines; a key ``T`` under ``[schedule]`` is the dotted key
``schedule.T``.  Keys before the first header are top level.  Unknown keys
and unparsable values are errors.  Command-line overrides use the same
dotted names.
"""
from __future__ import annotations

import configparser
from pathlib import Path

from . import codec, diffusion, identity, refcond

ROOT = "__root__"

DEFAULTS = {
    "seed": 0,
    "steps": 100,
    "guidance_scale": 1.5,
    "n_refs": 5,
    "schedule.T": 1000,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 2e-2,
    "model.mechanism": "cachekv",
    "model.base_channels": 32,
    "model.channel_mult": "1,2",
    "model.num_res_blocks": 1,
    "model.attention_resolutions": "4",
    "model.timestep_embed_dim": 128,
    "model.heads": 1,
    "model.groups": 8,
    "model.max_refs": 5,
    "codec.mode": "orthogonal",
    "codec.image_size": 32,
    "codec.latent_size": 8,
    "codec.latent_channels": 4,
    "codec.seed": 0,
    "embedder.seed": 0,
    "loss.lambda_time_id": 0.1,
    "loss.scaling_mode": "sqrt_alpha_bar",
    "train.steps": 1500,
    "train.batch_size": 8,
    "train.lr": 1e-3,
    "train.grad_clip": 1.0,
    "train.condition_dropout_prob": 0.1,
    "train.drop_lq": False,
    "train.preset": "training",
    "train.augment": True,
    "train.checkpoint_every": 500,
    "train.log_every": 50,
    "degrade.subsampling": "4:4:4",
    "data.threshold": 0.4,
    "data.min_test_dist": 0.1,
    "data.ratios": "0.9,0.05,0.05",
}


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key, value):
    """Convert ``value`` to the type of ``key``'s default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(value, str):
        value = str(value)
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
    return value.strip()


def parse_text(text: str, source="<config>") -> dict:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{ROOT}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            name = key if section == ROOT else f"{section}.{key}"
            out[name] = coerce(name, value)
    return out


def load(path=None, overrides=None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides`` (dotted keys)."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        cfg.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = coerce(key, value)
    return cfg


def to_text(cfg: dict) -> str:
    """Render ``cfg`` in the file format; ``parse_text`` reads it back unchanged."""
    top = [k for k in cfg if "." not in k]
    lines = [f"{k} = {_fmt(cfg[k])}" for k in top]
    sections = {}
    for k in cfg:
        if "." in k:
            sec, name = k.split(".", 1)
            sections.setdefault(sec, []).append((name, cfg[k]))
    for sec, items in sections.items():
        lines.append("")
        lines.append(f"[{sec}]")
        lines.extend(f"{name} = {_fmt(v)}" for name, v in items)
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _ints(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


# ---------------------------------------------------------------- builders


def unet_config(cfg) -> refcond.UNetConfig:
    return refcond.UNetConfig(
        latent_channels=cfg["codec.latent_channels"],
        latent_size=cfg["codec.latent_size"],
        base_channels=cfg["model.base_channels"],
        channel_mult=_ints(cfg["model.channel_mult"]),
        num_res_blocks=cfg["model.num_res_blocks"],
        attention_resolutions=_ints(cfg["model.attention_resolutions"]),
        timestep_embed_dim=cfg["model.timestep_embed_dim"],
        mechanism=cfg["model.mechanism"],
        heads=cfg["model.heads"],
        groups=cfg["model.groups"],
        max_refs=cfg["model.max_refs"],
    ).validate()


def codec_config(cfg) -> codec.CodecConfig:
    return codec.CodecConfig(
        image_size=cfg["codec.image_size"],
        latent_size=cfg["codec.latent_size"],
        latent_channels=cfg["codec.latent_channels"],
        mode=cfg["codec.mode"],
        seed=cfg["codec.seed"],
    )


def schedule(cfg) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])


def guidance(cfg) -> diffusion.GuidanceConfig:
    return diffusion.GuidanceConfig(cfg["guidance_scale"], cfg["train.condition_dropout_prob"])


def loss_config(cfg) -> identity.LossConfig:
    return identity.LossConfig(cfg["loss.lambda_time_id"], cfg["loss.scaling_mode"])


def ratios(cfg) -> tuple:
    return tuple(float(x) for x in cfg["data.ratios"].split(","))
