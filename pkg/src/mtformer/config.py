"""Architecture configuration: presets, validation, parameter accounting.

A config fully determines the model: a four stage windowed encoder whose
channel widths double per stage, mirrored per task decoders coupled by a
shared attention block, and per task output heads.  Task ids are single
letters: S segmentation, D depth, N surface normals, K keypoints, E edges,
R reshading.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError

TASKS = ("S", "D", "N", "K", "E", "R")

PRESETS = ("mult-large", "mult-tiny", "desk-nano")


@dataclass(frozen=True)
class ArchConfig:
    img_size: int = 128
    patch_size: int = 4
    base_channels: int = 16
    stage_depths: tuple = (1, 1, 2, 1)
    encoder_heads: tuple = (1, 2, 4, 8)
    decoder_heads: tuple = (8, 4, 2, 1)
    window: int = 4
    shift: int = 2
    tasks: tuple = TASKS
    reference_task: str = "N"
    seg_classes: int = 8
    shared_attention: bool = True
    mlp_ratio: int = 4
    decoder_mlp_ratio: int = 2


def stage_channels(cfg: ArchConfig) -> tuple:
    """Encoder channel widths per stage: C, 2C, 4C, 8C."""
    return tuple(cfg.base_channels << s for s in range(4))


def decoder_channels(cfg: ArchConfig) -> tuple:
    """Decoder widths deepest first: 8C, 4C, 2C, C."""
    return stage_channels(cfg)[::-1]


def stage_grids(cfg: ArchConfig) -> tuple:
    """Square token grid side per encoder stage."""
    g = cfg.img_size // cfg.patch_size
    return tuple(g >> s for s in range(4))


def task_channels(cfg: ArchConfig, task: str) -> int:
    """Output channels of each task head."""
    if task == "S":
        return cfg.seg_classes
    if task == "N":
        return 3
    if task in ("D", "K", "E", "R"):
        return 1
    raise ConfigurationError(f"unknown task id {task!r}, valid ids are {', '.join(TASKS)}")


def validate(cfg: ArchConfig) -> list:
    """Return every violated constraint as a message; empty list means valid."""
    problems = []
    if cfg.patch_size != 4:
        # the task heads upsample exactly 4x, so only a 4 pixel patch lands
        # back on pixel resolution
        problems.append(f"patch_size must be 4, got {cfg.patch_size}")
    elif cfg.img_size % cfg.patch_size:
        problems.append(f"patch_size {cfg.patch_size} must divide img_size {cfg.img_size}")
    else:
        g = cfg.img_size // cfg.patch_size
        if g % 8:
            problems.append(
                f"token grid {g} (img {cfg.img_size} / patch {cfg.patch_size}) must be divisible by 8 "
                "so all four stages have integer grids")
        else:
            for side in stage_grids(cfg):
                if side % cfg.window:
                    problems.append(f"window {cfg.window} must divide stage grid side {side}")
    if cfg.window < 1:
        problems.append(f"window must be >= 1, got {cfg.window}")
    elif not 0 <= cfg.shift < cfg.window:
        problems.append(f"shift must satisfy 0 <= shift < window, got {cfg.shift} vs {cfg.window}")
    if cfg.base_channels < 4 or cfg.base_channels % 4:
        problems.append(
            f"base_channels must be a positive multiple of 4 for the head upsampling, got {cfg.base_channels}")
    for name, tup in (("stage_depths", cfg.stage_depths),
                      ("encoder_heads", cfg.encoder_heads),
                      ("decoder_heads", cfg.decoder_heads)):
        if len(tup) != 4 or any(int(v) < 1 for v in tup):
            problems.append(f"{name} must be 4 positive ints, got {tup}")
    if len(cfg.encoder_heads) == 4 and cfg.base_channels % 4 == 0:
        for s, (ch, m) in enumerate(zip(stage_channels(cfg), cfg.encoder_heads)):
            if m >= 1 and ch % m:
                problems.append(f"encoder_heads[{s}]={m} must divide stage channels {ch}")
    if len(cfg.decoder_heads) == 4 and cfg.base_channels % 4 == 0:
        for s, (ch, m) in enumerate(zip(decoder_channels(cfg), cfg.decoder_heads)):
            if m >= 1 and ch % m:
                problems.append(f"decoder_heads[{s}]={m} must divide decoder channels {ch}")
    if not cfg.tasks:
        problems.append("tasks must be a non-empty subset of " + ",".join(TASKS))
    else:
        unknown = [t for t in cfg.tasks if t not in TASKS]
        if unknown:
            problems.append(f"unknown task ids {unknown}, valid ids are {', '.join(TASKS)}")
        if len(set(cfg.tasks)) != len(cfg.tasks):
            problems.append(f"duplicate task ids in {cfg.tasks}")
        if cfg.reference_task not in cfg.tasks:
            problems.append(
                f"reference_task {cfg.reference_task!r} must be one of the active tasks {cfg.tasks}")
    if cfg.seg_classes < 2:
        problems.append(f"seg_classes must be >= 2, got {cfg.seg_classes}")
    if cfg.mlp_ratio < 1 or cfg.decoder_mlp_ratio < 1:
        problems.append("mlp ratios must be >= 1, got "
                        f"{cfg.mlp_ratio} / {cfg.decoder_mlp_ratio}")
    return problems


def require_valid(cfg: ArchConfig) -> ArchConfig:
    problems = validate(cfg)
    if problems:
        raise ConfigurationError("invalid config: " + "; ".join(problems))
    return cfg


def preset(name: str) -> ArchConfig:
    """Named architectures: the published large/tiny pair and a desk scale one."""
    if name == "mult-large":
        return ArchConfig(img_size=224, patch_size=4, base_channels=192,
                          stage_depths=(2, 2, 18, 2), encoder_heads=(6, 12, 24, 48),
                          decoder_heads=(48, 24, 12, 6), window=7, shift=3)
    if name == "mult-tiny":
        return ArchConfig(img_size=224, patch_size=4, base_channels=96,
                          stage_depths=(2, 2, 6, 2), encoder_heads=(6, 12, 24, 48),
                          decoder_heads=(48, 24, 12, 6), window=7, shift=3)
    if name == "desk-nano":
        return ArchConfig(img_size=128, patch_size=4, base_channels=16,
                          stage_depths=(1, 1, 2, 1), encoder_heads=(1, 2, 4, 8),
                          decoder_heads=(8, 4, 2, 1), window=4, shift=2)
    raise ConfigurationError(f"unknown preset {name!r}, valid presets: {', '.join(PRESETS)}")


# ------------------------------------------------------------ parameter count

def linear_params(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out + (c_out if bias else 0)


def _norm_params(c: int) -> int:
    return 2 * c


def _table_params(window: int, heads: int) -> int:
    return (2 * window - 1) ** 2 * heads


def _block_params(c: int, heads: int, window: int, ratio: int) -> int:
    """One pre-norm attention block: 2 norms, q/k/v/out, bias table, 2 layer MLP."""
    hidden = ratio * c
    return (_norm_params(c) + 3 * linear_params(c, c) + linear_params(c, c)
            + _table_params(window, heads) + _norm_params(c)
            + linear_params(c, hidden) + linear_params(hidden, c))


@dataclass(frozen=True)
class ParamCount:
    encoder: int
    decoder: dict
    heads: dict
    total: int


def count_parameters(cfg: ArchConfig) -> ParamCount:
    """Exact learnable scalar count implied by the architecture; no tensors built.

    The breakdown components always sum to the total.  The shared q/k
    projections and their bias table are owned by the reference task's
    decoder, so with shared attention on every other task is strictly
    lighter than with it off.
    """
    require_valid(cfg)
    c = cfg.base_channels
    enc_ch = stage_channels(cfg)

    encoder = linear_params(3 * cfg.patch_size ** 2, c)
    for s in range(4):
        encoder += cfg.stage_depths[s] * _block_params(
            enc_ch[s], cfg.encoder_heads[s], cfg.window, cfg.mlp_ratio)
        if s < 3:
            encoder += _norm_params(4 * enc_ch[s]) + linear_params(4 * enc_ch[s], 2 * enc_ch[s], bias=False)

    dec_ch = decoder_channels(cfg)
    decoders = {}
    heads = {}
    for t in cfg.tasks:
        n = linear_params(dec_ch[0], dec_ch[0])  # per task stream init from the deepest feature
        for i in range(4):
            ci = dec_ch[i]
            ratio = cfg.decoder_mlp_ratio
            n += linear_params(ci, ci)  # additive skip fusion
            n += _block_params(ci, cfg.decoder_heads[i], cfg.window, ratio)  # block 1, self attention
            # block 2 per task part: norms, value and out projections, MLP
            n += (_norm_params(ci) + linear_params(ci, ci) + linear_params(ci, ci)
                  + _norm_params(ci) + linear_params(ci, ratio * ci) + linear_params(ratio * ci, ci))
            cross = 2 * linear_params(ci, ci) + _table_params(cfg.window, cfg.decoder_heads[i])
            if not cfg.shared_attention or t == cfg.reference_task:
                n += cross  # q/k and bias table, once per stage when shared
            if i < 3:
                n += linear_params(ci, 2 * ci, bias=False)  # patch expand
        decoders[t] = n
        heads[t] = (linear_params(c, 2 * c, bias=False)
                    + linear_params(c // 2, c, bias=False)
                    + linear_params(c // 4, task_channels(cfg, t)))

    total = encoder + sum(decoders.values()) + sum(heads.values())
    return ParamCount(encoder=encoder, decoder=decoders, heads=heads, total=total)


# ------------------------------------------------------------- serialization

_TUPLE_FIELDS = {"stage_depths", "encoder_heads", "decoder_heads"}
_BOOL_FIELDS = {"shared_attention"}
_STR_FIELDS = {"reference_task"}


def to_text(cfg: ArchConfig) -> str:
    """Flat key=value form, one field per line, declaration order."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            text = ",".join(str(int(v)) for v in value)
        elif f.name == "tasks":
            text = ",".join(value)
        elif f.name in _BOOL_FIELDS:
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> ArchConfig:
    """Parse key=value lines; unknown keys are errors, missing keys keep defaults."""
    known = {f.name for f in fields(ArchConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate config key {key!r}")
        try:
            if key in _TUPLE_FIELDS:
                values[key] = tuple(int(v) for v in val.split(","))
            elif key == "tasks":
                values[key] = tuple(v.strip().upper() for v in val.split(",") if v.strip())
            elif key in _BOOL_FIELDS:
                if val.lower() not in ("true", "false", "0", "1", "on", "off"):
                    raise ValueError(val)
                values[key] = val.lower() in ("true", "1", "on")
            elif key in _STR_FIELDS:
                values[key] = val.upper()
            else:
                values[key] = int(val)
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return ArchConfig(**values)


def save(cfg: ArchConfig, path) -> None:
    Path(path).write_text(to_text(cfg))


def load(path) -> ArchConfig:
    return from_text(Path(path).read_text())


def resolve(config_path=None, preset_name=None) -> ArchConfig:
    """One of --config / --preset, used by every CLI entry point."""
    if (config_path is None) == (preset_name is None):
        raise ConfigurationError("give exactly one of a config path or a preset name")
    cfg = load(config_path) if config_path else preset(preset_name)
    return require_valid(cfg)
