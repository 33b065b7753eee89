"""Dataclass configs for the scene generator and the model.

Both round-trip through JSON; the CLI loads a config file first and then
applies flag overrides on top.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class RenderConfig:
    """Knobs for scene sampling and rasterization.

    The wide count/pitch/overhang defaults span the intended population;
    at small canvases the sampler clamps the joint (count, pitch) draw to
    what fits, so the effective count range shrinks with image width.
    """

    image_size: tuple[int, int] = (128, 128)  # (H, W)
    margin_x: int = 16
    count_range: tuple[int, int] = (8, 60)            # anode plates
    pitch_range: tuple[float, float] = (6.0, 40.0)    # anode-to-anode, px
    overhang_range: tuple[float, float] = (4.0, 20.0)
    thickness_range: tuple[int, int] = (1, 3)
    top_y_frac: tuple[float, float] = (0.08, 0.18)
    anode_y_frac: tuple[float, float] = (0.55, 0.80)
    anode_y_jitter: float = 2.0
    cathode_x_jitter_frac: float = 0.1

    bg_level: float = 205.0
    bg_gradient: float = 18.0
    stroke_level: tuple[float, float] = (40.0, 90.0)
    noise_sigma: float = 4.0
    blur_sigma: float = 0.7
    blur_sigma_strong: float = 1.8
    strong_blur_prob: float = 0.3

    tilt_max: float = 0.30
    si_strength: float = 0.65
    tray_width: int = 8
    tab_height: int = 10

    pure_prob: float = 0.35
    attr_count_weights: tuple[float, float, float] = (0.55, 0.30, 0.15)
    shot_probs: tuple[float, float, float] = (0.25, 0.50, 0.25)  # close, medium, long
    shot_pitch_scale: dict[str, float] = field(
        default_factory=lambda: {"close": 1.5, "medium": 1.0, "long": 0.65})
    shot_count_scale: dict[str, float] = field(
        default_factory=lambda: {"close": 0.5, "medium": 1.0, "long": 1.4})
    density_tough_pitch: float = 6.0
    train_fraction: float = 0.6

    def validate(self) -> None:
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ConfigurationError(f"image_size {self.image_size} too small")
        for name in ("count_range", "pitch_range", "overhang_range", "thickness_range",
                     "top_y_frac", "anode_y_frac", "stroke_level"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} is empty: {lo} > {hi}")
        if self.count_range[0] < 2:
            raise ConfigurationError("need at least 2 anode plates")
        usable = w - 2 * self.margin_x
        if self.pitch_range[0] * (self.count_range[0] - 1) > usable:
            raise ConfigurationError(
                f"minimum scene ({self.count_range[0]} plates at pitch {self.pitch_range[0]}) "
                f"exceeds usable width {usable}")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class ModelConfig:
    """Architecture, loss, and training-recipe knobs.

    The desk-scale defaults keep the five-level topology of the full-size
    model while shrinking widths and input resolution.
    """

    input_size: int = 128
    encoder_channels: tuple[int, int, int, int, int] = (16, 32, 64, 96, 128)
    decoder_channels: tuple[int, int, int, int, int] = (16, 32, 64, 96, 128)
    ms_dilations: tuple[int, ...] = (1, 2, 4, 6)
    ms_use_gap: bool = True
    pfm_kernel_size: int = 3
    use_pfm: bool = True
    use_cp: bool = True
    use_lp: bool = True
    cp_downsample: str = "mask"  # or "features": which side of Eq-style mask gating gets resized

    lambda_point: float = 1.0
    lambda_line: float = 1.0
    lambda_count: float = 0.1

    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_size: int = 30
    lr_decay_rate: float = 0.9
    epochs: int = 30
    batch_size: int = 12
    max_steps: int | None = None
    flip_prob: float = 0.5
    seed: int = 0
    prompt_seed: int = 1234

    def validate(self) -> None:
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ConfigurationError("encoder/decoder need exactly 5 channel widths")
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ConfigurationError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not self.ms_dilations and not self.ms_use_gap:
            raise ConfigurationError("multi-scale module needs at least one branch")
        if min(self.lambda_point, self.lambda_line, self.lambda_count) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.cp_downsample not in ("mask", "features"):
            raise ConfigurationError(f"cp_downsample must be 'mask' or 'features', got {self.cp_downsample!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")


def _coerce(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[f.name] = value
    cfg = cls(**kwargs)
    cfg.validate()
    return cfg


def render_config_from_dict(data: dict) -> RenderConfig:
    return _coerce(RenderConfig, data)


def model_config_from_dict(data: dict) -> ModelConfig:
    return _coerce(ModelConfig, data)


def config_to_json(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n"


def load_render_config(path: str | Path) -> RenderConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return render_config_from_dict(json.load(fh))


def load_model_config(path: str | Path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return model_config_from_dict(json.load(fh))
