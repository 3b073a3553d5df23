"""Run configuration: an INI file (``key = value`` under sections) mapped onto dataclasses.

Defaults carry the published training constants; ``desk_config()`` is the
small profile that trains on one CPU core in minutes.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

MODES = ("diffusion_only", "transformer_only", "no_pcem", "full")


@dataclass
class DataConfig:
    train_scenes: int = 32
    val_scenes: int = 8
    test_scenes: int = 16
    height: int = 64
    width: int = 64
    num_regions: int = 8
    texture_noise_sigma: float = 0.15
    factor: int = 8
    flip_rate: float = 0.1
    boundary_shift: int = 1
    table: str = ""  # optional path to a source<TAB>target table


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    extraction_step: int = 1000
    stochastic_extraction: bool = False
    base_channels: int = 32
    enc_mult: Tuple[int, ...] = (1, 2, 2, 4, 4)
    dec_channels: Tuple[int, ...] = (128, 128, 64, 64, 32)
    pretrain_steps: int = 500
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 8


@dataclass
class TransformerSection:
    depth: int = 12
    heads: int = 4
    d: int = 128
    patch_size: int = 8
    stage_channels: Tuple[int, ...] = (64, 64, 32, 32, 32)


@dataclass
class TrainConfig:
    mode: str = "full"
    crop_size: int = 224
    crops_per_image: int = 50
    batch_size: int = 8
    learning_rate: float = 0.01
    weight_decay: float = 0.01
    lam: float = 0.5
    tau: float = 0.9
    fused_channels: int = 64
    max_steps: int = 5000
    prototype_momentum: float = 0.0  # 0 = prototypes from the current batch only
    ablation_seeds: Tuple[int, ...] = (0, 1, 2)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    transformer: TransformerSection = field(default_factory=TransformerSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("data", "diffusion", "transformer", "train")

    def validate(self) -> "RunConfig":
        t = self.train
        if t.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {t.mode!r}")
        for name in ("crop_size", "crops_per_image", "batch_size", "fused_channels"):
            if getattr(t, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if t.learning_rate <= 0 or t.max_steps < 0:
            raise ValueError("learning_rate must be positive and max_steps non-negative")
        if not 0.0 <= t.lam <= 1.0 or not -1.0 <= t.tau <= 1.0:
            raise ValueError("lam must lie in [0, 1] and tau in [-1, 1]")
        d = self.diffusion
        if not 1 <= d.extraction_step <= d.T:
            raise ValueError(f"extraction_step must lie in 1..{d.T}")
        if len(d.dec_channels) != 5 or len(self.transformer.stage_channels) != 5:
            raise ValueError("dec_channels and stage_channels need five entries")
        if t.crop_size % self.transformer.patch_size or t.crop_size % 16:
            raise ValueError("crop_size must be divisible by the patch size and by 16")
        return self

    # serialization ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"seed = {_fmt(self.seed)}", ""]
        for sec in self.SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def section_hash(self, *sections: str) -> str:
        text = self.to_text() if not sections else "\n".join(
            f"[{s}]\n" + "\n".join(
                f"{f.name} = {_fmt(getattr(getattr(self, s), f.name))}"
                for f in sorted(dataclasses.fields(getattr(self, s)), key=lambda f: f.name)
            ) for s in sections
        )
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def config_hash(self) -> str:
        return self.section_hash()

    @property
    def denoiser_hash(self) -> str:
        # extraction settings do not change the pretrained weights
        d = self.diffusion
        keys = sorted(f.name for f in dataclasses.fields(d)
                      if f.name not in ("extraction_step", "stochastic_extraction"))
        text = "\n".join(f"{k} = {_fmt(getattr(d, k))}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig" = None) -> "RunConfig":
        cfg = _deepcopy(base) if base is not None else cls()
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string("[__root__]\n" + text)
        for key, raw in parser["__root__"].items():
            if key == "profile":
                continue
            if key != "seed":
                raise ValueError(f"unknown top-level key {key!r}")
            cfg.seed = int(raw)
        for sec in parser.sections():
            if sec == "__root__":
                continue
            if sec not in cls.SECTIONS:
                raise ValueError(f"unknown section [{sec}]")
            obj = getattr(cfg, sec)
            types = {f.name: f for f in dataclasses.fields(obj)}
            for key, raw in parser[sec].items():
                if key not in types:
                    raise ValueError(f"unknown key {key!r} in [{sec}]")
                setattr(obj, key, _parse(raw, getattr(obj, key)))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        base = None
        for line in text.splitlines():
            k, _, v = line.partition("=")
            if k.strip() == "profile" and v.strip() == "desk":
                base = desk_config()
        return cls.from_text(text, base)


def _deepcopy(cfg: RunConfig) -> RunConfig:
    return RunConfig(
        seed=cfg.seed,
        **{s: dataclasses.replace(getattr(cfg, s)) for s in RunConfig.SECTIONS},
    )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _parse(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        elem = type(like[0]) if like else int
        return tuple(elem(v) for v in raw.split(",") if v.strip())
    return raw


def desk_config(seed: int = 0) -> RunConfig:
    """64x64 scenes, factor 8, depth-4 transformer, short schedules.

    256 training scenes keep the first branch from memorising label noise within
    600 steps; with fewer scenes the confidence mask shrinks quickly.
    """
    cfg = RunConfig(seed=seed)
    cfg.data = dataclasses.replace(cfg.data, train_scenes=256)
    cfg.diffusion = dataclasses.replace(
        cfg.diffusion, base_channels=16, dec_channels=(32, 32, 32, 16, 16),
        pretrain_steps=500, extraction_step=100,
    )
    cfg.transformer = dataclasses.replace(cfg.transformer, depth=4, d=64, stage_channels=(64, 32, 32, 16, 16))
    cfg.train = dataclasses.replace(
        cfg.train, crop_size=64, learning_rate=1e-3, fused_channels=32, max_steps=600,
    )
    return cfg.validate()
