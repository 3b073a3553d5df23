"""Synthetic cross-resolution scenes.

A scene is a seeded Voronoi partition of the grid into target classes, rendered
as an RGB image (one base colour per class plus Gaussian texture noise). The
weak supervision is a block-majority downsample of the high-resolution labels,
split back into source classes and corrupted by misregistration and flips.

Datasets are stored as one directory per scene holding ``.npy`` arrays (the
numpy ``.npy`` v1 format, lossless) next to a tab-separated ``manifest``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .label_space import LabelSpace, UnificationTable, default_target_space, unify, inverse_unify

# base colours; pairwise max-channel distance >= 0.3
PALETTE = np.array(
    [
        [0.75, 0.35, 0.35],  # Built-up
        [0.15, 0.45, 0.15],  # Tree canopy
        [0.75, 0.75, 0.30],  # Low vegetation
        [0.15, 0.25, 0.70],  # Water
        [0.45, 0.05, 0.75],
        [0.45, 0.90, 0.80],
    ]
)
MANIFEST_NAME = "manifest"
MANIFEST_HEADER = "id\tseed\theight\twidth\tlr_height\tlr_width\tfactor"
ARRAY_NAMES = ("image", "hr_labels", "lr_labels", "corruption_mask")
MAX_CLASS_RESAMPLES = 100


class DatasetError(Exception):
    pass


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_regions: int = 8
    target_space: LabelSpace = field(default_factory=default_target_space)
    texture_noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        if self.num_regions < 2:
            raise ValueError("num_regions must be >= 2")
        if self.num_regions > self.height * self.width:
            raise ValueError("more regions than pixels")
        if not 0.0 <= self.texture_noise_sigma <= 1.0:
            raise ValueError("texture_noise_sigma must lie in [0, 1]")
        if self.target_space.num_classes > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} target classes can be rendered")


@dataclass
class NoiseModel:
    flip_rate: float = 0.1
    boundary_shift: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate < 1.0:
            raise ValueError("flip_rate must lie in [0, 1)")
        if self.boundary_shift < 0:
            raise ValueError("boundary_shift must be >= 0")


@dataclass
class ScenePair:
    image: np.ndarray
    hr_labels: np.ndarray
    lr_labels: np.ndarray
    corruption_mask: np.ndarray
    factor: int
    seed: int = 0
    scene_id: str = ""

    def __eq__(self, other):
        if not isinstance(other, ScenePair):
            return NotImplemented
        return (
            self.factor == other.factor
            and self.seed == other.seed
            and self.scene_id == other.scene_id
            and all(
                _same_array(getattr(self, n), getattr(other, n)) for n in ARRAY_NAMES
            )
        )


def _same_array(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


def voronoi_partition(height, width, num_regions, rng) -> np.ndarray:
    """Region index per pixel; region seeds are distinct pixels so no region is empty."""
    flat = rng.choice(height * width, size=num_regions, replace=False)
    sy, sx = np.divmod(flat, width)
    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
    return np.argmin(d2, axis=-1)


def generate_scene(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    classes = np.asarray(spec.target_space.class_ids)
    C = len(classes)
    regions = voronoi_partition(spec.height, spec.width, spec.num_regions, rng)
    # redraw until the scene shows min(num_regions, C) distinct classes
    want = min(spec.num_regions, C)
    for _ in range(MAX_CLASS_RESAMPLES):
        assign = rng.integers(0, C, size=spec.num_regions)
        if len(np.unique(assign)) == want:
            break
    else:
        raise RuntimeError("could not draw a class assignment covering every class")
    hr_labels = classes[assign][regions]
    palette_idx = assign[regions]
    image = PALETTE[palette_idx] + rng.normal(0.0, 1.0, size=(spec.height, spec.width, 3)) * spec.texture_noise_sigma
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, hr_labels.astype(np.int64)


def block_majority_downsample(labels: np.ndarray, factor: int, ignore_id: Optional[int] = None) -> np.ndarray:
    """Most frequent class per factor x factor block; ties go to the lowest id.

    ``ignore_id`` pixels do not vote; an all-ignore block yields ``ignore_id``.
    """
    labels = np.asarray(labels)
    H, W = labels.shape
    if factor < 1 or H % factor or W % factor:
        raise ValueError(f"label grid {H}x{W} is not divisible by factor {factor}")
    blocks = labels.reshape(H // factor, factor, W // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(H // factor, W // factor, factor * factor)
    valid = blocks != ignore_id if ignore_id is not None else np.ones(blocks.shape, bool)
    n = int(labels.max(initial=0)) + 1
    if ignore_id is not None:
        n = max(n, ignore_id + 1)
    counts = np.zeros(blocks.shape[:2] + (n,), dtype=np.int64)
    # per-class vote count; argmax returns the first (lowest) id among ties
    for c in np.unique(blocks[valid]):
        counts[..., c] = ((blocks == c) & valid).sum(-1)
    out = counts.argmax(-1)
    if ignore_id is not None:
        out[~valid.any(-1)] = ignore_id
    return out.astype(np.int64)


def shift_labels(labels: np.ndarray, shift: int, direction: Tuple[int, int]) -> np.ndarray:
    """Translate by ``shift * direction`` pixels with edge replication."""
    if shift == 0:
        return labels.copy()
    dy, dx = direction[0] * shift, direction[1] * shift
    H, W = labels.shape
    ys = np.clip(np.arange(H) - dy, 0, H - 1)
    xs = np.clip(np.arange(W) - dx, 0, W - 1)
    return labels[np.ix_(ys, xs)]


def flip_labels(labels: np.ndarray, space: LabelSpace, rate: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Replace each non-ignored pixel by a uniformly drawn *different* class with prob ``rate``."""
    ids = np.asarray(space.class_ids)
    K = len(ids)
    pos = space.to_index(labels)
    flip = (rng.random(labels.shape) < rate) & (pos >= 0)
    offset = rng.integers(1, K, size=labels.shape)
    out = labels.copy()
    out[flip] = ids[(pos[flip] + offset[flip]) % K]
    return out, flip


def degrade_labels(
    hr_labels: np.ndarray, factor: int, noise: NoiseModel, table: UnificationTable
) -> Tuple[np.ndarray, np.ndarray]:
    """Low-resolution source-space labels plus a mask of blocks whose label is wrong."""
    rng = np.random.default_rng(noise.seed)
    tgt_ignore = table.target.ignore_id
    clean = block_majority_downsample(hr_labels, factor, tgt_ignore)
    directions = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    direction = directions[int(rng.integers(len(directions)))]
    shifted = shift_labels(hr_labels, noise.boundary_shift, direction)
    lr_target = block_majority_downsample(shifted, factor, tgt_ignore)
    lr = inverse_unify(lr_target, table, rng.integers(2**63))
    lr, _ = flip_labels(lr, table.source, noise.flip_rate, rng)
    corruption = unify(lr, table) != clean
    return lr, corruption


def make_scene_pair(
    spec: SceneSpec, factor: int, noise: NoiseModel, table: UnificationTable, scene_id: str = ""
) -> ScenePair:
    image, hr = generate_scene(spec)
    lr, corrupt = degrade_labels(hr, factor, noise, table)
    return ScenePair(image, hr, lr, corrupt, factor, spec.seed, scene_id)


def write_dataset(pairs: List[ScenePair], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for i, p in enumerate(pairs):
        sid = p.scene_id or f"scene_{i:04d}"
        d = root / sid
        d.mkdir(exist_ok=True)
        for name in ARRAY_NAMES:
            np.save(d / f"{name}.npy", getattr(p, name), allow_pickle=False)
        H, W = p.hr_labels.shape
        h, w = p.lr_labels.shape
        lines.append(f"{sid}\t{p.seed}\t{H}\t{W}\t{h}\t{w}\t{p.factor}")
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, root / MANIFEST_NAME)
    return root


def read_manifest(root) -> List[dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    rows = path.read_text().splitlines()
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DatasetError(f"corrupt manifest header: {path}")
    keys = MANIFEST_HEADER.split("\t")
    entries = []
    for lineno, line in enumerate(rows[1:], 2):
        parts = line.split("\t")
        if len(parts) != len(keys):
            raise DatasetError(f"corrupt manifest line {lineno}: {path}")
        try:
            entry = {k: (v if k == "id" else int(v)) for k, v in zip(keys, parts)}
        except ValueError:
            raise DatasetError(f"corrupt manifest line {lineno}: {path}") from None
        entries.append(entry)
    return entries


def read_dataset(root) -> List[ScenePair]:
    root = Path(root)
    pairs = []
    for e in read_manifest(root):
        arrays = {}
        for name in ARRAY_NAMES:
            f = root / e["id"] / f"{name}.npy"
            if not f.is_file():
                raise DatasetError(f"missing file: {f}")
            try:
                arrays[name] = np.load(f, allow_pickle=False)
            except Exception as exc:
                raise DatasetError(f"unreadable file: {f} ({exc})") from None
        expected = {
            "image": (e["height"], e["width"], 3),
            "hr_labels": (e["height"], e["width"]),
            "lr_labels": (e["lr_height"], e["lr_width"]),
            "corruption_mask": (e["lr_height"], e["lr_width"]),
        }
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise DatasetError(
                    f"shape mismatch in {root / e['id'] / (name + '.npy')}: "
                    f"{arrays[name].shape} != {shape}"
                )
        if e["height"] != e["lr_height"] * e["factor"] or e["width"] != e["lr_width"] * e["factor"]:
            raise DatasetError(f"factor inconsistent with shapes for scene {e['id']} in {root}")
        pairs.append(ScenePair(factor=e["factor"], seed=e["seed"], scene_id=e["id"], **arrays))
    return pairs
