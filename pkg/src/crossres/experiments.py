"""Dataset splits, split evaluation, the four-mode ablation and mask diagnostics."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import MODES, RunConfig
from .diffusion import DenoiserNet
from .evaluation import ConfusionMatrix, IoUReport, accumulate, iou_report
from .inference import predict_image
from .label_space import UnificationTable, default_table, load_table
from .supervision import compute_prototypes, confidence_mask
from .synthdata import NoiseModel, ScenePair, SceneSpec, make_scene_pair
from .training import Trainer, crop_images

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# scene seeds are seed * SEED_STRIDE + SPLIT_OFFSET[split] + i, so splits never overlap
SEED_STRIDE = 10_000_000
SPLIT_OFFSET = {"train": 0, "val": 3_000_000, "test": 6_000_000}


def run_table(cfg: RunConfig) -> UnificationTable:
    return load_table(cfg.data.table) if cfg.data.table else default_table()


def split_seeds(cfg: RunConfig, split: str) -> List[int]:
    n = getattr(cfg.data, f"{split}_scenes")
    if n >= SPLIT_OFFSET["val"]:
        raise ValueError(f"too many {split} scenes: {n}")
    base = cfg.seed * SEED_STRIDE + SPLIT_OFFSET[split]
    return [base + i for i in range(n)]


def make_split(cfg: RunConfig, split: str, table: Optional[UnificationTable] = None) -> List[ScenePair]:
    table = table or run_table(cfg)
    d = cfg.data
    out = []
    for i, seed in enumerate(split_seeds(cfg, split)):
        spec = SceneSpec(d.height, d.width, d.num_regions, table.target, d.texture_noise_sigma, seed)
        noise = NoiseModel(d.flip_rate, d.boundary_shift, seed)
        out.append(make_scene_pair(spec, d.factor, noise, table, f"{split}_{i:04d}"))
    return out


def dataset_hash(scenes: Sequence[ScenePair]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.scene_id.encode())
        for a in (s.image, s.hr_labels, s.lr_labels, s.corruption_mask):
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def evaluate_scenes(prob_fn, scenes: Sequence[ScenePair], window: int, table: UnificationTable) -> IoUReport:
    if not scenes:
        raise ValueError("no scenes")
    cm = ConfusionMatrix(table.target.num_classes)
    for s in scenes:
        cm = accumulate(cm, predict_image(prob_fn, s.image, window, table), s.hr_labels, table.target.ignore_id)
    return iou_report(cm)


# ablation -------------------------------------------------------------------

@dataclass
class AblationRow:
    mode: str
    seeds: List[int]
    miou: List[float]
    dataset_hash: str

    @property
    def median(self) -> float:
        return float(statistics.median(self.miou))


@dataclass
class AblationResult:
    rows: List[AblationRow]
    trainers: Dict[tuple, Trainer] = field(default_factory=dict, repr=False)

    def median(self, mode: str) -> float:
        return next(r.median for r in self.rows if r.mode == mode)

    def to_csv(self) -> str:
        lines = ["mode,median_miou,seeds,per_seed_miou,dataset_hash"]
        for r in self.rows:
            per_seed = ";".join(f"{m:.6f}" for m in r.miou)
            seeds = ";".join(str(s) for s in r.seeds)
            lines.append(f"{r.mode},{r.median:.6f},{seeds},{per_seed},{r.dataset_hash}")
        return "\n".join(lines) + "\n"


def run_ablation(cfg: RunConfig, train: Sequence[ScenePair], test: Sequence[ScenePair],
                 table: UnificationTable, denoiser: DenoiserNet, seeds: Optional[Sequence[int]] = None,
                 modes: Sequence[str] = MODES, keep_trainers: bool = False,
                 log: Optional[Callable[[dict], None]] = None) -> AblationResult:
    """Train every mode once per seed on the same scenes and score each on ``test``.

    The denoiser is shared by all runs; only the trainable parts and the crop
    stream depend on the per-run seed.
    """
    seeds = list(cfg.train.ablation_seeds if seeds is None else seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    test_hash = dataset_hash(test)
    rows, trainers = [], {}
    for mode in modes:
        scores = []
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, mode=mode))
            tr = Trainer(run_cfg, train, table, None if mode == "transformer_only" else denoiser)
            tr.run()
            miou = evaluate_scenes(tr.predict_probs, test, cfg.train.crop_size, table).miou
            scores.append(miou)
            logger.info("ablation mode=%s seed=%d miou=%.4f", mode, seed, miou)
            if log:
                log({"mode": mode, "seed": seed, "miou": miou, "final_loss": tr.history[-1]["loss"]
                     if tr.history else None})
            if keep_trainers:
                trainers[(mode, seed)] = tr
        rows.append(AblationRow(mode, seeds, scores, test_hash))
    return AblationResult(rows, trainers)


# mask diagnostics ------------------------------------------------------------

@torch.no_grad()
def mask_clean_rates(trainer: Trainer, scenes: Optional[Sequence[ScenePair]] = None,
                     batch_size: Optional[int] = None) -> Dict[str, float]:
    """Clean-label rate of confidence-kept pixels versus all pixels.

    Each pixel inherits the clean/corrupt flag of the low-resolution cell it
    falls in. Prototypes come from the evaluation-mode fused features of each
    batch, as during training.
    """
    if trainer.mode not in ("full", "no_pcem"):
        raise ValueError(f"mode {trainer.mode} has no confidence mask")
    scenes = list(trainer.scenes if scenes is None else scenes)
    size = trainer.cfg.train.crop_size
    bs = batch_size or trainer.cfg.train.batch_size
    kept_clean = kept = total_clean = total = 0
    for i in range(0, len(scenes), bs):
        chunk = scenes[i:i + bs]
        if any(s.image.shape[:2] != (size, size) for s in chunk):
            raise ValueError(f"scenes must be {size}x{size} for the mask diagnostic")
        images = crop_images(chunk, [(j, 0, 0) for j in range(len(chunk))], size)
        out = trainer.forward_eval(images)
        hard = out["y1"].hard
        protos = compute_prototypes(out["fused"], hard, trainer.num_classes)
        mask = confidence_mask(out["fused"], hard, protos, trainer.cfg.train.tau).numpy()
        clean = np.stack([np.repeat(np.repeat(~s.corruption_mask, s.factor, 0), s.factor, 1) for s in chunk])
        kept_clean += int((clean & mask).sum())
        kept += int(mask.sum())
        total_clean += int(clean.sum())
        total += clean.size
    return {
        "kept_fraction": kept / total,
        "kept_clean_rate": kept_clean / kept if kept else float("nan"),
        "overall_clean_rate": total_clean / total,
    }


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
