"""Denoiser pretraining, dual-branch training and checkpoints."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig
from .diffusion import (DenoiserNet, ddpm_train_step, extract_features, parameter_checksum,
                        to_model_range)
from .label_space import UnificationTable
from .model import DualBranchModel, build_denoiser, build_schedule
from .supervision import (ClassPrototypes, IGNORE_INDEX, ce_loss, compute_prototypes, confidence_mask,
                          mask_statistics, masked_ce_loss, total_loss)
from .synthdata import ScenePair

CHECKPOINT_VERSION = 1
logger = logging.getLogger(__name__)


class CheckpointError(Exception):
    pass


# data ----------------------------------------------------------------------

def upsample_nearest(labels: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)


class CropSampler:
    """Epochs of ``crops_per_image`` random crops per scene, visited in shuffled order."""

    def __init__(self, scenes: Sequence[ScenePair], crop: int, crops_per_image: int, rng: np.random.Generator):
        self.shapes = [s.hr_labels.shape for s in scenes]
        for (H, W) in self.shapes:
            if H < crop or W < crop:
                raise ValueError(f"scene {H}x{W} is smaller than the {crop}px crop")
        self.crop = crop
        self.crops_per_image = crops_per_image
        self.rng = rng
        self.queue: List[Tuple[int, int, int]] = []

    def _refill(self):
        items = []
        for i, (H, W) in enumerate(self.shapes):
            ys = self.rng.integers(0, H - self.crop + 1, size=self.crops_per_image)
            xs = self.rng.integers(0, W - self.crop + 1, size=self.crops_per_image)
            items += [(i, int(y), int(x)) for y, x in zip(ys, xs)]
        order = self.rng.permutation(len(items))
        self.queue = [items[j] for j in order]

    def next_batch(self, n: int) -> List[Tuple[int, int, int]]:
        if not self.shapes:
            raise ValueError("no scenes to sample crops from")
        out = []
        while len(out) < n:
            if not self.queue:
                self._refill()
            out.append(self.queue.pop())
        return out


def crop_images(scenes, crops, size) -> torch.Tensor:
    arr = np.stack([scenes[i].image[y:y + size, x:x + size] for i, y, x in crops])
    return to_model_range(torch.from_numpy(arr).permute(0, 3, 1, 2).float())


# pretraining ---------------------------------------------------------------

def pretrain_denoiser(cfg: RunConfig, scenes: Sequence[ScenePair],
                      log: Optional[Callable[[dict], None]] = None) -> Tuple[DenoiserNet, List[float]]:
    d = cfg.diffusion
    torch.manual_seed(cfg.seed)
    net = build_denoiser(cfg)
    schedule = build_schedule(cfg)
    opt = torch.optim.AdamW(net.parameters(), lr=d.pretrain_lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = CropSampler(scenes, cfg.train.crop_size, cfg.train.crops_per_image, np.random.default_rng(cfg.seed))
    losses = []
    for step in range(1, d.pretrain_steps + 1):
        batch = crop_images(scenes, sampler.next_batch(d.pretrain_batch_size), cfg.train.crop_size)
        loss = ddpm_train_step(net, batch, schedule, opt, gen)
        losses.append(loss)
        if log:
            log({"step": step, "diffusion_loss": loss})
    net.step_count = d.pretrain_steps
    return net.freeze(), losses


def save_denoiser(net: DenoiserNet, cfg: RunConfig, path, losses: Sequence[float] = ()) -> None:
    torch.save({
        "kind": "denoiser",
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg.denoiser_hash,
        "config_text": cfg.to_text(),
        "seed": cfg.seed,
        "step": getattr(net, "step_count", 0),
        "frozen": net.frozen,
        "schedule": {"T": cfg.diffusion.T, "beta": build_schedule(cfg).beta.tolist()},
        "checksum": parameter_checksum(net),
        "losses": list(losses),
        "state_dict": net.state_dict(),
    }, path)


def _load(path, kind):
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(ckpt, dict) or ckpt.get("kind") != kind:
        raise CheckpointError(f"{path} is not a {kind} checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def load_denoiser(path, cfg: RunConfig) -> DenoiserNet:
    ckpt = _load(path, "denoiser")
    if ckpt["config_hash"] != cfg.denoiser_hash:
        raise CheckpointError(f"config hash mismatch for {path}: checkpoint {ckpt['config_hash'][:12]} "
                              f"!= config {cfg.denoiser_hash[:12]}")
    net = build_denoiser(cfg)
    net.load_state_dict(ckpt["state_dict"])
    net.step_count = ckpt["step"]
    net.freeze()
    if parameter_checksum(net) != ckpt["checksum"]:
        raise CheckpointError(f"parameter checksum mismatch in {path}")
    return net


# dual-branch training ------------------------------------------------------

class Trainer:
    """Owns the trainable model, optimizer and RNG streams; resumable from a checkpoint."""

    def __init__(self, cfg: RunConfig, scenes: Sequence[ScenePair], table: UnificationTable,
                 denoiser: Optional[DenoiserNet] = None):
        cfg.validate()
        self.cfg = cfg
        self.table = table
        self.mode = cfg.train.mode
        self.num_classes = table.source.num_classes
        if self.mode != "transformer_only":
            if denoiser is None:
                raise ValueError(f"mode {self.mode} needs a pretrained denoiser")
            if not denoiser.frozen:
                raise ValueError("the denoiser must be frozen before downstream training")
        self.denoiser = denoiser
        self.schedule = build_schedule(cfg)
        self.scenes = list(scenes)
        factor = self.scenes[0].factor if self.scenes else None  # no scenes: inference only
        # supervision lives at image resolution (nearest-neighbour upsampled)
        self.targets = [upsample_nearest(table.source.to_index(s.lr_labels, IGNORE_INDEX), s.factor)
                        for s in self.scenes]
        self.factor = factor
        torch.manual_seed(cfg.seed)
        self.model = DualBranchModel(cfg, self.num_classes)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.train.learning_rate,
                                           weight_decay=cfg.train.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.sampler = CropSampler(self.scenes, cfg.train.crop_size, cfg.train.crops_per_image, self.rng)
        self.step_count = 0
        self.prototypes: Optional[ClassPrototypes] = None
        self._cache: Dict[Tuple[int, int, int], List[torch.Tensor]] = {}
        self.history: List[dict] = []

    # features --------------------------------------------------------------

    def features(self, crops, images) -> Optional[List[torch.Tensor]]:
        if self.denoiser is None:
            return None
        d = self.cfg.diffusion
        if d.stochastic_extraction:
            return extract_features(self.denoiser, images, d.extraction_step, self.schedule, self.generator)
        missing = [k for k, c in enumerate(crops) if c not in self._cache]
        if missing:
            fs = extract_features(self.denoiser, images[missing], d.extraction_step, self.schedule)
            for j, k in enumerate(missing):
                self._cache[crops[k]] = [f[j] for f in fs]
        return [torch.stack([self._cache[c][s] for c in crops]) for s in range(5)]

    def batch(self, crops):
        size = self.cfg.train.crop_size
        images = crop_images(self.scenes, crops, size)
        labels = torch.from_numpy(np.stack([self.targets[i][y:y + size, x:x + size] for i, y, x in crops]))
        return images, labels

    # objective -------------------------------------------------------------

    def _prototypes(self, fused, hard) -> ClassPrototypes:
        current = compute_prototypes(fused.detach(), hard, self.num_classes)
        m = self.cfg.train.prototype_momentum
        if m <= 0 or self.prototypes is None:
            self.prototypes = current
            return current
        prev = self.prototypes
        both = prev.present & current.present
        proto = torch.where(current.present[:, None], current.proto, prev.proto)
        proto[both] = m * prev.proto[both] + (1 - m) * current.proto[both]
        self.prototypes = ClassPrototypes(proto, prev.present | current.present)
        return self.prototypes

    def losses(self, out, labels) -> dict:
        lam = self.cfg.train.lam
        rec = {}
        if self.mode == "transformer_only":
            loss = ce_loss(out["y2"], labels)
            rec.update(loss=loss, l2=loss)
            return rec
        l1 = ce_loss(out["y1"], labels)
        rec["l1"] = l1
        if self.mode == "diffusion_only":
            rec["loss"] = l1
            return rec
        hard = out["y1"].hard.detach()
        if self.mode == "no_pcem":
            mask = torch.ones_like(hard, dtype=torch.bool)
        else:
            protos = self._prototypes(out["fused"], hard)
            mask = confidence_mask(out["fused"].detach(), hard, protos, self.cfg.train.tau)
        l2 = masked_ce_loss(out["y2"], hard, mask)
        rec.update(l2=l2, loss=total_loss(l1, l2, lam), mask=mask, hard=hard)
        return rec

    def step(self) -> dict:
        crops = self.sampler.next_batch(self.cfg.train.batch_size)
        images, labels = self.batch(crops)
        feats = self.features(crops, images)
        self.model.train()
        out = self.model(images, feats)
        rec = self.losses(out, labels)
        self.optimizer.zero_grad(set_to_none=True)
        rec["loss"].backward()
        self.optimizer.step()
        self.step_count += 1
        record = {"step": self.step_count, "loss": float(rec["loss"].detach())}
        for k in ("l1", "l2"):
            if k in rec:
                record[k] = None if rec[k] is None else float(rec[k].detach())
        if "mask" in rec:
            stats = mask_statistics(rec["mask"], rec["hard"], self.num_classes)
            record["kept_fraction"] = stats["kept_fraction"]
            record["per_class_kept"] = {str(k): v for k, v in stats["per_class_kept"].items()}
            logger.debug("mask", extra={"mask_stats": stats, "step": self.step_count})
        self.history.append(record)
        return record

    def run(self, steps: Optional[int] = None, log: Optional[Callable[[dict], None]] = None) -> List[dict]:
        steps = self.cfg.train.max_steps - self.step_count if steps is None else steps
        records = []
        for _ in range(steps):
            rec = self.step()
            records.append(rec)
            if log:
                log(rec)
        return records

    # inference -------------------------------------------------------------

    @torch.no_grad()
    def forward_eval(self, images: torch.Tensor) -> dict:
        """Evaluation-mode forward pass on a batch of images in [-1, 1]."""
        feats = None
        if self.denoiser is not None and self.mode != "transformer_only":
            feats = extract_features(self.denoiser, images, self.cfg.diffusion.extraction_step, self.schedule)
        self.model.eval()
        return self.model(images, feats)

    @torch.no_grad()
    def predict_probs(self, images: torch.Tensor) -> torch.Tensor:
        return self.model.final(self.forward_eval(images)).probs

    # checkpoints -----------------------------------------------------------

    def state(self) -> dict:
        return {
            "kind": "train_state",
            "version": CHECKPOINT_VERSION,
            "config_hash": self.cfg.config_hash,
            "config_text": self.cfg.to_text(),
            "mode": self.mode,
            "step": self.step_count,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": self.generator.get_state(),
            "queue": list(self.sampler.queue),
            "prototypes": None if self.prototypes is None else
            {"proto": self.prototypes.proto, "present": self.prototypes.present},
            "denoiser_checksum": None if self.denoiser is None else parameter_checksum(self.denoiser),
            "history": self.history,
        }

    def save(self, path) -> None:
        torch.save(self.state(), path)

    @classmethod
    def load(cls, path, cfg: RunConfig, scenes, table, denoiser=None) -> "Trainer":
        ckpt = _load(path, "train_state")
        if ckpt["config_hash"] != cfg.config_hash:
            raise CheckpointError(f"config hash mismatch for {path}")
        if denoiser is not None and ckpt["denoiser_checksum"] not in (None, parameter_checksum(denoiser)):
            raise CheckpointError(f"{path} was trained against a different denoiser")
        tr = cls(cfg, scenes, table, denoiser)
        tr.model.load_state_dict(ckpt["model"])
        tr.optimizer.load_state_dict(ckpt["optimizer"])
        tr.rng.bit_generator.state = ckpt["rng"]
        tr.generator.set_state(ckpt["torch_rng"])
        tr.sampler.queue = [tuple(q) for q in ckpt["queue"]]
        if ckpt["prototypes"] is not None:
            tr.prototypes = ClassPrototypes(ckpt["prototypes"]["proto"], ckpt["prototypes"]["present"])
        tr.step_count = ckpt["step"]
        tr.history = list(ckpt["history"])
        return tr


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
