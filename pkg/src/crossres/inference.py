"""Sliding-window prediction with probability averaging in overlaps."""
from __future__ import annotations

from typing import Callable, List

import numpy as np
import torch

from .diffusion import to_model_range
from .label_space import UnificationTable, unify

ProbFn = Callable[[torch.Tensor], torch.Tensor]


def window_starts(length: int, window: int, stride: int) -> List[int]:
    """Start offsets covering [0, length); the last window is flush with the end."""
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


@torch.no_grad()
def tiled_probabilities(prob_fn: ProbFn, image: np.ndarray, window: int, overlap: float = 0.5,
                        batch_size: int = 8) -> np.ndarray:
    """Average per-window class probabilities over an (H, W, 3) image in [0, 1].

    ``prob_fn`` maps a (B, 3, window, window) batch in [-1, 1] to (B, C, window, window)
    probabilities. Inputs smaller than ``window`` are zero-padded (bottom/right) into a
    single window and cropped back afterwards.
    """
    H, W = image.shape[:2]
    pad_h, pad_w = max(0, window - H), max(0, window - W)
    x = to_model_range(torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float())
    if pad_h or pad_w:
        x = torch.nn.functional.pad(x, (0, pad_w, 0, pad_h))
    Hp, Wp = x.shape[-2:]
    stride = max(1, int(round(window * (1 - overlap))))
    coords = [(y, xx) for y in window_starts(Hp, window, stride) for xx in window_starts(Wp, window, stride)]
    acc = None
    count = torch.zeros(1, Hp, Wp, dtype=torch.float64)
    for i in range(0, len(coords), batch_size):
        chunk = coords[i:i + batch_size]
        probs = prob_fn(torch.stack([x[:, y:y + window, c:c + window] for y, c in chunk])).double()
        if acc is None:
            acc = torch.zeros(probs.shape[1], Hp, Wp, dtype=torch.float64)
        for p, (y, c) in zip(probs, chunk):
            acc[:, y:y + window, c:c + window] += p
            count[:, y:y + window, c:c + window] += 1
    return (acc / count)[:, :H, :W].numpy()


def probabilities_to_target(probs: np.ndarray, table: UnificationTable) -> np.ndarray:
    """Argmax over source classes (channel k = k-th source class), then unify."""
    source_ids = table.source.from_index(probs.argmax(axis=0))
    return unify(source_ids, table)


def predict_image(prob_fn: ProbFn, image: np.ndarray, window: int, table: UnificationTable) -> np.ndarray:
    return probabilities_to_target(tiled_probabilities(prob_fn, image, window), table)
