"""Point-prompt generation from foreground masks and IoU-based instance
deduplication.

A foreground mask is partitioned into grid cells (edge cells may be smaller
than g x g and score over their actual pixel count); each cell gets a
saliency score rho = foreground fraction, and cells above the threshold emit
a prompt at the floor-of-mean centroid of their foreground pixels. Adaptive
distribution control tops the prompt set up to n_min (descending rho,
excluding empty cells) and caps it at n_max.

Candidate instance masks are thinned greedily, highest predicted-IoU score
first: a candidate is dropped when it overlaps an already-kept mask above
tau_o, so the retained set is an antichain under IoU > tau_o.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "PromptConfig",
    "PointPrompt",
    "ScoredInstance",
    "grid_saliency",
    "cell_centroid",
    "generate_prompts",
    "mask_iou",
    "dedup_instances",
]


@dataclass
class PromptConfig:
    grid_size: int = 64
    saliency_threshold: float = 0.05
    n_min: int = 1
    n_max: int = 1024

    def __post_init__(self) -> None:
        if self.grid_size < 1:
            raise ValueError(f"grid_size must be >= 1, got {self.grid_size}")
        if not 0.0 <= self.saliency_threshold <= 1.0:
            raise ValueError(
                f"saliency_threshold must be in [0, 1], got {self.saliency_threshold}"
            )
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}..{self.n_max}")


@dataclass
class PointPrompt:
    """Pixel coordinate plus the saliency of its generating grid cell."""

    x: int
    y: int
    confidence: float
    source_cell: tuple[int, int]


@dataclass
class ScoredInstance:
    """Candidate mask with a predicted-IoU confidence score."""

    mask: np.ndarray
    score: float
    source_prompt: Optional[PointPrompt] = None

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not self.mask.any():
            raise ValueError("instance mask is empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def _as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool)


def grid_saliency(mask: np.ndarray, g: int) -> np.ndarray:
    """Per-cell foreground fraction on the ceil(H/g) x ceil(W/g) grid."""
    mask = _as_mask(mask)
    if g < 1:
        raise ValueError(f"grid size must be >= 1, got {g}")
    h, w = mask.shape
    rows = -(-h // g)
    cols = -(-w // g)
    rho = np.zeros((rows, cols), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            cell = mask[i * g : min((i + 1) * g, h), j * g : min((j + 1) * g, w)]
            rho[i, j] = cell.sum() / cell.size
    return rho


def cell_centroid(
    mask: np.ndarray, cell: tuple[int, int, int, int]
) -> Optional[tuple[int, int]]:
    """Floor-of-mean centroid (x, y) of foreground pixels inside a cell
    rectangle (y0, x0, y1, x1), or None when the cell has no foreground."""
    mask = _as_mask(mask)
    y0, x0, y1, x1 = cell
    if not (0 <= y0 <= y1 <= mask.shape[0] and 0 <= x0 <= x1 <= mask.shape[1]):
        raise ValueError(f"cell {cell} outside mask bounds {mask.shape}")
    ys, xs = np.nonzero(mask[y0:y1, x0:x1])
    if ys.size == 0:
        return None
    xc = int(np.floor(xs.mean())) + x0
    yc = int(np.floor(ys.mean())) + y0
    return xc, yc


def generate_prompts(mask: np.ndarray, cfg: PromptConfig) -> list[PointPrompt]:
    """One prompt per cell with rho above the threshold, topped up to n_min
    from the densest remaining nonzero cells and capped at n_max; output is
    sorted by descending confidence, ties by (cell row, cell column)."""
    mask = _as_mask(mask)
    g = cfg.grid_size
    rho = grid_saliency(mask, g)
    rows, cols = rho.shape

    # admission order: descending rho, ties by (row, col)
    cells = [(i, j) for i in range(rows) for j in range(cols)]
    cells.sort(key=lambda ij: (-rho[ij], ij))

    admitted = [ij for ij in cells if rho[ij] > cfg.saliency_threshold]
    if len(admitted) < cfg.n_min:
        extra = [ij for ij in cells if 0.0 < rho[ij] <= cfg.saliency_threshold]
        admitted.extend(extra[: cfg.n_min - len(admitted)])
        admitted.sort(key=lambda ij: (-rho[ij], ij))
    admitted = admitted[: cfg.n_max]

    h, w = mask.shape
    prompts = []
    for i, j in admitted:
        rect = (i * g, j * g, min((i + 1) * g, h), min((j + 1) * g, w))
        center = cell_centroid(mask, rect)
        if center is None:
            continue  # unreachable for rho > 0; kept as a guard
        prompts.append(
            PointPrompt(
                x=center[0], y=center[1], confidence=float(rho[i, j]), source_cell=(i, j)
            )
        )
    prompts.sort(key=lambda p: (-p.confidence, p.source_cell))
    return prompts


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two equally sized masks; 0 when both empty."""
    a = _as_mask(a)
    b = _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def dedup_instances(
    candidates: list[ScoredInstance], tau_o: float = 0.75
) -> list[ScoredInstance]:
    """Greedy suppression, highest score first (ties keep first-seen order):
    a candidate survives unless its IoU with an already-kept mask exceeds
    tau_o. Output preserves acceptance order."""
    if not 0.0 < tau_o <= 1.0:
        raise ValueError(f"tau_o must be in (0, 1], got {tau_o}")
    ranked = sorted(
        range(len(candidates)), key=lambda idx: (-candidates[idx].score, idx)
    )
    kept: list[ScoredInstance] = []
    for idx in ranked:
        cand = candidates[idx]
        if all(mask_iou(cand.mask, accepted.mask) <= tau_o for accepted in kept):
            kept.append(cand)
    return kept
