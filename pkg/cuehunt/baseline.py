"""Pipelined alternative to the learned localizer: find the cue by its color,
cut out the object under it and look for that patch in the target by
normalized cross-correlation.
"""

import logging
from typing import Tuple

import numpy as np
from scipy.signal import fftconvolve

from .scenes import Canvas, Episode, normalize_point
from .stores import CUE_GREEN, CUE_RED

logger = logging.getLogger(__name__)


def cue_mask(image: np.ndarray, rgb, tolerance: float = 30.0) -> np.ndarray:
    # object palettes keep at least 60 RGB units away from both cue colors
    diff = image.astype(np.float64) - np.array(rgb, dtype=np.float64)
    return np.linalg.norm(diff, axis=-1) <= tolerance


def normxcorr2(template: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Zero-mean normalized cross-correlation, 'valid' placements only."""
    template = template - np.mean(template)
    image = image - np.mean(image)
    ones = np.ones(template.shape)
    out = fftconvolve(image, np.flipud(np.fliplr(template)), mode="valid")
    local = fftconvolve(np.square(image), ones, mode="valid") - np.square(
        fftconvolve(image, ones, mode="valid")
    ) / template.size
    local[local < 0] = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = out / np.sqrt(local * np.sum(np.square(template)))
    out[~np.isfinite(out)] = 0
    return out


class TemplateMatcher:
    """Predictor with the same call signature as ModelPredictor."""

    def __init__(self, canvas: Canvas = None):
        self.canvas = canvas

    def template(self, adapt: np.ndarray) -> Tuple[np.ndarray, bool]:
        canvas = self.canvas or Canvas(size=adapt.shape[0])
        size = canvas.object_size
        image = adapt.astype(np.float64).copy()
        red, green = cue_mask(adapt, CUE_RED), cue_mask(adapt, CUE_GREEN)
        mask = red if red.sum() >= green.sum() else green
        if not mask.any():
            return image, False
        rows, cols = np.nonzero(mask)
        c_row, c_col = int(round(rows.mean())), int(round(cols.mean()))
        image[mask] = canvas.background
        if mask is green:
            top = int(rows.max()) + canvas.marker_gap + 1
        else:
            top = c_row - (size - 1) // 2
        top = min(max(top, 0), adapt.shape[0] - size)
        left = min(max(c_col - (size - 1) // 2, 0), adapt.shape[1] - size)
        return image[top:top + size, left:left + size], True

    def __call__(self, episode: Episode) -> Tuple[float, float]:
        patch, found = self.template(episode.adapt)
        height, width = episode.target.shape[:2]
        if not found:
            logger.debug(f"{episode.episode_id}: no cue found, predicting the canvas center")
            return 0.5, 0.5
        target = episode.target.astype(np.float64)
        score = np.mean([normxcorr2(patch[..., c], target[..., c]) for c in range(3)], axis=0)
        row, col = np.unravel_index(int(np.argmax(score)), score.shape)
        th, tw = patch.shape[:2]
        return normalize_point(row + (th - 1) / 2.0, col + (tw - 1) / 2.0, height, width)
