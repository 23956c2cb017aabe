"""Box-prompt refinement of coarse segmentation masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .metrics import dice_score, hausdorff
from .segmenters import (
    EIGHT_CONNECTED,
    BoxPrompt,
    PromptableSegmenter,
    UnsupportedCapabilityError,
)
from .volume_io import SliceRecord


class RefinementError(RuntimeError):
    pass


def mask_to_bboxes(mask: np.ndarray, min_area: int = 5) -> list[BoxPrompt]:
    """Tight box around every 8-connected component with at least ``min_area`` pixels.

    x runs along columns, y along rows.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None or sizes[k] < min_area:
            continue
        rows, cols = sl
        boxes.append(BoxPrompt(cols.start, rows.start, cols.stop - 1, rows.stop - 1))
    return boxes


@dataclass
class RefineConfig:
    min_area: int = 5
    margin: int = 0


@dataclass
class SliceRefinement:
    slice_index: int
    n_boxes: int
    dice_before: float | None = None
    dice_after: float | None = None
    hd_before: float | None = None
    hd_after: float | None = None


@dataclass
class RefinedStack:
    masks: np.ndarray
    slices: list[SliceRefinement] = field(default_factory=list)
    boxes: list[list[BoxPrompt]] = field(default_factory=list)


def refine_slice(
    image: np.ndarray, coarse: np.ndarray, backend: PromptableSegmenter, cfg: RefineConfig = RefineConfig()
) -> tuple[np.ndarray, list[BoxPrompt]]:
    """Union of the backend's answers to one box per coarse component."""
    out = np.zeros(coarse.shape, dtype=bool)
    boxes = mask_to_bboxes(coarse, cfg.min_area)
    for box in boxes:
        prompt = box.expand(cfg.margin, coarse.shape) if cfg.margin else box
        out |= np.asarray(backend.segment_with_box(image, prompt), dtype=bool)
    return out, boxes


def refine_volume(
    slices: Sequence[SliceRecord],
    coarse: np.ndarray,
    backend: PromptableSegmenter,
    cfg: RefineConfig = RefineConfig(),
) -> RefinedStack:
    """Refine a ``(n_slices, H, W)`` coarse stack aligned with ``slices``.

    Slices with an empty coarse mask stay empty. When a slice carries a ground
    truth mask, Dice and Hausdorff before/after are recorded.
    """
    if not backend.capabilities.box_prompt:
        raise UnsupportedCapabilityError(f"{type(backend).__name__} cannot take box prompts")
    coarse = np.asarray(coarse, dtype=bool)
    if len(coarse) != len(slices):
        raise ValueError(f"{len(coarse)} coarse masks for {len(slices)} slices")
    refined = np.zeros_like(coarse)
    result = RefinedStack(refined)
    for i, (rec, cm) in enumerate(zip(slices, coarse)):
        if cm.shape != rec.pixels.shape:
            raise ValueError(f"slice {rec.slice_index}: coarse mask {cm.shape} vs image {rec.pixels.shape}")
        try:
            refined[i], boxes = refine_slice(rec.pixels, cm, backend, cfg)
        except Exception as e:
            raise RefinementError(f"backend failed on slice {rec.slice_index} of {rec.scan_id}: {e}") from e
        row = SliceRefinement(rec.slice_index, len(boxes))
        if rec.mask is not None:
            row.dice_before = dice_score(cm, rec.mask)
            row.dice_after = dice_score(refined[i], rec.mask)
            row.hd_before = hausdorff(cm, rec.mask)
            row.hd_after = hausdorff(refined[i], rec.mask)
        result.slices.append(row)
        result.boxes.append(boxes)
    return result


def boxes_intersect_truth(boxes: Sequence[BoxPrompt], truth: np.ndarray) -> bool:
    return any((box.to_mask(truth.shape) & truth).any() for box in boxes)
