"""Volumetric segmentation by propagating slice masks through a pseudo-video."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import dice_score
from .segmenters import PromptableSegmenter, UnsupportedCapabilityError
from .volume_io import Volume, to_uint8_frame

log = logging.getLogger(__name__)

POSITIONS = ("beginning", "middle", "end")


class NoInformativeSlicesError(ValueError):
    pass


class SeedOutsideInformativeSetError(ValueError):
    pass


class TooManySeedsError(ValueError):
    pass


@dataclass
class PseudoVideo:
    frames: list[np.ndarray]
    source_indices: list[int]

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.source_indices):
            raise ValueError("frames and source indices differ in length")
        if any(b <= a for a, b in zip(self.source_indices, self.source_indices[1:])):
            raise ValueError("source indices must be strictly increasing")

    def write_png(self, directory: str | Path) -> None:
        from PIL import Image

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(self.frames):
            Image.fromarray(frame).save(directory / f"{k:05d}.png")


def informative_slices(volume: Volume, coarse: np.ndarray | None = None) -> list[int]:
    """Ascending slice indices whose mask has any foreground.

    ``coarse`` (an ``(H, W, D)`` stack) takes precedence over the label, for
    deployment where ground truth is unavailable.
    """
    mask = coarse if coarse is not None else volume.label
    if mask is None:
        raise ValueError(f"{volume.scan_id}: neither a label nor a coarse mask is available")
    return [int(s) for s in np.flatnonzero(np.asarray(mask, dtype=bool).any(axis=(0, 1)))]


def select_reference(informative: Sequence[int]) -> int:
    if len(informative) == 0:
        raise NoInformativeSlicesError("no informative slices to pick a reference from")
    return int(informative[len(informative) // 2])


def build_pseudo_video(volume: Volume, informative: Sequence[int]) -> PseudoVideo:
    return PseudoVideo([to_uint8_frame(volume.voxels[:, :, s]) for s in informative], list(informative))


@dataclass
class PropagateConfig:
    mode: str = "label"  # "label" or "coarse"
    frames_dir: str | None = None


def _run_pass(backend, frames, seeds: dict[int, np.ndarray], order: Sequence[int]):
    """One directional pass; re-prompts at every seeded frame it meets.

    Returns per-position masks and each position's distance to the last prompt.
    """
    masks: dict[int, np.ndarray] = {}
    dist: dict[int, int] = {}
    state = None
    last = None
    for k in order:
        if k in seeds:
            state = backend.init_propagation(frames[k], seeds[k])
            masks[k] = seeds[k].copy()
            last = k
        elif state is not None:
            state, masks[k] = backend.propagate_step(state, frames[k])
            masks[k] = np.asarray(masks[k], dtype=bool)
        else:
            continue
        dist[k] = abs(k - last)
    return masks, dist


def propagate_volume(
    volume: Volume,
    seed_masks: Sequence[tuple[int, np.ndarray]] | None,
    backend: PromptableSegmenter,
    cfg: PropagateConfig = PropagateConfig(),
    coarse: np.ndarray | None = None,
) -> np.ndarray:
    """Full ``(H, W, D)`` mask stack propagated from one or more seed slices.

    With no ``seed_masks`` the label at the reference slice seeds the run.
    Propagation runs forward to the last informative slice and backward to the
    first; where both passes reach a frame the one nearer its prompt wins.
    Slices outside the informative set stay empty.
    """
    if not backend.capabilities.stateful_propagation:
        raise UnsupportedCapabilityError(f"{type(backend).__name__} cannot propagate")
    informative = informative_slices(volume, coarse if cfg.mode == "coarse" else None)
    if not informative:
        raise NoInformativeSlicesError(f"{volume.scan_id}: no informative slices")
    if not seed_masks:
        if volume.label is None:
            raise ValueError("default seeding needs a label")
        ref = select_reference(informative)
        seed_masks = [(ref, volume.label[:, :, ref])]

    pos_of = {s: k for k, s in enumerate(informative)}
    seeds: dict[int, np.ndarray] = {}
    for s, m in seed_masks:
        if s not in pos_of:
            raise SeedOutsideInformativeSetError(f"seed slice {s} is not informative")
        seeds[pos_of[s]] = np.asarray(m, dtype=bool)

    video = build_pseudo_video(volume, informative)
    if cfg.frames_dir:
        video.write_png(cfg.frames_dir)
    n = len(informative)
    first, last = min(seeds), max(seeds)
    fwd, dfwd = _run_pass(backend, video.frames, seeds, range(first, n))
    bwd, dbwd = _run_pass(backend, video.frames, seeds, range(last, -1, -1))

    out = np.zeros(volume.shape, dtype=bool)
    for k, s in enumerate(informative):
        if k in fwd and (k not in bwd or dfwd[k] <= dbwd[k]):
            out[:, :, s] = fwd[k]
        else:
            out[:, :, s] = bwd[k]
    return out


def seed_positions(n: int, count: int, position: str) -> list[int]:
    """Positions within an informative set of size ``n`` for ``count`` seeds.

    A single seed sits at the first, middle (``n // 2``) or last position. Several
    seeds are spread evenly over the matching third of the set.
    """
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}")
    if count > n:
        raise TooManySeedsError(f"{count} seeds requested from {n} informative slices")
    if count == 1:
        return [{"beginning": 0, "middle": n // 2, "end": n - 1}[position]]
    thirds = np.array_split(np.arange(n), 3)
    window = thirds[POSITIONS.index(position)]
    lo, hi = (int(window[0]), int(window[-1])) if len(window) else (0, 0)
    if hi - lo + 1 < count:
        # widen the window to fit ``count`` distinct slices, staying in range
        lo = min(max(0, lo - (count - (hi - lo + 1)) // 2), n - count)
        hi = lo + count - 1
    picks = np.rint(np.linspace(lo, hi, count)).astype(int)
    return sorted(set(int(p) for p in picks))


@dataclass
class AblationCell:
    count: int
    position: str
    dice: list[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.dice)) if self.dice else float("nan")

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "position": self.position,
            "mean_dice": self.mean,
            "std_dice": self.std,
            "n": len(self.dice),
            "skipped": self.skipped,
        }


SEED_POSITION_NOTE = "count>1: seeds evenly spaced within the positional third of the informative set"


def ablation_grid(
    volumes: Sequence[Volume],
    counts: Sequence[int],
    positions: Sequence[str],
    backend_factory: Callable[[Volume], PromptableSegmenter],
    seed_source: Callable[[Volume, int], np.ndarray] | None = None,
) -> list[AblationCell]:
    """Propagation Dice for every (seed count, seed position) pair.

    ``seed_source(volume, slice)`` supplies seed masks (for example coarse
    model predictions); the label is used when it is ``None``. Volumes with
    fewer informative slices than seeds are skipped with a warning.
    """
    cells = []
    for count in counts:
        for position in positions:
            cell = AblationCell(count, position)
            for v in volumes:
                informative = informative_slices(v)
                try:
                    picks = seed_positions(len(informative), count, position)
                except TooManySeedsError as e:
                    warnings.warn(f"{v.scan_id}: {e}; skipped", stacklevel=2)
                    cell.skipped += 1
                    continue
                seeds = []
                for k in picks:
                    s = informative[k]
                    m = seed_source(v, s) if seed_source else v.label[:, :, s]
                    seeds.append((s, m))
                pred = propagate_volume(v, seeds, backend_factory(v))
                cell.dice.append(dice_score(pred, v.label))
            cells.append(cell)
    return cells
