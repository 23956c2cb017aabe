"""Positive/negative example selection for slice-level contrastive learning.

Three strategies:

* ``S`` (scan-based): positive from the anchor's scan, negative from any other scan.
* ``O`` (organ-based): positive shares the anchor's organ flag, negative has the
  opposite flag, both drawn over all scans.
* ``M`` (mixed): like ``O`` but positive and negative both come from the
  anchor's own scan. When the scan has no slice of the opposite flag the
  negative falls back to an organ-based draw from the other scans.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .dataset import DatasetIndex
from .volume_io import SliceRecord


class Strategy(str, enum.Enum):
    S = "S"
    O = "O"
    M = "M"


class TripletSamplingError(ValueError):
    pass


class NoPositiveCandidateError(TripletSamplingError):
    pass


class NoNegativeCandidateError(TripletSamplingError):
    pass


class UnknownOrganFlagError(TripletSamplingError):
    pass


@dataclass(frozen=True)
class Triplet:
    anchor: SliceRecord
    positive: SliceRecord
    negative: SliceRecord
    strategy: Strategy
    fallback_used: bool = False


def _pick(rng: np.random.Generator, candidates: np.ndarray) -> int:
    return int(candidates[rng.integers(len(candidates))])


def _anchor_flag(index: DatasetIndex, pos: int) -> int:
    flag = int(index.organ_codes[pos])
    if flag < 0:
        raise UnknownOrganFlagError(
            f"slice {index.records[pos].record_id} has no organ label; organ-based sampling needs one"
        )
    return flag


def sample_scan_based(index: DatasetIndex, anchor: SliceRecord, rng: np.random.Generator) -> Triplet:
    pos = index.position_of(anchor)
    scans = index.scan_codes
    same = index.by_scan[anchor.scan_id]
    same = same[same != pos]
    if len(same) == 0:
        raise NoPositiveCandidateError(f"scan {anchor.scan_id} has a single slice")
    other = np.flatnonzero(scans != scans[pos])
    if len(other) == 0:
        raise NoNegativeCandidateError("index holds a single scan; no negative candidate")
    r = index.records
    return Triplet(anchor, r[_pick(rng, same)], r[_pick(rng, other)], Strategy.S)


def sample_organ_based(index: DatasetIndex, anchor: SliceRecord, rng: np.random.Generator) -> Triplet:
    pos = index.position_of(anchor)
    flag = _anchor_flag(index, pos)
    same = index.by_organ[bool(flag)]
    same = same[same != pos]
    opposite = index.by_organ[not flag]
    if len(same) == 0:
        raise NoPositiveCandidateError(f"no other slice with organ flag {flag}")
    if len(opposite) == 0:
        raise NoNegativeCandidateError(f"no slice with organ flag {1 - flag} in the index")
    r = index.records
    return Triplet(anchor, r[_pick(rng, same)], r[_pick(rng, opposite)], Strategy.O)


def sample_mixed(index: DatasetIndex, anchor: SliceRecord, rng: np.random.Generator) -> Triplet:
    pos = index.position_of(anchor)
    flag = _anchor_flag(index, pos)
    scan = index.by_scan[anchor.scan_id]
    flags = index.organ_codes[scan]
    positives = scan[(flags == flag) & (scan != pos)]
    if len(positives) == 0:
        raise NoPositiveCandidateError(
            f"scan {anchor.scan_id} has no other slice with organ flag {flag}"
        )
    negatives = scan[flags == 1 - flag]
    fallback = False
    if len(negatives) == 0:
        codes = index.scan_codes
        negatives = np.flatnonzero((index.organ_codes == 1 - flag) & (codes != codes[pos]))
        if len(negatives) == 0:
            raise NoNegativeCandidateError(f"no slice with organ flag {1 - flag} in any scan")
        fallback = True
    r = index.records
    return Triplet(anchor, r[_pick(rng, positives)], r[_pick(rng, negatives)], Strategy.M, fallback)


SAMPLERS = {
    Strategy.S: sample_scan_based,
    Strategy.O: sample_organ_based,
    Strategy.M: sample_mixed,
}


def satisfies_strategy(t: Triplet) -> bool:
    """Check a triplet against its strategy's set-membership rule.

    Reads only the record fields, never the index, so it can audit any sampler.
    For a mixed triplet that used the fallback, the negative must instead
    have the opposite flag and come from a different scan.
    """
    a, p, n = t.anchor, t.positive, t.negative
    if a.scan_id == p.scan_id and a.slice_index == p.slice_index:
        return False
    if t.strategy is Strategy.S:
        return p.scan_id == a.scan_id and n.scan_id != a.scan_id
    if a.organ_present is None or p.organ_present is None or n.organ_present is None:
        return False
    same_flag = p.organ_present == a.organ_present
    opposite_flag = n.organ_present != a.organ_present
    if t.strategy is Strategy.O:
        return same_flag and opposite_flag
    if t.fallback_used:
        return same_flag and p.scan_id == a.scan_id and opposite_flag and n.scan_id != a.scan_id
    return same_flag and opposite_flag and p.scan_id == a.scan_id and n.scan_id == a.scan_id


def check_compatible(index: DatasetIndex, strategy: Strategy) -> None:
    """Raise if ``index`` cannot feed ``strategy``."""
    strategy = Strategy(strategy)
    if len(index.by_scan) < 2 and strategy is not Strategy.O:
        raise NoNegativeCandidateError("contrastive sampling needs at least two scans")
    if strategy is Strategy.S:
        return
    if not index.fully_labeled:
        raise UnknownOrganFlagError(
            f"strategy {strategy.value} needs organ flags on every slice; "
            f"{len(index.by_organ[None])} are unknown"
        )
    if len(index.by_organ[True]) == 0 or len(index.by_organ[False]) == 0:
        raise NoNegativeCandidateError("index lacks slices with and without the organ")


class TripletSampler:
    """Epoch-level driver: every slice is an anchor once per epoch, in shuffled order.

    The generator for epoch ``e`` is seeded with ``(seed, e)``, so any epoch can
    be replayed on its own.
    """

    def __init__(self, index: DatasetIndex, strategy: Strategy | str, seed: int = 0):
        self.index = index
        self.strategy = Strategy(strategy)
        self.seed = seed
        self.fallback_count = 0
        self.skipped_count = 0
        self._fn = SAMPLERS[self.strategy]

    def epoch(self, epoch: int) -> list[Triplet]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.index))
        out = []
        for pos in order:
            try:
                t = self._fn(self.index, self.index.records[pos], rng)
            except NoPositiveCandidateError:
                # anchors without any valid positive cannot form a triplet
                self.skipped_count += 1
                continue
            self.fallback_count += int(t.fallback_used)
            out.append(t)
        return out

    def iter_epochs(self, epochs: int) -> Iterator[tuple[int, list[Triplet]]]:
        for e in range(epochs):
            yield e, self.epoch(e)


def write_trace(path: str | Path, epoch: int, triplets: list[Triplet], append: bool = True) -> None:
    """Append triplets to the CSV audit trace (epoch, anchor, pos, neg, strategy, fallback)."""
    path = Path(path)
    new = not path.exists() or not append
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "anchor_id", "pos_id", "neg_id", "strategy", "fallback"])
        for t in triplets:
            w.writerow([
                epoch,
                t.anchor.record_id,
                t.positive.record_id,
                t.negative.record_id,
                t.strategy.value,
                int(t.fallback_used),
            ])
