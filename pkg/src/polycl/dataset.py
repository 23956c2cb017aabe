"""Slice index over a set of scans, scan-level splits and label subsampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .volume_io import SliceRecord


class DuplicateScanError(ValueError):
    pass


class EmptyTrainingSetError(ValueError):
    pass


class SplitOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        for i in range(3):
            for j in range(i + 1, 3):
                common = sets[i] & sets[j]
                if common:
                    raise SplitOverlapError(f"scan ids in more than one split: {sorted(common)}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")

    def ids(self, name: str) -> tuple[str, ...]:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]

    def to_json(self) -> dict:
        return {
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
            "seed": self.seed,
            "label_fraction": self.label_fraction,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SplitSpec":
        return cls(
            train_ids=tuple(payload["train"]),
            val_ids=tuple(payload.get("val", ())),
            test_ids=tuple(payload.get("test", ())),
            label_fraction=float(payload.get("label_fraction", 1.0)),
            seed=int(payload.get("seed", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SplitSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_split(
    scan_ids: Sequence[str], n_val: int, n_test: int, seed: int = 0
) -> SplitSpec:
    """Shuffle scan ids once and carve off validation and test scans."""
    ids = sorted(scan_ids)
    if n_val + n_test >= len(ids):
        raise ValueError(f"{len(ids)} scans cannot hold {n_val} val + {n_test} test scans")
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    return SplitSpec(
        train_ids=tuple(sorted(perm[n_val + n_test :])),
        val_ids=tuple(sorted(perm[:n_val])),
        test_ids=tuple(sorted(perm[n_val : n_val + n_test])),
        seed=seed,
    )


class DatasetIndex:
    """Immutable index of slices keyed by scan membership and organ presence.

    ``by_organ`` has the buckets ``True``, ``False`` and ``None`` (unknown).
    Bucket contents are positions into ``records``.
    """

    def __init__(self, records: Iterable[SliceRecord], split: SplitSpec | None = None):
        self.records: tuple[SliceRecord, ...] = tuple(records)
        self.split = split
        by_scan: dict[str, list[int]] = {}
        by_organ: dict[bool | None, list[int]] = {True: [], False: [], None: []}
        self._pos: dict[tuple[str, int], int] = {}
        for i, r in enumerate(self.records):
            key = (r.scan_id, r.slice_index)
            if key in self._pos:
                raise DuplicateScanError(f"slice {r.record_id} indexed twice")
            self._pos[key] = i
            by_scan.setdefault(r.scan_id, []).append(i)
            by_organ[r.organ_present].append(i)
        self.by_scan = {k: np.asarray(v, dtype=np.int64) for k, v in by_scan.items()}
        self.by_organ = {k: np.asarray(v, dtype=np.int64) for k, v in by_organ.items()}
        self._scan_codes = None
        self._organ_codes = None

    def __len__(self) -> int:
        return len(self.records)

    def __repr__(self) -> str:
        return f"DatasetIndex({len(self.records)} slices, {len(self.by_scan)} scans)"

    @property
    def scan_ids(self) -> list[str]:
        return list(self.by_scan)

    def position_of(self, record: SliceRecord) -> int:
        return self._pos[(record.scan_id, record.slice_index)]

    @property
    def scan_codes(self) -> np.ndarray:
        """Integer scan code per record, in ``by_scan`` order."""
        if self._scan_codes is None:
            lookup = {sid: k for k, sid in enumerate(self.by_scan)}
            self._scan_codes = np.asarray([lookup[r.scan_id] for r in self.records], dtype=np.int64)
        return self._scan_codes

    @property
    def organ_codes(self) -> np.ndarray:
        """1 / 0 per record, -1 where organ presence is unknown."""
        if self._organ_codes is None:
            self._organ_codes = np.asarray(
                [-1 if r.organ_present is None else int(r.organ_present) for r in self.records],
                dtype=np.int64,
            )
        return self._organ_codes

    @property
    def fully_labeled(self) -> bool:
        return len(self.by_organ[None]) == 0

    def subset(self, scan_ids: Iterable[str]) -> "DatasetIndex":
        keep = set(scan_ids)
        return DatasetIndex([r for r in self.records if r.scan_id in keep], self.split)

    def for_split(self, name: str) -> "DatasetIndex":
        if self.split is None:
            if name == "train":
                return self
            return DatasetIndex([], None)
        return self.subset(self.split.ids(name))

    def with_split(self, split: SplitSpec) -> "DatasetIndex":
        return DatasetIndex(self.records, split)

    def train_records(self) -> list[SliceRecord]:
        return list(self.for_split("train").records)


def build_index(volume_slices: Iterable[Sequence[SliceRecord]], split: SplitSpec | None = None) -> DatasetIndex:
    """Index the preprocessed slices of several volumes.

    Each element of ``volume_slices`` holds the slices of one scan, as
    returned by :func:`polycl.volume_io.preprocess`.
    """
    seen: set[str] = set()
    records: list[SliceRecord] = []
    for slices in volume_slices:
        ids = {r.scan_id for r in slices}
        dup = ids & seen
        if dup:
            raise DuplicateScanError(f"duplicate scan id(s): {sorted(dup)}")
        seen |= ids
        records.extend(slices)
    return DatasetIndex(records, split)


def subsample_labels(index: DatasetIndex, fraction: float, seed: int) -> DatasetIndex:
    """Keep ``ceil(fraction * N_train)`` training slices, validation/test untouched.

    Subsets are prefixes of one seeded permutation, so a smaller fraction is
    always contained in a larger one under the same seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    train_ids = set(index.split.train_ids) if index.split is not None else set(index.by_scan)
    train_pos = [i for i, r in enumerate(index.records) if r.scan_id in train_ids]
    if not train_pos:
        raise EmptyTrainingSetError("no training slices to subsample")
    n_keep = min(len(train_pos), math.ceil(fraction * len(train_pos) - 1e-9))
    perm = np.random.default_rng(seed).permutation(len(train_pos))
    kept = {train_pos[i] for i in perm[:n_keep]}
    records = [
        r for i, r in enumerate(index.records) if r.scan_id not in train_ids or i in kept
    ]
    split = index.split
    if split is not None:
        split = replace(split, label_fraction=fraction)
    return DatasetIndex(records, split)
