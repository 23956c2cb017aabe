"""Overlap and boundary metrics, evaluation reports and paired significance tests.

Hausdorff distances are the full (maximum) symmetric distance in pixel units,
not the 95th percentile. An empty mask on either side makes the distance
undefined; such entries are left out of aggregates and counted.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

HAUSDORFF_NOTE = "hausdorff: full symmetric maximum, pixel units (slice index as third axis for volumes)"


class ShapeMismatchError(ValueError):
    pass


def json_safe(obj):
    """Replace non-finite floats with ``None`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Hard Dice ``2|A∩B| / (|A| + |B|)``; two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_shapes(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def directed_hausdorff(a_pts: np.ndarray, b_pts: np.ndarray) -> float:
    dist, _ = cKDTree(b_pts).query(a_pts, k=1)
    return float(dist.max())


def hausdorff(a: np.ndarray, b: np.ndarray) -> float | None:
    """Symmetric Hausdorff distance between foreground sets, ``None`` if either is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_shapes(a, b)
    pa = np.argwhere(a).astype(np.float64)
    pb = np.argwhere(b).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        return None
    return max(directed_hausdorff(pa, pb), directed_hausdorff(pb, pa))


@dataclass
class TTestResult:
    statistic: float
    p_value: float
    df: int
    degenerate: bool = False


def paired_ttest_one_tailed(
    x: Sequence[float], y: Sequence[float], direction: str = "greater"
) -> TTestResult:
    """One-tailed Student t-test on paired differences ``x - y``.

    ``direction="greater"`` tests ``x > y``; ``"less"`` tests ``x < y``.
    Zero-variance differences give ``degenerate=True`` and a NaN p-value.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"paired samples differ in length: {len(x)} vs {len(y)}")
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("need at least two pairs")
    if direction not in ("greater", "less"):
        raise ValueError(f"direction must be 'greater' or 'less', got {direction!r}")
    d = x - y
    n = len(d)
    sd = d.std(ddof=1)
    if sd == 0.0:
        return TTestResult(math.nan, math.nan, n - 1, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    tail = -t if direction == "greater" else t
    return TTestResult(float(t), float(special.stdtr(n - 1, tail)), n - 1)


def significance_marker(p: float) -> str:
    if not p == p:  # NaN
        return ""
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class ScanScore:
    scan_id: str
    dice: float
    hausdorff: float | None
    run: int = 0


@dataclass
class EvalReport:
    model: str
    per_scan: list[ScanScore] = field(default_factory=list)
    note: str = HAUSDORFF_NOTE

    @property
    def runs(self) -> int:
        return len({s.run for s in self.per_scan})

    @property
    def aggregate(self) -> dict:
        """Mean and population std of Dice/HD.

        With several runs the statistics are taken over per-run means, otherwise
        over scans. Undefined Hausdorff entries are excluded and counted.
        """
        runs = sorted({s.run for s in self.per_scan})
        hd_excluded = sum(1 for s in self.per_scan if s.hausdorff is None)

        def _per_unit(attr: str) -> list[float]:
            if len(runs) > 1:
                vals = []
                for r in runs:
                    xs = [getattr(s, attr) for s in self.per_scan if s.run == r and getattr(s, attr) is not None]
                    if xs:
                        vals.append(float(np.mean(xs)))
                return vals
            return [getattr(s, attr) for s in self.per_scan if getattr(s, attr) is not None]

        dice = _per_unit("dice")
        hd = _per_unit("hausdorff")
        nan = float("nan")
        return {
            "mean_dice": float(np.mean(dice)) if dice else nan,
            "std_dice": float(np.std(dice)) if dice else nan,
            "mean_hd": float(np.mean(hd)) if hd else nan,
            "std_hd": float(np.std(hd)) if hd else nan,
            "hd_excluded": hd_excluded,
        }

    def extend(self, other: "EvalReport", run: int) -> None:
        self.per_scan.extend(ScanScore(s.scan_id, s.dice, s.hausdorff, run) for s in other.per_scan)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "note": self.note,
            "runs": self.runs,
            "aggregate": self.aggregate,
            "per_scan": [asdict(s) for s in self.per_scan],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvalReport":
        return cls(
            model=payload["model"],
            per_scan=[ScanScore(**s) for s in payload["per_scan"]],
            note=payload.get("note", HAUSDORFF_NOTE),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(json_safe(self.to_json()), indent=2, allow_nan=False))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "run", "scan_id", "dice", "hausdorff"])
            for s in self.per_scan:
                w.writerow([self.model, s.run, s.scan_id, s.dice, "" if s.hausdorff is None else s.hausdorff])


def score_volume(pred: np.ndarray, truth: np.ndarray, scan_id: str, run: int = 0) -> ScanScore:
    """Dice and Hausdorff of two stacked mask volumes treated as one 3D point set."""
    return ScanScore(scan_id, dice_score(pred, truth), hausdorff(pred, truth), run)
