"""Supervised fine-tuning with a soft Dice loss, and model evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetIndex, EmptyTrainingSetError, subsample_labels
from .metrics import EvalReport, ShapeMismatchError, score_volume
from .models import (
    Checkpoint,
    CheckpointMismatchError,
    EncoderConfig,
    SegmentationNet,
    config_hash,
)
from .pretrain import MetricsLog, make_scheduler, seed_everything

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-3
    label_fraction: float = 1.0
    init: str = "random"
    restart_period: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.init not in ("random", "from_checkpoint"):
            raise ValueError(f"init must be 'random' or 'from_checkpoint', got {self.init!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """``1 - (2 Σ p·t + eps) / (Σ p + Σ t + eps)`` over the whole batch."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


def load_pretrained_encoder(model: SegmentationNet, ckpt: Checkpoint, encoder_cfg: EncoderConfig) -> None:
    """Copy encoder weights from a pre-training checkpoint; the projection head is dropped."""
    if ckpt.stage != "pretrained":
        raise CheckpointMismatchError(f"checkpoint stage is {ckpt.stage!r}, expected 'pretrained'")
    if ckpt.encoder_config != encoder_cfg:
        raise CheckpointMismatchError(
            f"checkpoint encoder {ckpt.encoder_config} does not match {encoder_cfg}"
        )
    model.encoder.load_state_dict(ckpt.encoder_state())


def _tensors(records) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([r.pixels for r in records]).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack([r.mask for r in records]).astype(np.float32))[:, None]
    return x, y


@torch.no_grad()
def predict_slices(model: SegmentationNet, pixels: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Binary masks for a ``(N, H, W)`` stack of slices."""
    model.eval()
    out = []
    for i in range(0, len(pixels), batch_size):
        x = torch.from_numpy(np.asarray(pixels[i : i + batch_size], dtype=np.float32))[:, None]
        out.append((torch.sigmoid(model(x)) > 0.5)[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + pixels.shape[1:], dtype=bool)


def evaluate(model: SegmentationNet, index: DatasetIndex, name: str = "model", run: int = 0) -> EvalReport:
    """Per-scan volumetric Dice and Hausdorff over the indexed slices."""
    report = EvalReport(name)
    for scan_id, positions in index.by_scan.items():
        recs = [index.records[p] for p in positions]
        recs.sort(key=lambda r: r.slice_index)
        if any(r.mask is None for r in recs):
            raise ValueError(f"scan {scan_id} has unlabeled slices; cannot evaluate")
        pred = predict_slices(model, np.stack([r.pixels for r in recs]))
        truth = np.stack([r.mask for r in recs])
        report.per_scan.append(score_volume(pred, truth, scan_id, run))
    return report


def _mean_dice(model, index: DatasetIndex) -> float:
    if len(index) == 0:
        return float("nan")
    return float(np.mean([s.dice for s in evaluate(model, index).per_scan]))


@dataclass
class FinetuneResult:
    model: SegmentationNet
    report: EvalReport
    best_checkpoint: Path
    metrics: list[dict]


def run_finetuning(
    cfg: FinetuneConfig,
    index: DatasetIndex,
    out_dir: str | Path,
    checkpoint: Checkpoint | str | Path | None = None,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    name: str = "model",
    run: int = 0,
) -> FinetuneResult:
    """Fine-tune encoder + fresh decoder on the label-subsampled training split.

    Validation Dice is logged every epoch and the best epoch's weights are
    restored before the test split is scored.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)

    model = SegmentationNet(encoder_cfg)
    if cfg.init == "from_checkpoint":
        if checkpoint is None:
            raise CheckpointMismatchError("init=from_checkpoint but no checkpoint given")
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        load_pretrained_encoder(model, checkpoint, encoder_cfg)

    labeled = subsample_labels(index, cfg.label_fraction, cfg.seed)
    train = labeled.for_split("train")
    train_recs = [r for r in train.records if r.mask is not None]
    if not train_recs:
        raise EmptyTrainingSetError("no labeled training slices after subsampling")
    val = index.for_split("val")
    test = index.for_split("test")
    x_train, y_train = _tensors(train_recs)

    meta = {"finetune_config": asdict(cfg), "encoder_config": encoder_cfg.to_dict(), "optimizer": "adam"}
    chash = config_hash(meta)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    scheduler = make_scheduler(optimizer, cfg.restart_period)
    gen = torch.Generator().manual_seed(cfg.seed)
    metrics = MetricsLog(out_dir)
    best_path = out_dir / "finetuned_best.pt"
    best_dice = -math.inf
    t0 = time.perf_counter()

    n = len(train_recs)
    n_batches = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        model.train()
        lr_at_start = optimizer.param_groups[0]["lr"]
        order = torch.randperm(n, generator=gen)
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            probs = torch.sigmoid(model(x_train[idx]))
            loss = dice_loss(probs, y_train[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step(epoch + (b + 1) / n_batches)
            losses.append(float(loss.detach()))
        val_dice = _mean_dice(model, val) if len(val) else float("nan")
        metrics.write(
            {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr_at_start, "val_dice": val_dice},
            time.perf_counter() - t0,
        )
        log.info("finetune epoch %d loss %.4f val dice %.4f", epoch, np.mean(losses), val_dice)
        # without a validation split, the last epoch is kept
        score = val_dice if val_dice == val_dice else epoch
        if score > best_dice:
            best_dice = score
            Checkpoint(model.state_dict(), encoder_cfg, "finetuned", chash, {**meta, "epoch": epoch}).save(best_path)

    best = Checkpoint.load(best_path)
    model.load_state_dict(best.state_dict)
    eval_index = test if len(test) else val
    report = evaluate(model, eval_index, name=name, run=run)
    report_path = out_dir / "eval_report.json"
    report.save(report_path)
    return FinetuneResult(model, report, best_path, metrics.records)


def load_segmentation_model(path: str | Path) -> SegmentationNet:
    ckpt = Checkpoint.load(path)
    if ckpt.stage != "finetuned":
        raise CheckpointMismatchError(f"checkpoint stage is {ckpt.stage!r}, expected 'finetuned'")
    model = SegmentationNet(ckpt.encoder_config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model
