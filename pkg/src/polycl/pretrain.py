"""Contrastive pre-training of the encoder over sampled slice triplets."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetIndex
from .metrics import json_safe
from .models import Checkpoint, ContrastiveNet, EncoderConfig, config_hash
from .triplets import Strategy, TripletSampler, check_compatible, write_trace

log = logging.getLogger(__name__)


class ZeroNormEmbeddingError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class PretrainConfig:
    strategy: str = "M"
    epochs: int = 100
    batch_size: int = 20
    lr: float = 1e-4
    tau: float | None = None
    proj_dim: int = 256
    restart_period: int = 5
    seed: int = 0
    write_trace: bool = False

    def __post_init__(self) -> None:
        self.strategy = Strategy(self.strategy).value
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def temperature(self) -> float:
        """Explicit ``tau`` if set, otherwise ``1 / batch_size``."""
        return self.tau if self.tau is not None else 1.0 / self.batch_size


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroNormEmbeddingError("cosine similarity undefined for a zero-norm embedding")
    return (a * b).sum(dim=-1) / (na * nb)


def contrastive_loss(
    z: torch.Tensor, z_pos: torch.Tensor, z_neg: torch.Tensor, tau: float
) -> torch.Tensor:
    """Two-way softmax cross-entropy on cosine similarities, averaged over the batch.

    Per triplet: ``-log(e^{s+/tau} / (e^{s+/tau} + e^{s-/tau}))``, evaluated as
    ``logsumexp([s+, s-] / tau) - s+/tau`` so small temperatures cannot overflow.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s_pos = cosine_similarity(z, z_pos) / tau
    s_neg = cosine_similarity(z, z_neg) / tau
    per = torch.logsumexp(torch.stack([s_pos, s_neg], dim=-1), dim=-1) - s_pos
    return per.mean()


def _diagnostics(z, zp, zn, tau) -> dict:
    with torch.no_grad():
        return {
            "tau": tau,
            "norm_anchor": z.norm(dim=-1).tolist(),
            "norm_positive": zp.norm(dim=-1).tolist(),
            "norm_negative": zn.norm(dim=-1).tolist(),
        }


def make_scheduler(optimizer, restart_period: int):
    return torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(optimizer, T_0=restart_period)


def stack_pixels(index: DatasetIndex) -> tuple[torch.Tensor, dict[tuple[str, int], int]]:
    """All slices of ``index`` as one ``(N, 1, H, W)`` tensor plus a key -> row map."""
    arr = np.stack([r.pixels for r in index.records]).astype(np.float32)
    lookup = {(r.scan_id, r.slice_index): i for i, r in enumerate(index.records)}
    return torch.from_numpy(arr)[:, None], lookup


class MetricsLog:
    """JSON-lines metrics with wall-clock timings kept in a sibling file.

    Timings live in ``timings.jsonl`` so that ``metrics.jsonl`` is reproducible
    bit-for-bit across identical runs.
    """

    def __init__(self, out_dir: Path):
        self.path = out_dir / "metrics.jsonl"
        self.timing_path = out_dir / "timings.jsonl"
        self.path.write_text("")
        self.timing_path.write_text("")
        self.records: list[dict] = []

    def write(self, record: dict, wall_time: float) -> None:
        self.records.append(record)
        with self.path.open("a") as fh:
            fh.write(json.dumps(json_safe(record), sort_keys=True) + "\n")
        with self.timing_path.open("a") as fh:
            fh.write(json.dumps({"epoch": record["epoch"], "wall_time": wall_time}) + "\n")


@dataclass
class PretrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    metrics: list[dict]
    fallback_count: int


def run_pretraining(
    cfg: PretrainConfig,
    index: DatasetIndex,
    out_dir: str | Path,
    encoder_cfg: EncoderConfig = EncoderConfig(),
) -> PretrainResult:
    """Train encoder and projection head on ``index`` with the chosen strategy.

    Writes ``metrics.jsonl``, ``pretrained_final.pt`` and ``pretrained_best.pt``
    (lowest epoch-mean loss) into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    check_compatible(index, Strategy(cfg.strategy))
    seed_everything(cfg.seed)

    model = ContrastiveNet(encoder_cfg, cfg.proj_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    scheduler = make_scheduler(optimizer, cfg.restart_period)
    sampler = TripletSampler(index, cfg.strategy, seed=cfg.seed)
    pixels, lookup = stack_pixels(index)
    tau = cfg.temperature
    meta = {
        "pretrain_config": asdict(cfg),
        "temperature": tau,
        "optimizer": "adam",
        "encoder_config": encoder_cfg.to_dict(),
    }
    chash = config_hash(meta)
    metrics = MetricsLog(out_dir)
    trace_path = out_dir / "triplets.csv"
    if cfg.write_trace and trace_path.exists():
        trace_path.unlink()

    best_loss = math.inf
    best_path = out_dir / "pretrained_best.pt"
    t0 = time.perf_counter()
    for epoch, triplets in sampler.iter_epochs(cfg.epochs):
        if cfg.write_trace:
            write_trace(trace_path, epoch, triplets)
        model.train()
        lr_at_start = optimizer.param_groups[0]["lr"]
        n_batches = max(1, math.ceil(len(triplets) / cfg.batch_size))
        losses = []
        for b in range(n_batches):
            batch = triplets[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if not batch:
                continue
            rows = [lookup[(r.scan_id, r.slice_index)] for t in batch for r in (t.anchor, t.positive, t.negative)]
            x = pixels[rows]
            z = model(x).view(len(batch), 3, -1)
            za, zp, zn = z[:, 0], z[:, 1], z[:, 2]
            loss = contrastive_loss(za, zp, zn, tau)
            if not torch.isfinite(loss):
                diag = _diagnostics(za, zp, zn, tau)
                (out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2))
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}", diag)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step(epoch + (b + 1) / n_batches)
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        metrics.write(
            {"epoch": epoch, "mean_loss": mean_loss, "lr": lr_at_start, "fallbacks": sampler.fallback_count},
            time.perf_counter() - t0,
        )
        log.info("pretrain epoch %d loss %.5f lr %.2e", epoch, mean_loss, lr_at_start)
        if mean_loss < best_loss:
            best_loss = mean_loss
            Checkpoint(model.state_dict(), encoder_cfg, "pretrained", chash, {**meta, "epoch": epoch}).save(best_path)

    final_path = Checkpoint(
        model.state_dict(), encoder_cfg, "pretrained", chash, {**meta, "epoch": cfg.epochs - 1}
    ).save(out_dir / "pretrained_final.pt")
    if not best_path.exists():
        Checkpoint(model.state_dict(), encoder_cfg, "pretrained", chash, meta).save(best_path)
    return PretrainResult(final_path, best_path, metrics.records, sampler.fallback_count)
