import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import central_difference_grad, relative_error

from polycl.finetune import (
    FinetuneConfig,
    dice_loss,
    evaluate,
    load_segmentation_model,
    predict_slices,
    run_finetuning,
)
from polycl.metrics import ShapeMismatchError
from polycl.models import CheckpointMismatchError, EncoderConfig, SegmentationNet
from polycl.pretrain import PretrainConfig, run_pretraining

TINY = EncoderConfig(stage_widths=(4, 8), downsamples=1)


def _dice_loss_np(p, t, eps=1.0):
    return 1.0 - (2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)


def test_dice_loss_half_probability_example():
    target = torch.zeros(4, 4)
    target[:2] = 1.0
    pred = torch.full((4, 4), 0.5)
    # soft Dice 2*(0.5*8)/(8+8) = 0.5 in the eps -> 0 limit
    assert float(dice_loss(pred, target, eps=1e-12)) == pytest.approx(0.5)
    assert float(dice_loss(pred, target)) == pytest.approx(1 - 9 / 17)


def test_dice_loss_identity_on_large_mask():
    t = torch.zeros(256, 256)
    t[50:60, 50:60] = 1.0
    assert float(dice_loss(t, t)) < 1e-3
    assert float(dice_loss(1 - t, t)) > 0.99


def test_dice_loss_values():
    t = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert float(dice_loss(t, t)) == 0.0
    z = torch.zeros(2, 2)
    assert float(dice_loss(z, z)) == 0.0
    assert float(dice_loss(torch.ones(2, 2), z)) == pytest.approx(1 - 1 / 5)
    with pytest.raises(ShapeMismatchError):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))


@settings(max_examples=40)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(bool, (8, 8)))
def test_dice_loss_bounds(p, t):
    v = float(dice_loss(torch.from_numpy(p), torch.from_numpy(t)))
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(_dice_loss_np(p, t), abs=1e-12)


def test_dice_loss_gradient():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = rng.random((8, 8))
        t = (rng.random((8, 8)) < 0.4).astype(np.float64)
        pt = torch.tensor(p, requires_grad=True)
        dice_loss(pt, torch.from_numpy(t)).backward()
        fd = central_difference_grad(lambda v: _dice_loss_np(v, t), p)
        assert relative_error(pt.grad.numpy(), fd) < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(label_fraction=0)
    with pytest.raises(ValueError):
        FinetuneConfig(init="imagenet")


def test_from_checkpoint_requires_checkpoint(tmp_path, index):
    with pytest.raises(CheckpointMismatchError):
        run_finetuning(FinetuneConfig(epochs=1, init="from_checkpoint"), index, tmp_path, None, TINY)


def test_run_finetuning_end_to_end(tmp_path, index):
    pre = run_pretraining(PretrainConfig("M", epochs=1, batch_size=8, proj_dim=8), index.for_split("train"), tmp_path / "pt", TINY)
    cfg = FinetuneConfig(epochs=2, label_fraction=0.5, init="from_checkpoint", seed=1)
    res = run_finetuning(cfg, index, tmp_path / "ft", pre.final_checkpoint, TINY, name="pre")
    logs = [json.loads(x) for x in (tmp_path / "ft" / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in logs] == [0, 1] and all("val_dice" in r for r in logs)
    assert {s.scan_id for s in res.report.per_scan} == set(index.split.test_ids)
    assert (tmp_path / "ft" / "eval_report.json").exists()
    model = load_segmentation_model(res.best_checkpoint)
    again = evaluate(model, index.for_split("test"), name="pre")
    assert [s.dice for s in again.per_scan] == [s.dice for s in res.report.per_scan]


def test_predict_slices_shape(index):
    pix = np.stack([r.pixels for r in index.records[:5]])
    out = predict_slices(SegmentationNet(TINY), pix)
    assert out.shape == pix.shape and out.dtype == bool


def test_random_init_learns_phantoms(tmp_path):
    from polycl.dataset import build_index, make_split
    from polycl.volume_io import make_phantom, preprocess

    vols = [make_phantom(s, (32, 32, 40), (4, 8)) for s in range(10)]
    idx = build_index([preprocess(v, 0.3, 32) for v in vols], make_split([v.scan_id for v in vols], 2, 2, 0))
    enc = EncoderConfig(stage_widths=(8, 16, 32), downsamples=2)
    res = run_finetuning(FinetuneConfig(epochs=30), idx, tmp_path, None, enc)
    assert max(r["val_dice"] for r in res.metrics) > 0.5
