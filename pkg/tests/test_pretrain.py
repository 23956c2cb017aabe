import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import central_difference_grad, contrastive_loss_reference, relative_error

from polycl.models import Checkpoint, EncoderConfig
from polycl.pretrain import (
    PretrainConfig,
    ZeroNormEmbeddingError,
    contrastive_loss,
    cosine_similarity,
    make_scheduler,
    run_pretraining,
)

# -log(e / (e + e^-1)) = log(1 + e^-2) for similarities +1 / -1 at tau = 1
LOSS_ALIGNED_TAU1 = 0.12692801104297263

TINY = EncoderConfig(stage_widths=(4, 8), downsamples=1)


def _t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def test_loss_equal_similarities_is_ln2():
    z = _t([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]])
    for tau in (0.05, 0.5, 1.0, 7.0):
        assert abs(float(contrastive_loss(z, z, z, tau)) - math.log(2)) <= 1e-9


def test_loss_closed_form_aligned():
    z = _t([[1.0, 0.0]])
    assert float(contrastive_loss(z, z, -z, 1.0)) == pytest.approx(LOSS_ALIGNED_TAU1, abs=1e-12)
    assert LOSS_ALIGNED_TAU1 == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-15)


def test_loss_small_tau_is_finite():
    z = _t([[1.0, 0.0]])
    out = contrastive_loss(z, -z, z, 1e-4)
    assert torch.isfinite(out) and float(out) == pytest.approx(2e4, rel=1e-9)


vec3 = arrays(np.float64, (4, 3), elements=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))


@settings(max_examples=50, deadline=None)
@given(vec3, vec3, vec3, st.floats(0.05, 5))
def test_loss_matches_reference(z, zp, zn, tau):
    got = float(contrastive_loss(_t(z), _t(zp), _t(zn), tau))
    assert got == pytest.approx(contrastive_loss_reference(z, zp, zn, tau), rel=1e-9, abs=1e-12)
    assert got >= 0.0


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z, zp, zn = (rng.normal(size=(1, 8)) for _ in range(3))
        zt = _t(z).requires_grad_(True)
        contrastive_loss(zt, _t(zp), _t(zn), 0.3).backward()
        fd = central_difference_grad(lambda v: contrastive_loss_reference(v, zp, zn, 0.3), z)
        assert relative_error(zt.grad.numpy(), fd) < 1e-4


def test_zero_norm_raises():
    z = _t([[0.0, 0.0]])
    with pytest.raises(ZeroNormEmbeddingError):
        contrastive_loss(z, _t([[1.0, 0.0]]), _t([[0.0, 1.0]]), 1.0)
    with pytest.raises(ValueError):
        contrastive_loss(_t([[1.0, 0.0]]), _t([[1.0, 0.0]]), _t([[0.0, 1.0]]), 0.0)


def test_cosine_similarity_bounds():
    a = _t(np.random.default_rng(1).normal(size=(10, 5)))
    s = cosine_similarity(a, -a)
    assert torch.allclose(s, torch.full((10,), -1.0, dtype=torch.float64))


def test_default_temperature_is_inverse_batch():
    assert PretrainConfig(batch_size=20).temperature == 1 / 20
    assert PretrainConfig(batch_size=20, tau=0.5).temperature == 0.5


def test_scheduler_restarts_every_period():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.Adam([p], lr=1.0)
    sched = make_scheduler(opt, 5)
    lrs = []
    for epoch in range(10):
        lrs.append(opt.param_groups[0]["lr"])
        for b in range(4):
            sched.step(epoch + (b + 1) / 4)
    assert lrs[0] == lrs[5] == 1.0
    assert lrs[4] < lrs[3] < lrs[1]


def test_run_pretraining_artifacts(tmp_path, index):
    cfg = PretrainConfig("M", epochs=2, batch_size=8, proj_dim=16, seed=3, write_trace=True)
    res = run_pretraining(cfg, index.for_split("train"), tmp_path, TINY)
    assert res.final_checkpoint.exists() and res.best_checkpoint.exists()
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert all(math.isfinite(r["mean_loss"]) for r in lines)
    assert (tmp_path / "triplets.csv").exists()
    ck = Checkpoint.load(res.final_checkpoint)
    assert ck.stage == "pretrained" and ck.encoder_config == TINY
    assert all(k.startswith("encoder.") or k.startswith("head.") for k in ck.state_dict)


def test_run_pretraining_deterministic(tmp_path, index):
    cfg = PretrainConfig("S", epochs=1, batch_size=8, proj_dim=8, seed=1)
    run_pretraining(cfg, index.for_split("train"), tmp_path / "a", TINY)
    run_pretraining(cfg, index.for_split("train"), tmp_path / "b", TINY)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def _rotation(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q


@settings(max_examples=30, deadline=None)
@given(vec3, vec3, vec3, st.integers(0, 1000))
def test_loss_rotation_invariant(z, zp, zn, seed):
    r = _rotation(3, seed)
    before = float(contrastive_loss(_t(z), _t(zp), _t(zn), 0.2))
    after = float(contrastive_loss(_t(z @ r), _t(zp @ r), _t(zn @ r), 0.2))
    assert after == pytest.approx(before, rel=1e-9, abs=1e-12)


def test_loss_monotone_in_similarities():
    z = _t([[1.0, 0.0]])
    angles = np.linspace(0, np.pi, 9)
    neg = _t([[0.0, 1.0]])
    pos_losses = [float(contrastive_loss(z, _t([[np.cos(a), np.sin(a)]]), neg, 0.5)) for a in angles]
    assert all(a < b for a, b in zip(pos_losses, pos_losses[1:]))  # falling sim(z, z+) raises the loss
    pos = _t([[0.0, 1.0]])
    neg_losses = [float(contrastive_loss(z, pos, _t([[np.cos(a), np.sin(a)]]), 0.5)) for a in angles]
    assert all(a > b for a, b in zip(neg_losses, neg_losses[1:]))  # falling sim(z, z-) lowers the loss


def test_loss_vanishes_as_tau_shrinks():
    z = _t([[1.0, 0.0]])
    vals = [float(contrastive_loss(z, z, _t([[0.0, 1.0]]), tau)) for tau in (1.0, 0.5, 0.2, 0.1, 0.05)]
    assert all(a > b > 0 for a, b in zip(vals, vals[1:]))


def test_pretraining_reduces_loss(tmp_path):
    from polycl.dataset import build_index
    from polycl.volume_io import make_phantom, preprocess

    vols = [make_phantom(s, (32, 32, 40), (3, 7)) for s in range(10)]
    idx = build_index([preprocess(v, 0.3, 16) for v in vols])
    res = run_pretraining(PretrainConfig("M", epochs=30, batch_size=20, proj_dim=16), idx, tmp_path, TINY)
    assert res.metrics[-1]["mean_loss"] < res.metrics[0]["mean_loss"]
