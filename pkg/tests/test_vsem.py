"""Semantic enhancement tests against a straight-line numpy oracle."""
import math

import numpy as np
import pytest

from sshnet import autograd as ag
from sshnet import vsem
from sshnet.autograd import Tensor
from sshnet.config import SMALL_DIMS, SMALL_MODEL
from sshnet.errors import ConfigError


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def vsem_oracle(regions, seg_feat, p, mode):
    """Independent straight-line recomputation of the semantic branch."""
    pooled = seg_feat.mean(axis=(0, 1))
    seg = p.seg_fc_w.data @ pooled + p.seg_fc_b.data
    proj = regions @ p.region_proj.data.T
    d = seg.shape[0]
    cos = np.array([
        np.clip(seg @ r / max(np.linalg.norm(seg) * np.linalg.norm(r), 1e-300), -1, 1)
        for r in proj
    ])
    scaled = cos / math.sqrt(d)
    if mode == "sigmoid":
        alphas = sigmoid(scaled)
    else:
        e = np.exp(scaled - scaled.max())
        alphas = e / e.sum()
    weighted = alphas[:, None] * proj
    gate = np.tanh(weighted @ p.gate_proj.data.T)
    fused = gate * weighted + seg
    return seg, alphas, fused @ p.fuse_proj.data.T


@pytest.fixture
def setup():
    rng = np.random.default_rng(21)
    p = vsem.init_vsem_params(SMALL_MODEL, SMALL_DIMS, rng)
    regions = rng.normal(size=(SMALL_DIMS.K, SMALL_DIMS.D_l))
    seg_feat = rng.normal(size=(SMALL_DIMS.seg_h, SMALL_DIMS.seg_w, SMALL_DIMS.C_s))
    return p, regions, seg_feat


@pytest.mark.parametrize("mode", ["sigmoid", "softmax"])
def test_forward_matches_oracle(setup, mode):
    p, regions, seg_feat = setup
    out = vsem.vsem_forward(Tensor(regions), Tensor(seg_feat), p, mode)
    seg, alphas, enhanced = vsem_oracle(regions, seg_feat, p, mode)
    np.testing.assert_allclose(out.seg_embed.data, seg, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.alphas.data, alphas, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.enhanced.data, enhanced, rtol=1e-12, atol=1e-12)


def test_forward_equals_sequenced_ops(setup):
    """The pipeline must agree exactly with running the ops one by one."""
    p, regions, seg_feat = setup
    rt, st_ = Tensor(regions), Tensor(seg_feat)
    out = vsem.vsem_forward(rt, st_, p, "sigmoid")
    seg = vsem.pool_segmentation(st_, p)
    alphas = vsem.salience_weights(seg, rt, p, "sigmoid")
    enhanced = vsem.semantic_fuse(alphas, rt, seg, p)
    assert np.array_equal(out.seg_embed.data, seg.data)
    assert np.array_equal(out.alphas.data, alphas.data)
    assert np.array_equal(out.enhanced.data, enhanced.data)


def test_pool_segmentation_accepts_pooled_vector(setup):
    p, regions, seg_feat = setup
    full = vsem.vsem_forward(Tensor(regions), Tensor(seg_feat), p, "sigmoid")
    pooled = Tensor(seg_feat.mean(axis=(0, 1)))
    via_pooled = vsem.vsem_forward(Tensor(regions), pooled, p, "sigmoid")
    assert np.array_equal(full.enhanced.data, via_pooled.enhanced.data)


def test_salience_frozen_value_at_parallel_vectors():
    """cosine 1 at D=4 gives a salience of sigmoid(0.5)."""
    d = 4
    p = vsem.VsemParams(
        seg_fc_w=Tensor(np.eye(d)), seg_fc_b=Tensor(np.zeros(d)),
        region_proj=Tensor(np.eye(d)), gate_proj=Tensor(np.eye(d)),
        fuse_proj=Tensor(np.eye(d)),
    )
    seg = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    regions = Tensor(2.0 * seg.data[None, :])
    alphas = vsem.salience_weights(seg, regions, p, "sigmoid")
    assert alphas.data[0] == pytest.approx(sigmoid(0.5), abs=1e-12)
    assert alphas.data[0] == pytest.approx(0.6224593312018546, abs=1e-12)


def test_salience_sigmoid_open_interval_bounds():
    """1000 random draws stay strictly inside (sig(-1/sqrt(D)), sig(1/sqrt(D)))."""
    rng = np.random.default_rng(33)
    p = vsem.init_vsem_params(SMALL_MODEL, SMALL_DIMS, rng)
    d = SMALL_MODEL.embed_dim
    lo, hi = sigmoid(-1.0 / math.sqrt(d)), sigmoid(1.0 / math.sqrt(d))
    for _ in range(50):
        seg_feat = rng.normal(size=(SMALL_DIMS.seg_h, SMALL_DIMS.seg_w, SMALL_DIMS.C_s))
        regions = rng.normal(size=(20, SMALL_DIMS.D_l))
        out = vsem.vsem_forward(Tensor(regions), Tensor(seg_feat), p, "sigmoid")
        assert np.all(out.alphas.data > lo)
        assert np.all(out.alphas.data < hi)


def test_salience_softmax_sums_to_one():
    rng = np.random.default_rng(34)
    p = vsem.init_vsem_params(SMALL_MODEL, SMALL_DIMS, rng)
    for _ in range(20):
        seg_feat = rng.normal(size=(SMALL_DIMS.seg_h, SMALL_DIMS.seg_w, SMALL_DIMS.C_s))
        regions = rng.normal(size=(SMALL_DIMS.K, SMALL_DIMS.D_l))
        out = vsem.vsem_forward(Tensor(regions), Tensor(seg_feat), p, "softmax")
        assert out.alphas.data.sum() == pytest.approx(1.0, abs=1e-9)


def test_salience_rejects_unknown_mode(setup):
    p, regions, seg_feat = setup
    with pytest.raises(ConfigError):
        vsem.vsem_forward(Tensor(regions), Tensor(seg_feat), p, "relu")


def test_permutation_equivariance(setup):
    p, regions, seg_feat = setup
    perm = np.random.default_rng(1).permutation(SMALL_DIMS.K)
    out = vsem.vsem_forward(Tensor(regions), Tensor(seg_feat), p, "sigmoid")
    out_p = vsem.vsem_forward(Tensor(regions[perm]), Tensor(seg_feat), p, "sigmoid")
    np.testing.assert_allclose(out_p.alphas.data, out.alphas.data[perm], atol=1e-12)
    np.testing.assert_allclose(out_p.enhanced.data, out.enhanced.data[perm], atol=1e-12)


@pytest.mark.parametrize("mode", ["sigmoid", "softmax"])
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(55)
    cfg = SMALL_MODEL
    p = vsem.init_vsem_params(cfg, SMALL_DIMS, rng)
    regions = Tensor(rng.normal(size=(4, SMALL_DIMS.D_l)))
    seg_feat = Tensor(rng.normal(size=(SMALL_DIMS.seg_h, SMALL_DIMS.seg_w, SMALL_DIMS.C_s)))
    w = Tensor(rng.normal(size=(4, cfg.embed_dim)))

    def loss():
        out = vsem.vsem_forward(regions, seg_feat, p, mode)
        return (out.enhanced * w).sum() + (out.alphas * Tensor(np.ones(4))).sum()

    report = ag.grad_check(loss, p.named(), eps=1e-5, tol=1e-4, sample=40)
    assert report.passed, report
