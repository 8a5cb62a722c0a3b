"""Spatial enhancement tests: positional codes, refinement, attention."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sshnet import autograd as ag
from sshnet import vspm
from sshnet.autograd import Tensor
from sshnet.config import SMALL_DIMS, SMALL_MODEL
from sshnet.errors import DataValidationError


# ---------------------------------------------------------------------------
# positional encoding


def test_positional_encode_p1_d4_matches_direct_trig():
    got = vspm.positional_encode(1, 4)
    want = np.array([
        math.cos(1.0 / 10000.0 ** (1.0 / 4.0)),
        math.sin(1.0 / 10000.0 ** (2.0 / 4.0)),
        math.cos(1.0 / 10000.0 ** (3.0 / 4.0)),
        math.sin(1.0 / 10000.0 ** (4.0 / 4.0)),
    ])
    np.testing.assert_allclose(got, want, rtol=1e-15)


def test_positional_encode_p0_probe():
    """Hypothetical p=0: every even component 0, every odd component 1."""
    v = vspm.positional_encode(0, 8)
    np.testing.assert_array_equal(v[1::2], np.zeros(4))   # even j -> sin(0)
    np.testing.assert_array_equal(v[0::2], np.ones(4))    # odd j -> cos(0)


def test_positional_encode_injective_up_to_4096():
    d = 16
    codes = np.stack([vspm.positional_encode(p, d) for p in range(1, 4097)])
    assert np.unique(codes, axis=0).shape[0] == 4096


def test_positional_encode_grid_matches_scalar():
    grid = vspm.positional_encode_grid(3, 5, 6)
    for r in range(3):
        for c in range(5):
            p = r * 5 + c + 1
            np.testing.assert_array_equal(grid[r, c], vspm.positional_encode(p, 6))


# ---------------------------------------------------------------------------
# position tensor


def test_build_position_tensor_layout():
    rng = np.random.default_rng(2)
    seg_map = rng.integers(0, 16, size=(6, 4)).astype(np.uint16)
    out = vspm.build_position_tensor(seg_map, d=8, num_categories=16)
    assert out.shape == (6, 4, 9)
    np.testing.assert_array_equal(out[:, :, :8], vspm.positional_encode_grid(6, 4, 8))
    np.testing.assert_allclose(out[:, :, 8], seg_map / 16.0)


def test_build_position_tensor_rejects_bad_categories():
    seg_map = np.array([[0, 17]], dtype=np.uint16)
    with pytest.raises(DataValidationError):
        vspm.build_position_tensor(seg_map, d=4, num_categories=16)


# ---------------------------------------------------------------------------
# refinement and attention


@pytest.fixture
def setup():
    rng = np.random.default_rng(77)
    p = vspm.init_vspm_params(SMALL_MODEL, SMALL_DIMS, rng)
    regions = rng.normal(size=(SMALL_DIMS.K, SMALL_DIMS.D_l))
    seg_map = rng.integers(0, SMALL_DIMS.C_s,
                           size=(SMALL_DIMS.H_I, SMALL_DIMS.W_I)).astype(np.uint16)
    pos = vspm.build_position_tensor(seg_map, SMALL_MODEL.pos_dim, SMALL_DIMS.C_s)
    return p, regions, pos


def test_refine_positions_shape_and_linearity(setup):
    p, _, pos = setup
    refined = vspm.refine_positions(Tensor(pos), p, SMALL_MODEL.conv_stride)
    assert refined.shape == (4, 4, SMALL_MODEL.pos_channels)
    # conv with zero kernel leaves only the bias
    zero = vspm.VspmParams(
        conv_kernel=Tensor(np.zeros_like(p.conv_kernel.data)),
        conv_bias=p.conv_bias, query_proj=p.query_proj, combine_proj=p.combine_proj)
    out = vspm.refine_positions(Tensor(pos), zero, SMALL_MODEL.conv_stride)
    np.testing.assert_array_equal(out.data,
                                  np.broadcast_to(p.conv_bias.data, out.shape))


def test_refine_from_patches_bitwise_equal(setup):
    p, _, pos = setup
    via_conv = vspm.refine_positions(Tensor(pos), p, SMALL_MODEL.conv_stride)
    patches, hw = ag.conv_patches(pos, SMALL_MODEL.conv_kh, SMALL_MODEL.conv_kw,
                                  SMALL_MODEL.conv_stride)
    via_pat = vspm.refine_from_patches(Tensor(patches), p, hw)
    assert np.array_equal(via_conv.data, via_pat.data)


def test_attention_rows_sum_to_one(setup):
    p, regions, pos = setup
    out = vspm.vspm_forward(Tensor(regions), Tensor(pos), p, SMALL_MODEL)
    np.testing.assert_allclose(out.betas.data.sum(axis=1), 1.0, atol=1e-9)
    assert out.betas.data.shape == (SMALL_DIMS.K, 16)
    assert out.spatial.shape == (SMALL_DIMS.K, SMALL_MODEL.embed_dim)


def test_attention_lambda_zero_exactly_uniform(setup):
    p, regions, pos = setup
    from dataclasses import replace
    cfg = replace(SMALL_MODEL, attn_smooth=0.0)
    out = vspm.vspm_forward(Tensor(regions), Tensor(pos), p, cfg)
    m = out.betas.data.shape[1]
    assert np.all(out.betas.data == 1.0 / m)


def test_identical_refined_rows_collapse_context(setup):
    """If every refined cell is the same vector, the context equals it."""
    p, regions, _ = setup
    row = np.random.default_rng(5).normal(size=SMALL_MODEL.pos_channels)
    refined = Tensor(np.tile(row, (4, 4, 1)))
    betas, context = vspm.spatial_attention(Tensor(regions), refined, p,
                                            SMALL_MODEL.attn_smooth)
    np.testing.assert_allclose(context.data,
                               np.tile(row, (SMALL_DIMS.K, 1)), atol=1e-12)
    np.testing.assert_allclose(betas.data.sum(axis=1), 1.0, atol=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_attention_peak_monotone_in_smoothing(seed):
    rng = np.random.default_rng(seed)
    p = vspm.init_vspm_params(SMALL_MODEL, SMALL_DIMS, rng)
    regions = Tensor(rng.normal(size=(3, SMALL_DIMS.D_l)))
    refined = Tensor(rng.normal(size=(2, 2, SMALL_MODEL.pos_channels)))
    lam1, lam2 = sorted(rng.uniform(0.0, 8.0, size=2))
    b1, _ = vspm.spatial_attention(regions, refined, p, lam1)
    b2, _ = vspm.spatial_attention(regions, refined, p, lam2)
    assert np.all(b2.data.max(axis=1) >= b1.data.max(axis=1) - 1e-12)


def test_permutation_equivariance(setup):
    p, regions, pos = setup
    perm = np.random.default_rng(9).permutation(SMALL_DIMS.K)
    out = vspm.vspm_forward(Tensor(regions), Tensor(pos), p, SMALL_MODEL)
    out_p = vspm.vspm_forward(Tensor(regions[perm]), Tensor(pos), p, SMALL_MODEL)
    np.testing.assert_allclose(out_p.betas.data, out.betas.data[perm], atol=1e-12)
    np.testing.assert_allclose(out_p.spatial.data, out.spatial.data[perm], atol=1e-12)


def test_forward_matches_straight_line_oracle(setup):
    p, regions, pos = setup
    cfg = SMALL_MODEL
    out = vspm.vspm_forward(Tensor(regions), Tensor(pos), p, cfg)

    # independent recomputation
    kh, kw, cin, cout = p.conv_kernel.data.shape
    s = cfg.conv_stride
    h, w, _ = pos.shape
    ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
    refined = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            win = pos[i * s:i * s + kh, j * s:j * s + kw, :]
            refined[i, j] = np.einsum("abc,abco->o", win, p.conv_kernel.data) \
                + p.conv_bias.data
    flat = refined.reshape(-1, cout)
    q = regions @ p.query_proj.data.T
    cos = np.zeros((q.shape[0], flat.shape[0]))
    for i, qi in enumerate(q):
        for j, fj in enumerate(flat):
            cos[i, j] = np.clip(qi @ fj / max(np.linalg.norm(qi) * np.linalg.norm(fj),
                                              1e-300), -1, 1)
    e = np.exp(cfg.attn_smooth * cos
               - (cfg.attn_smooth * cos).max(axis=1, keepdims=True))
    betas = e / e.sum(axis=1, keepdims=True)
    spatial = (betas @ flat + q) @ p.combine_proj.data.T

    np.testing.assert_allclose(out.refined.data, refined, atol=1e-10)
    np.testing.assert_allclose(out.betas.data, betas, atol=1e-10)
    np.testing.assert_allclose(out.spatial.data, spatial, atol=1e-10)


def test_gradients_match_finite_differences(setup):
    p, regions, pos = setup
    rt, post = Tensor(regions[:4]), Tensor(pos)
    w = Tensor(np.random.default_rng(13).normal(size=(4, SMALL_MODEL.embed_dim)))

    def loss():
        out = vspm.vspm_forward(rt, post, p, SMALL_MODEL)
        return (out.spatial * w).sum()

    report = ag.grad_check(loss, p.named(), eps=1e-5, tol=1e-4, sample=40)
    assert report.passed, report
