import math

import numpy as np
import numpy.testing as npt
import pytest

from spsalab import autodiff as ad
from spsalab.attention import (
    CATEGORIES,
    AttentionState,
    SegProbMap,
    SpsaParams,
    export_attention_map,
    feature_attention,
    fuse_attention,
    init_alpha,
    seg_attention,
    seg_transform,
    spsa_forward,
    spsa_leaves,
)
from spsalab.autodiff import Graph, ShapeError
from spsalab.data import Region, synth_segmap


def graph64():
    return Graph(np.float64)


def identity_leaves(g, c):
    return g.leaf(np.eye(c)), g.leaf(np.eye(c))


# ---------------------------------------------------------------------------
# SegProbMap

def test_segmap_validates_channel_sum():
    bad = np.zeros((8, 4, 4), dtype=np.float32)
    bad[0] = 0.9
    with pytest.raises(ValueError):
        SegProbMap(bad)


def test_segmap_requires_divisible_extents():
    arr = np.zeros((8, 6, 8), dtype=np.float32)
    arr[0] = 1.0
    with pytest.raises(ShapeError):
        SegProbMap(arr)


def test_segmap_accepts_soft_probabilities():
    arr = np.full((8, 4, 4), 1.0 / 8.0, dtype=np.float32)
    m = SegProbMap(arr)
    assert m.cell_grid() == (1, 1)


# ---------------------------------------------------------------------------
# feature attention

def test_feature_attention_identical_pixels_is_uniform():
    g = graph64()
    x = g.leaf(np.tile([[1.0], [2.0], [0.5]], (1, 6)))  # 6 identical pixels
    wf, wg = identity_leaves(g, 3)
    beta = feature_attention(x, wf, wg)
    npt.assert_allclose(beta.data, np.full((6, 6), 1.0 / 6.0), atol=1e-12)


def test_feature_attention_closed_form_two_pixels():
    g = graph64()
    x = g.leaf([[1.0, 0.0], [0.0, 1.0]])
    wf, wg = identity_leaves(g, 2)
    beta = feature_attention(x, wf, wg)
    e = math.e
    expected = np.array([[e / (e + 1), 1 / (e + 1)],
                         [1 / (e + 1), e / (e + 1)]])
    npt.assert_allclose(beta.data, expected, atol=1e-12)


def test_feature_attention_scaling_preserves_argmax():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 7))
    argmaxes = []
    for c in (1.0, 0.3, 2.5):
        g = graph64()
        beta = feature_attention(g.leaf(c * x), *identity_leaves(g, 4))
        argmaxes.append(beta.data.argmax(axis=1))
    npt.assert_array_equal(argmaxes[0], argmaxes[1])
    npt.assert_array_equal(argmaxes[0], argmaxes[2])


def test_feature_attention_rejects_nonfinite():
    g = graph64()
    x = g.leaf(np.array([[1.0, np.inf], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        feature_attention(x, *identity_leaves(g, 2))


def test_attention_rows_normalized_random_trials():
    rng = np.random.default_rng(1)
    for _ in range(15):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(2, 30))
        g = Graph(np.float32)
        x = g.leaf(rng.normal(size=(c, n)))
        wf = g.leaf(rng.normal(size=(c, c)))
        wg = g.leaf(rng.normal(size=(c, c)))
        beta = feature_attention(x, wf, wg)
        npt.assert_allclose(beta.data.sum(axis=1), 1.0, atol=1e-5)
        assert (beta.data >= 0).all()


# ---------------------------------------------------------------------------
# init_alpha

def test_init_alpha_direct_quotient():
    x = np.full((2, 4), 2.0)
    conv = np.full((3, 5), 0.5)
    assert init_alpha(x, conv) == pytest.approx(4.0)


def test_init_alpha_same_tensor_is_one():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 3))
    assert init_alpha(x, x) == pytest.approx(1.0)


def test_init_alpha_defining_property():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    conv = rng.normal(size=(4, 6))
    a0 = init_alpha(x, conv)
    z = a0 * conv
    assert abs(np.mean(np.abs(z)) - np.mean(np.abs(x))) <= 1e-6


def test_init_alpha_rejects_zero_transform():
    with pytest.raises(ValueError):
        init_alpha(np.ones((2, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# seg_transform

def _one_hot_map(category, h, w):
    arr = np.zeros((8, h, w), dtype=np.float32)
    arr[CATEGORIES.index(category)] = 1.0
    return arr


def test_seg_transform_alpha_zero_annihilates():
    g = graph64()
    rng = np.random.default_rng(4)
    kernel = g.leaf(rng.normal(size=(3, 8, 4, 4)))
    bias = g.leaf(np.zeros(3))
    m = g.leaf(_one_hot_map("sky", 8, 8)[None])
    z = seg_transform(m, kernel, bias, g.leaf(0.0))
    npt.assert_array_equal(z.data, np.zeros((1, 3, 4)))


def test_seg_transform_one_hot_sums_kernel_slice():
    g = graph64()
    rng = np.random.default_rng(5)
    kernel_arr = rng.normal(size=(3, 8, 4, 4))
    kernel = g.leaf(kernel_arr)
    bias = g.leaf(np.zeros(3))
    alpha = g.leaf(1.7)
    m = g.leaf(_one_hot_map("sky", 4, 4)[None])  # one output site
    z = seg_transform(m, kernel, bias, alpha)
    expected = 1.7 * kernel_arr[:, CATEGORIES.index("sky")].sum(axis=(1, 2))
    npt.assert_allclose(z.data[0, :, 0], expected, atol=1e-12)


def test_seg_transform_linear_in_alpha():
    g = graph64()
    rng = np.random.default_rng(6)
    kernel_arr = rng.normal(size=(2, 8, 4, 4))
    bias = np.zeros(2)
    m = _one_hot_map("water", 8, 12)[None]
    z1 = seg_transform(g.leaf(m), g.leaf(kernel_arr), g.leaf(bias), g.leaf(0.8))
    g2 = graph64()
    z2 = seg_transform(g2.leaf(m), g2.leaf(kernel_arr), g2.leaf(bias), g2.leaf(1.6))
    npt.assert_allclose(z2.data, 2.0 * z1.data, atol=1e-12)


def test_seg_transform_rejects_n_mismatch():
    g = graph64()
    kernel = g.leaf(np.zeros((2, 8, 4, 4)))
    bias = g.leaf(np.zeros(2))
    m = g.leaf(_one_hot_map("sky", 8, 8)[None])
    with pytest.raises(ShapeError):
        seg_transform(m, kernel, bias, g.leaf(1.0), n_expected=9)


# ---------------------------------------------------------------------------
# seg attention

def _orthogonal_kernel(c):
    """Transform kernel mapping category k's one-hot cell to alpha * e_k."""
    kernel = np.zeros((c, 8, 4, 4))
    for k in range(min(c, 8)):
        kernel[k, k] = 1.0 / 16.0
    return kernel


def test_seg_attention_uniform_map_is_uniform():
    g = graph64()
    m = g.leaf(np.full((1, 8, 8, 8), 1.0 / 8.0))
    z = seg_transform(m, g.leaf(_orthogonal_kernel(4)), g.leaf(np.zeros(4)),
                      g.leaf(1.0))
    beta = seg_attention(z, *identity_leaves(g, 4))
    npt.assert_allclose(beta.data, np.full((1, 4, 4), 0.25), atol=1e-12)


def two_region_map(h=8, w=8, left="sky", right="grass"):
    return synth_segmap(h, w, [Region(category=right, kind="halfplane",
                                      axis="x", at=w // 2)], base=left)


def test_seg_attention_two_regions_concentrates_within():
    g = graph64()
    seg = two_region_map(8, 16)  # grid 2x4, left two columns sky
    z = seg_transform(g.leaf(seg.data[None]), g.leaf(_orthogonal_kernel(4)),
                      g.leaf(np.zeros(4)), g.leaf(2.0))
    beta = seg_attention(z, *identity_leaves(g, 4)).data[0]
    n = beta.shape[0]
    region = (np.arange(n) % 4 >= 2).astype(int)  # grid row-major, right half
    for j in range(n):
        within = beta[j][region == region[j]]
        cross = beta[j][region != region[j]]
        assert within.min() > cross.max()


def test_seg_attention_permutation_equivariance():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(3, 6))
    perm = rng.permutation(6)
    g = graph64()
    beta = seg_attention(g.leaf(z), *identity_leaves(g, 3)).data
    g2 = graph64()
    beta_p = seg_attention(g2.leaf(z[:, perm]), *identity_leaves(g2, 3)).data
    npt.assert_allclose(beta_p, beta[np.ix_(perm, perm)], atol=1e-12)


# ---------------------------------------------------------------------------
# fuse_attention

def _fuse_scalar_oracle(bs, bf):
    # independent scalar evaluation of the fusion rule
    w = 0.0 if bs + bf == 0 else abs(bs - bf) / (bs + bf)
    return w, w * bs + (1.0 - w) * bf


def test_fuse_equal_maps_is_identity():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(5, 5))
    g = graph64()
    beta = ad.softmax_rows(g.leaf(logits))
    w, combined = fuse_attention(beta, beta)
    npt.assert_array_equal(w.data, np.zeros((5, 5)))
    # pre-normalization the fixed point is bit-exact (see the scalar test);
    # the final per-row renormalization divides by a sum that is 1 +- 1 ulp
    npt.assert_allclose(combined.data, beta.data, rtol=1e-15)


def test_fuse_equal_scalars_fixed_point_is_exact():
    rng = np.random.default_rng(80)
    vals = rng.random(64)
    g = graph64()
    bs = ad.softmax_rows(g.leaf(vals.reshape(8, 8)))
    diff = ad.absolute(ad.sub(bs, bs))
    w = ad.safe_div(diff, ad.add(bs, bs))
    one = g.constant(np.ones((8, 8)))
    combined_pre = ad.add(ad.mul(w, bs), ad.mul(ad.sub(one, w), bs))
    npt.assert_array_equal(combined_pre.data, bs.data)


def test_fuse_single_entry_limits():
    g = graph64()
    bs = g.leaf([[1.0, 0.0], [0.0, 1.0]])
    bf = g.leaf([[0.0, 1.0], [1.0, 0.0]])
    w, combined = fuse_attention(bs, bf)
    npt.assert_array_equal(w.data, np.ones((2, 2)))
    # w == 1 keeps only the segmentation map
    npt.assert_array_equal(combined.data, bs.data)


def test_fuse_scalar_example_against_oracle():
    w, pre = _fuse_scalar_oracle(0.1, 0.3)
    assert w == pytest.approx(0.5)
    assert pre == pytest.approx(0.2)
    g = graph64()
    bs = g.leaf([[0.1, 0.9], [0.9, 0.1]])
    bf = g.leaf([[0.3, 0.7], [0.7, 0.3]])
    w_t, combined = fuse_attention(bs, bf)
    assert w_t.data[0, 0] == pytest.approx(0.5)
    ws, pres = zip(*(_fuse_scalar_oracle(s, f) for s, f in
                     zip(bs.data.ravel(), bf.data.ravel())))
    npt.assert_allclose(w_t.data.ravel(), ws, atol=1e-12)
    pre = np.array(pres).reshape(2, 2)
    npt.assert_allclose(combined.data, pre / pre.sum(axis=1, keepdims=True),
                        atol=1e-12)


def test_fuse_random_pairs_weight_in_unit_interval():
    rng = np.random.default_rng(9)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        g = Graph(np.float32)
        bs = ad.softmax_rows(g.leaf(rng.normal(scale=3, size=(n, n))))
        bf = ad.softmax_rows(g.leaf(rng.normal(scale=3, size=(n, n))))
        w, combined = fuse_attention(bs, bf)
        assert (w.data >= 0).all() and (w.data <= 1).all()
        npt.assert_allclose(combined.data.sum(axis=1), 1.0, atol=1e-5)
        assert (combined.data >= 0).all()


def test_fuse_rejects_unnormalized_inputs():
    g = graph64()
    with pytest.raises(ValueError):
        fuse_attention(g.leaf([[0.5, 0.1], [0.1, 0.5]]),
                       g.leaf([[0.5, 0.5], [0.5, 0.5]]))


# ---------------------------------------------------------------------------
# spsa_forward

def _params_for(c, seed=0):
    return SpsaParams.initialize(c, np.random.default_rng(seed))


def test_spsa_uniform_attention_averages_h():
    c = 3
    params = _params_for(c)
    x_col = np.array([0.4, -0.2, 1.0])
    x = np.tile(x_col[:, None], (1, 16)).reshape(1, c, 4, 4)
    m = np.full((1, 8, 16, 16), 1.0 / 8.0)
    g = graph64()
    leaves = spsa_leaves(g, params)
    y, states = spsa_forward(g.leaf(x), g.leaf(m), leaves, residual=False,
                             want_state=True)
    h_cols = params.wh.astype(np.float64) @ x.reshape(c, 16)
    expected = h_cols.mean(axis=1)
    for j in range(16):
        npt.assert_allclose(y.data.reshape(c, 16)[:, j], expected, atol=1e-6)
    npt.assert_allclose(states[0].beta_combined, 1.0 / 16.0, atol=1e-9)


def test_spsa_output_matches_state_oracle():
    # recompute the projected output o_j = sum_i beta[j,i] h(x_i) from the
    # returned state with plain einsum and compare
    c = 4
    params = _params_for(c, seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, c, 4, 4))
    seg = two_region_map(16, 16).data[None]
    g = graph64()
    leaves = spsa_leaves(g, params)
    y, states = spsa_forward(g.leaf(x), g.leaf(seg), leaves, residual=False,
                             want_state=True)
    h_cols = params.wh.astype(np.float64) @ x.reshape(c, 16)
    oracle = np.einsum("ji,ci->cj", states[0].beta_combined, h_cols)
    npt.assert_allclose(y.data.reshape(c, 16), oracle, atol=1e-9)


def test_spsa_identity_attention_returns_h():
    # delta attention: o = h(x) when beta is the identity matrix
    c = 3
    params = _params_for(c, seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(c, 9))
    h_cols = params.wh.astype(np.float64) @ x
    oracle = np.einsum("ji,ci->cj", np.eye(9), h_cols)
    npt.assert_allclose(oracle, h_cols, atol=1e-15)


def test_spsa_residual_gamma_zero_is_identity():
    c = 3
    params = _params_for(c, seed=5)
    params.gamma = np.asarray(0.0, dtype=np.float32)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, c, 4, 4))
    m = two_region_map(16, 16).data[None]
    g = graph64()
    y, _ = spsa_forward(g.leaf(x), g.leaf(m), spsa_leaves(g, params),
                        residual=True)
    npt.assert_allclose(y.data, x, atol=1e-12)


def test_spsa_permutation_equivariance():
    c = 3
    params = _params_for(c, seed=7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(c, 4, 4))
    seg = two_region_map(16, 16).data
    perm = rng.permutation(16)

    def run(xa, sa):
        g = graph64()
        y, _ = spsa_forward(g.leaf(xa[None]), g.leaf(sa[None]),
                            spsa_leaves(g, params), residual=False)
        return y.data.reshape(c, 16)

    base = run(x, seg)
    x_p = x.reshape(c, 16)[:, perm].reshape(c, 4, 4)
    # permute HR 4x4 blocks consistently with the flattened cell order
    cells = seg.reshape(8, 4, 4, 4, 4).transpose(1, 3, 0, 2, 4).reshape(16, 8, 4, 4)
    seg_p = cells[perm].reshape(4, 4, 8, 4, 4).transpose(2, 0, 3, 1, 4).reshape(8, 16, 16)
    permuted = run(x_p, seg_p)
    npt.assert_allclose(permuted, base[:, perm], atol=1e-10)


def test_spsa_alpha_zero_strict_mode_finite():
    c = 3
    params = _params_for(c, seed=9)
    params.alpha = np.asarray(0.0, dtype=np.float32)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, c, 4, 4))
    m = two_region_map(16, 16).data[None]
    g = graph64()
    y, states = spsa_forward(g.leaf(x), g.leaf(m), spsa_leaves(g, params),
                             residual=False, want_state=True)
    st = states[0]
    npt.assert_allclose(st.beta_seg, 1.0 / 16.0, atol=1e-12)
    npt.assert_allclose(st.beta_combined.sum(axis=1), 1.0, atol=1e-9)
    assert np.isfinite(y.data).all()


def test_spsa_full_gradient_check():
    c = 4
    params = _params_for(c, seed=11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, c, 4, 4)) * 0.5 + 0.2
    seg = two_region_map(16, 16).data[None]
    names = list(params.named(prefix=""))
    weights = np.linspace(0.5, 1.5, c * 16).reshape(1, c, 4, 4)

    def build(g, leaves):
        d = dict(zip(names, leaves))
        y, _ = spsa_forward(g.leaf(x), g.leaf(seg), d, residual=True)
        return ad.sum_all(ad.mul(y, g.leaf(weights)))

    arrays = [params.named(prefix="")[n] for n in names]
    err = ad.finite_diff_check(build, arrays, eps=1e-5, max_samples=250, seed=13)
    assert err <= 1e-5


def test_spsa_cell_cap():
    c = 2
    params = _params_for(c, seed=20)
    g = Graph(np.float32)
    x = g.leaf(np.zeros((1, c, 2, 2), dtype=np.float32))
    m = g.leaf(np.full((1, 8, 8, 8), 1.0 / 8.0, dtype=np.float32))
    with pytest.raises(ShapeError):
        spsa_forward(x, m, spsa_leaves(g, params), max_cells=3)


def test_spsa_gradient_reaches_input():
    c = 3
    params = _params_for(c, seed=14)
    rng = np.random.default_rng(15)
    x = rng.normal(size=(1, c, 4, 4))

    def build(g, leaves):
        y, _ = spsa_forward(leaves[0], g.leaf(two_region_map(16, 16).data[None]),
                            spsa_leaves(g, params, param=False), residual=False)
        return ad.mean_all(ad.mul(y, y))

    assert ad.finite_diff_check(build, [x], eps=1e-5, max_samples=48) <= 1e-6


# ---------------------------------------------------------------------------
# export_attention_map

def _uniform_state(n):
    u = np.full((n, n), 1.0 / n)
    return AttentionState(beta_fea=u, beta_seg=u, w_seg=np.zeros((n, n)),
                          beta_combined=u)


def test_export_uniform_renders_mid_gray():
    img = export_attention_map(_uniform_state(16), "combined", 5, (16, 16))
    assert img.shape == (16, 16)
    qy, qx = divmod(5, 4)
    mark = np.zeros((16, 16), dtype=bool)
    cy, cx = qy * 4 + 2, qx * 4 + 2
    mark[cy - 1:cy + 2, cx - 1:cx + 2] = True
    assert (img[mark] == 255).all()
    rest = img[~mark]
    assert rest.min() == rest.max()
    assert rest[0] in (127, 128)


def test_export_delta_attention_single_block():
    n = 16
    beta = np.zeros((n, n))
    beta[:, 10] = 1.0
    st = AttentionState(beta_fea=beta, beta_seg=beta, w_seg=np.zeros((n, n)),
                        beta_combined=beta)
    img = export_attention_map(st, "fea", 0, (16, 16))
    block = np.zeros((16, 16), dtype=bool)
    by, bx = divmod(10, 4)
    block[by * 4:(by + 1) * 4, bx * 4:(bx + 1) * 4] = True
    qmark = np.zeros_like(block)
    qmark[1:4, 1:4] = True  # 3x3 mark centered on query 0's cell center (2,2)
    assert (img[block] == 255).all()
    assert (img[~block & ~qmark] == 0).all()


def test_export_rejects_out_of_range_query():
    with pytest.raises(ValueError):
        export_attention_map(_uniform_state(16), "fea", 16, (16, 16))
    with pytest.raises(ValueError):
        export_attention_map(_uniform_state(16), "nope", 3, (16, 16))


def test_export_two_region_combined_concentrates():
    # untrained layer with the orthogonal transform: in-region mean beats
    # out-of-region mean for every query
    c = 4
    params = _params_for(c, seed=16)
    params.seg_kernel = _orthogonal_kernel(c).astype(np.float32)
    params.alpha = np.asarray(3.0, dtype=np.float32)
    rng = np.random.default_rng(17)
    x = rng.normal(size=(1, c, 4, 4)) * 0.1
    seg = two_region_map(16, 16)
    g = graph64()
    _, states = spsa_forward(g.leaf(x), g.leaf(seg.data[None]),
                             spsa_leaves(g, params), residual=True,
                             want_state=True)
    region = (np.arange(16) % 4 >= 2).astype(int)
    hr_region = region.reshape(4, 4).repeat(4, 0).repeat(4, 1)
    for q in range(16):
        img = export_attention_map(states[0], "combined", q, (16, 16))
        inside = img[hr_region == region[q]].mean()
        outside = img[hr_region != region[q]].mean()
        assert inside > outside
