"""Segmentation-prior self-attention: pairwise feature attention, the
segmentation branch (transform conv + trainable magnitude), weighted fusion
of the two attention maps, output projection, and heatmap export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ShapeError, Tensor

CATEGORIES = ("sky", "mountain", "plant", "grass", "water", "animal",
              "building", "background")
N_CATEGORIES = len(CATEGORIES)

TRANSFORM_KERNEL = 4  # 4x4 stride-4 conv collapses each HR cell to one site

MAX_ATTENTION_CELLS = 4096  # desk-scale guard on the N x N matrices


class SegProbMap:
    """Per-pixel category distribution, channels-first (8, H, W) in [0, 1]."""

    def __init__(self, data, tol: float = 1e-4):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != N_CATEGORIES:
            raise ShapeError(f"seg map must be ({N_CATEGORIES}, H, W), got {arr.shape}")
        h, w = arr.shape[1:]
        if h % TRANSFORM_KERNEL or w % TRANSFORM_KERNEL:
            raise ShapeError(f"seg map extents {h}x{w} must be divisible by "
                             f"{TRANSFORM_KERNEL}")
        if arr.min() < -tol or arr.max() > 1 + tol:
            raise ValueError("seg map entries must lie in [0, 1]")
        sums = arr.sum(axis=0)
        bad = np.abs(sums - 1.0) > tol
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise ValueError(f"seg map pixel ({y}, {x}) sums to {sums[y, x]:.6f}, "
                             f"expected 1 +- {tol}")
        self.data = arr

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def cell_grid(self):
        """Attention-grid extents (H/4, W/4)."""
        return self.height // TRANSFORM_KERNEL, self.width // TRANSFORM_KERNEL


@dataclass
class SpsaParams:
    """Trainable arrays of one attention layer.

    The 1x1 convolutions on C channels are stored as (C, C) matrices acting
    on column-flattened feature maps.
    """

    wf_fea: np.ndarray
    wg_fea: np.ndarray
    wh: np.ndarray
    seg_kernel: np.ndarray  # (C, 8, 4, 4)
    seg_bias: np.ndarray    # (C,)
    alpha: np.ndarray       # scalar, shape ()
    wf_seg: np.ndarray
    wg_seg: np.ndarray
    gamma: np.ndarray       # scalar, shape ()

    @classmethod
    def initialize(cls, channels: int, rng: np.random.Generator,
                   embed_noise: float = 0.02, kernel_scale: float = 0.1):
        """Attention embeddings start near identity so early attention
        reflects raw feature similarity; gamma starts at 0."""
        def embed():
            return (np.eye(channels) +
                    embed_noise * rng.standard_normal((channels, channels))
                    ).astype(np.float32)

        return cls(
            wf_fea=embed(), wg_fea=embed(), wh=embed(),
            seg_kernel=(kernel_scale * rng.standard_normal(
                (channels, N_CATEGORIES, TRANSFORM_KERNEL, TRANSFORM_KERNEL))
                ).astype(np.float32),
            seg_bias=np.zeros(channels, dtype=np.float32),
            alpha=np.asarray(1.0, dtype=np.float32),
            wf_seg=embed(), wg_seg=embed(),
            gamma=np.asarray(0.0, dtype=np.float32),
        )

    def named(self, prefix: str = "spsa.") -> dict:
        return {prefix + field: getattr(self, field) for field in
                ("wf_fea", "wg_fea", "wh", "seg_kernel", "seg_bias", "alpha",
                 "wf_seg", "wg_seg", "gamma")}


@dataclass
class AttentionState:
    """The four query-by-key matrices of one attention evaluation; rows are
    queries and each row of the beta matrices sums to 1."""

    beta_fea: np.ndarray
    beta_seg: np.ndarray
    w_seg: np.ndarray
    beta_combined: np.ndarray


def spsa_leaves(graph: Graph, params: SpsaParams, param: bool = True) -> dict:
    """Register every attention parameter as a leaf of the graph."""
    return {name: graph.leaf(arr, param=param, name=name)
            for name, arr in params.named(prefix="").items()}


def pair_attention(x: Tensor, wf: Tensor, wg: Tensor) -> Tensor:
    """Row-normalized attention over embedded pairwise similarities.

    x is (C, N) or (B, C, N); the result is (N, N) / (B, N, N) with entry
    [j, i] giving the weight of key pixel i for query pixel j.
    """
    if not np.isfinite(x.data).all():
        raise ValueError("attention input contains non-finite values")
    f = ad.matmul(wf, x)
    g = ad.matmul(wg, x)
    sims = ad.matmul(ad.transpose_last2(f), g)  # [i, j] = f_i . g_j
    return ad.softmax_rows(ad.transpose_last2(sims))


def feature_attention(x: Tensor, wf: Tensor, wg: Tensor) -> Tensor:
    return pair_attention(x, wf, wg)


def seg_attention(z: Tensor, wf_seg: Tensor, wg_seg: Tensor) -> Tensor:
    return pair_attention(z, wf_seg, wg_seg)


def init_alpha(x, conv_out) -> float:
    """Magnitude-matching initial scale: mean |x| over mean |conv_out|."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    cd = conv_out.data if isinstance(conv_out, Tensor) else np.asarray(conv_out)
    denom = float(np.mean(np.abs(cd)))
    if denom == 0.0:
        raise ValueError("init_alpha: transform output is all zero")
    return float(np.mean(np.abs(xd))) / denom


def seg_transform(m: Tensor, kernel: Tensor, bias: Tensor, alpha: Tensor,
                  n_expected: int | None = None) -> Tensor:
    """Collapse an (B, 8, H, W) seg map to scaled (B, C, N) features via the
    4x4 stride-4 transform convolution."""
    conv = ad.conv2d(m, kernel, stride=TRANSFORM_KERNEL, padding=0)
    conv = ad.add_channel_bias(conv, bias)
    b, c, hc, wc = conv.shape
    n = hc * wc
    if n_expected is not None and n != n_expected:
        raise ShapeError(f"seg transform yields N={n}, feature map has "
                         f"N={n_expected}")
    return ad.scale(ad.reshape(conv, (b, c, n)), alpha)


def fuse_attention(beta_seg: Tensor, beta_fea: Tensor):
    """Dissimilarity-weighted sum of the two attention maps, renormalized.

    Weight of the segmentation map per entry is |bs - bf| / (bs + bf),
    defined as 0 where the denominator vanishes. Returns (w_seg, combined).
    """
    for name, t in (("beta_seg", beta_seg), ("beta_fea", beta_fea)):
        d = t.data
        if (d < 0).any():
            raise ValueError(f"fuse_attention: {name} has negative entries")
        if np.abs(d.sum(axis=-1) - 1.0).max() > 1e-3:
            raise ValueError(f"fuse_attention: {name} rows are not normalized")
    diff = ad.absolute(ad.sub(beta_seg, beta_fea))
    total = ad.add(beta_seg, beta_fea)
    w_seg = ad.safe_div(diff, total)
    one = beta_seg.graph.constant(np.ones(w_seg.shape))
    w_fea = ad.sub(one, w_seg)
    combined = ad.add(ad.mul(w_seg, beta_seg), ad.mul(w_fea, beta_fea))
    return w_seg, ad.normalize_rows(combined)


def spsa_forward(x: Tensor, m: Tensor, leaves: dict, residual: bool = True,
                 want_state: bool = False, max_cells: int = MAX_ATTENTION_CELLS):
    """Full attention layer on a (B, C, H, W) feature map and (B, 8, 4H, 4W)
    seg map batch.

    Output o_j = sum_i beta[j, i] * h(x_i); the layer returns x + gamma * o,
    or o alone when residual is off (strict output mode). States are per
    batch item.
    """
    if x.ndim != 4 or m.ndim != 4:
        raise ShapeError(f"spsa_forward: need rank-4 inputs, got {x.shape}, {m.shape}")
    b, c, h, w = x.shape
    if m.shape[0] != b or m.shape[1] != N_CATEGORIES or \
            m.shape[2] != TRANSFORM_KERNEL * h or m.shape[3] != TRANSFORM_KERNEL * w:
        raise ShapeError(f"spsa_forward: seg map {m.shape} does not match "
                         f"features {x.shape}")
    n = h * w
    if n > max_cells:
        raise ShapeError(f"spsa_forward: {n} cells exceed the {max_cells}-cell "
                         f"cap (pass max_cells to raise it)")
    xf = ad.reshape(x, (b, c, n))
    beta_fea = feature_attention(xf, leaves["wf_fea"], leaves["wg_fea"])
    z = seg_transform(m, leaves["seg_kernel"], leaves["seg_bias"],
                      leaves["alpha"], n_expected=n)
    beta_seg = seg_attention(z, leaves["wf_seg"], leaves["wg_seg"])
    w_seg, beta = fuse_attention(beta_seg, beta_fea)

    hx = ad.matmul(leaves["wh"], xf)
    o = ad.matmul(hx, ad.transpose_last2(beta))  # o[:, j] = sum_i beta[j,i] h(x_i)
    if residual:
        y = ad.add(xf, ad.scale(o, leaves["gamma"]))
    else:
        y = o
    out = ad.reshape(y, (b, c, h, w))

    states = None
    if want_state:
        states = [AttentionState(beta_fea=beta_fea.data[i], beta_seg=beta_seg.data[i],
                                 w_seg=w_seg.data[i], beta_combined=beta.data[i])
                  for i in range(b)]
    return out, states


def export_attention_map(state: AttentionState, which: str, query: int,
                         hr_dims) -> np.ndarray:
    """Render one query's attention row as an 8-bit HR heatmap.

    Min-max normalized (all-constant rows render mid-gray), nearest-upsampled
    to the HR extents, with a 3x3 max-intensity square at the query pixel.
    """
    matrices = {"fea": state.beta_fea, "seg": state.beta_seg,
                "combined": state.beta_combined}
    if which not in matrices:
        raise ValueError(f"unknown attention map {which!r}; use fea|seg|combined")
    mat = matrices[which]
    n = mat.shape[0]
    if not 0 <= query < n:
        raise ValueError(f"query index {query} out of range [0, {n})")
    hr_h, hr_w = int(hr_dims[0]), int(hr_dims[1])
    gh, gw = hr_h // TRANSFORM_KERNEL, hr_w // TRANSFORM_KERNEL
    if gh * gw != n:
        raise ShapeError(f"hr dims {hr_dims} imply {gh * gw} cells, state has {n}")

    row = mat[query].astype(np.float64)
    lo, hi = row.min(), row.max()
    norm = np.full(n, 0.5) if hi == lo else (row - lo) / (hi - lo)
    grid = norm.reshape(gh, gw)
    heat = grid.repeat(TRANSFORM_KERNEL, axis=0).repeat(TRANSFORM_KERNEL, axis=1)
    img = np.round(heat * 255.0).astype(np.uint8)

    qy, qx = divmod(query, gw)
    cy = qy * TRANSFORM_KERNEL + TRANSFORM_KERNEL // 2
    cx = qx * TRANSFORM_KERNEL + TRANSFORM_KERNEL // 2
    img[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2] = 255
    return img


def save_heatmap(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(img, mode="L").save(path)
