"""Residual-in-residual dense blocks, the dissimilarity statistic over
intermediate features, exact two-class 1-D clustering, prune decisions with
the keep-all exception, and masked (sparse) block execution."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DENSE_PER_BLOCK = 3  # dense blocks chained inside one residual block


def full_layer_flags(k_layers: int) -> tuple:
    """All-connections-kept flags: layer l keeps candidates x_1..x_{l-1}."""
    return tuple(tuple(True for _ in range(l - 1)) for l in range(1, k_layers + 1))


class BlockMask:
    """Keep/drop flags for every dense-layer input connection of the block
    stack; the block input x_0 is always kept and carries no flag."""

    def __init__(self, flags: dict):
        normalized = {}
        for key, layers in flags.items():
            block, dense = int(key[0]), int(key[1])
            layers = tuple(tuple(bool(f) for f in layer) for layer in layers)
            for l, layer in enumerate(layers, start=1):
                if len(layer) != l - 1:
                    raise ShapeError(f"mask {key} layer {l} has {len(layer)} flags, "
                                     f"expected {l - 1}")
            normalized[(block, dense)] = layers
        self._flags = normalized

    @classmethod
    def full(cls, n_blocks: int, k_layers: int, n_dense: int = DENSE_PER_BLOCK):
        return cls({(b, d): full_layer_flags(k_layers)
                    for b in range(n_blocks) for d in range(n_dense)})

    def layer_flags(self, block: int, dense: int) -> tuple:
        return self._flags[(block, dense)]

    def keys(self):
        return sorted(self._flags)

    def is_full(self) -> bool:
        return all(all(all(layer) for layer in layers)
                   for layers in self._flags.values())

    def counts(self):
        """(kept, total) connection flags over the whole stack."""
        kept = total = 0
        for layers in self._flags.values():
            for layer in layers:
                kept += sum(layer)
                total += len(layer)
        return kept, total

    def __eq__(self, other):
        return isinstance(other, BlockMask) and self._flags == other._flags

    def __hash__(self):
        return hash(tuple(sorted(self._flags.items())))

    def entries(self):
        """Flat (block, dense, layer, flags) rows for serialization."""
        rows = []
        for (b, d) in self.keys():
            for l, layer in enumerate(self._flags[(b, d)], start=1):
                rows.append((b, d, l, layer))
        return rows

    @classmethod
    def from_entries(cls, rows):
        grouped = {}
        for b, d, l, layer in rows:
            grouped.setdefault((b, d), {})[l] = tuple(bool(f) for f in layer)
        flags = {}
        for key, by_layer in grouped.items():
            k = max(by_layer)
            if sorted(by_layer) != list(range(1, k + 1)):
                raise ValueError(f"mask entries for {key} skip a layer")
            flags[key] = tuple(by_layer[l] for l in range(1, k + 1))
        return cls(flags)


@dataclass
class DenseBlockParams:
    """One dense block: K conv(3x3)+leaky-ReLU layers at a shared channel
    width, with a scaled local residual from the last layer."""

    kernels: list
    biases: list
    residual_scaling: float = 0.2
    slope: float = 0.2

    @classmethod
    def initialize(cls, channels: int, k_layers: int, layer_flags,
                   rng: np.random.Generator, residual_scaling: float = 0.2,
                   init_scale: float = 0.1, slope: float = 0.2):
        kernels, biases = [], []
        for l in range(1, k_layers + 1):
            fan_in = channels * (1 + sum(layer_flags[l - 1]))
            std = init_scale * np.sqrt(2.0 / (fan_in * 9))
            kernels.append((std * rng.standard_normal(
                (channels, fan_in, 3, 3))).astype(np.float32))
            biases.append(np.zeros(channels, dtype=np.float32))
        return cls(kernels=kernels, biases=biases,
                   residual_scaling=residual_scaling, slope=slope)

    def validate_against(self, channels: int, layer_flags) -> None:
        if len(self.kernels) != len(layer_flags):
            raise ShapeError(f"{len(self.kernels)} kernels for "
                             f"{len(layer_flags)} layers")
        for l, (kern, flags) in enumerate(zip(self.kernels, layer_flags), start=1):
            want = channels * (1 + sum(flags))
            if kern.shape[1] != want:
                raise ShapeError(f"layer {l} kernel expects {kern.shape[1]} input "
                                 f"channels, mask implies {want}")


class DenseBlockTensors(NamedTuple):
    kernels: list
    biases: list


def dense_block_leaves(graph, params: DenseBlockParams, param: bool = True):
    return DenseBlockTensors(
        kernels=[graph.leaf(k, param=param) for k in params.kernels],
        biases=[graph.leaf(b, param=param) for b in params.biases])


def dense_block_forward(x0: Tensor, tensors: DenseBlockTensors, layer_flags,
                        residual_scaling: float, slope: float = 0.2):
    """Run one dense block; layer l concatenates x_0 plus every mask-kept
    x_i (i < l) in index order. Returns (output, [x_1..x_K])."""
    feats = []
    for l, (kern, bias) in enumerate(zip(tensors.kernels, tensors.biases), start=1):
        flags = layer_flags[l - 1]
        inputs = [x0] + [feats[i] for i, keep in enumerate(flags) if keep]
        cat = ad.concat(inputs, axis=1) if len(inputs) > 1 else inputs[0]
        want = cat.shape[1]
        if kern.shape[1] != want:
            raise ShapeError(f"dense layer {l}: kernel expects {kern.shape[1]} "
                             f"input channels, mask supplies {want}")
        h = ad.conv2d(cat, kern, stride=1, padding=1)
        h = ad.add_channel_bias(h, bias)
        feats.append(ad.leaky_relu(h, slope))
    out = ad.add(x0, ad.smul(feats[-1], residual_scaling))
    return out, feats


def rrdb_forward(x: Tensor, dense_tensors, layer_flags_per_dense,
                 residual_scaling: float, slope: float = 0.2,
                 collect=None, key_prefix=None):
    """Three dense blocks in sequence with an outer scaled residual.

    With full masks this is exactly the dense (unpruned) block. collect, if
    given, receives {key: [x_1..x_K arrays]} per dense block.
    """
    u = x
    for d, (tensors, flags) in enumerate(zip(dense_tensors, layer_flags_per_dense)):
        u, feats = dense_block_forward(u, tensors, flags, residual_scaling, slope)
        if collect is not None:
            key = (key_prefix, d) if key_prefix is not None else d
            collect[key] = [f.data for f in feats]
    return ad.add(x, ad.smul(u, residual_scaling))


def dissimilarity(features) -> np.ndarray:
    """Normalized L2 distances of x_1..x_{l-1} to x_l; sums to 1.

    When every candidate equals x_l the vector is uniform (maximal
    uncertainty keeps the keep-all decision reachable).
    """
    feats = [np.asarray(f.data if isinstance(f, Tensor) else f) for f in features]
    if len(feats) < 2:
        raise ValueError("dissimilarity: need at least two features")
    shape = feats[0].shape
    for f in feats[1:]:
        if f.shape != shape:
            raise ShapeError(f"dissimilarity: feature shapes {shape} vs {f.shape}")
    last = feats[-1]
    dists = np.array([np.linalg.norm((f - last).ravel()) for f in feats[:-1]],
                     dtype=np.float64)
    total = dists.sum()
    if total == 0.0:
        return np.full(len(dists), 1.0 / len(dists))
    return dists / total


class KMeansSplit(NamedTuple):
    low: list
    high: list
    mean_low: float
    mean_high: float


def kmeans_two(values, seed=None) -> KMeansSplit:
    """Exact optimal two-class 1-D clustering by sorted-split enumeration.

    Deterministic; `seed` is accepted for interface stability and ignored.
    Returns both clusters (sorted) and their means, mean_low <= mean_high.
    """
    vals = sorted(float(v) for v in values)
    n = len(vals)
    if n < 2:
        raise ValueError(f"kmeans_two: need at least 2 values, got {n}")
    arr = np.asarray(vals)
    csum = np.cumsum(arr)
    csq = np.cumsum(arr * arr)
    best_k, best_cost = 1, np.inf
    for k in range(1, n):
        s1, q1 = csum[k - 1], csq[k - 1]
        s2, q2 = csum[-1] - s1, csq[-1] - q1
        cost = (q1 - s1 * s1 / k) + (q2 - s2 * s2 / (n - k))
        if cost < best_cost - 1e-18:
            best_k, best_cost = k, cost
    low, high = vals[:best_k], vals[best_k:]
    return KMeansSplit(low, high, float(np.mean(low)), float(np.mean(high)))


def prune_decision(avg_ds, epsilon: float = 0.05):
    """Keep flags per candidate connection.

    Fewer than two candidates, or a cluster-mean difference below epsilon
    relative to the high mean, keeps everything; otherwise the low cluster
    is dropped.
    """
    avg = [float(v) for v in avg_ds]
    if len(avg) < 2:
        return [True] * len(avg)
    split = kmeans_two(avg)
    if split.mean_high <= 0 or \
            (split.mean_high - split.mean_low) / split.mean_high < epsilon:
        return [True] * len(avg)
    n_low = len(split.low)
    order = sorted(range(len(avg)), key=lambda i: (avg[i], i))
    dropped = set(order[:n_low])
    return [i not in dropped for i in range(len(avg))]


class PruneStats:
    """Ring buffers of dissimilarity vectors per (block, dense, layer)."""

    def __init__(self, keys, window: int):
        if window < 1:
            raise ValueError(f"stats window must be >= 1, got {window}")
        self.window = window
        self._buffers = {tuple(k): deque(maxlen=window) for k in keys}

    @classmethod
    def for_generator(cls, n_blocks: int, k_layers: int, window: int,
                      n_dense: int = DENSE_PER_BLOCK):
        keys = [(b, d, l) for b in range(n_blocks) for d in range(n_dense)
                for l in range(2, k_layers + 1)]
        return cls(keys, window)

    def keys(self):
        return sorted(self._buffers)

    def record(self, key, ds) -> None:
        key = tuple(key)
        if key not in self._buffers:
            raise KeyError(f"unknown stats key {key}")
        ds = np.asarray(ds, dtype=np.float64)
        if ds.ndim != 1 or len(ds) != key[2] - 1:
            raise ShapeError(f"stats key {key} expects {key[2] - 1} values, "
                             f"got shape {ds.shape}")
        if abs(ds.sum() - 1.0) > 1e-5:
            raise ValueError(f"dissimilarity vector sums to {ds.sum():.8f}")
        self._buffers[key].append(ds.copy())

    def record_features(self, feature_map) -> None:
        """Record every layer's dissimilarity from {(block, dense): [x_1..x_K]}."""
        for (block, dense), feats in feature_map.items():
            for l in range(2, len(feats) + 1):
                self.record((block, dense, l), dissimilarity(feats[:l]))

    def count(self, key) -> int:
        return len(self._buffers[tuple(key)])

    def average(self, key) -> np.ndarray:
        buf = self._buffers[tuple(key)]
        if not buf:
            raise ValueError(f"no statistics recorded for {key}")
        return np.mean(np.stack(buf), axis=0)

    def missing(self):
        return [k for k in self.keys() if not self._buffers[k]]


def conv_macs(out_h: int, out_w: int, in_ch: int, out_ch: int, k: int = 3) -> int:
    return out_h * out_w * k * k * in_ch * out_ch


def dense_stack_macs(n_blocks: int, k_layers: int, channels: int,
                     spatial_hw, mask: BlockMask) -> int:
    """Multiply-accumulate total of every dense-layer convolution."""
    h, w = spatial_hw
    total = 0
    for (b, d) in mask.keys():
        for layer in mask.layer_flags(b, d):
            in_ch = channels * (1 + sum(layer))
            total += conv_macs(h, w, in_ch, channels)
    return total


@dataclass
class LayerReport:
    key: tuple
    avg_ds: np.ndarray
    keep: list
    mean_low: float | None
    mean_high: float | None
    kept_all: bool


@dataclass
class PruneReport:
    layers: list
    connections_before: int
    connections_after: int
    macs_before: int
    macs_after: int
    epsilon: float
    spatial_hw: tuple

    @property
    def connections_removed(self):
        return self.connections_before - self.connections_after

    def to_text(self) -> str:
        lines = [f"pruning report (epsilon={self.epsilon}, "
                 f"spatial={self.spatial_hw[0]}x{self.spatial_hw[1]})"]
        for lr in self.layers:
            b, d, l = lr.key
            avg = " ".join(f"{v:.6f}" for v in lr.avg_ds)
            keep = "".join("1" if f else "0" for f in lr.keep)
            means = ("-" if lr.mean_low is None
                     else f"{lr.mean_low:.6f}/{lr.mean_high:.6f}")
            lines.append(f"  block {b} dense {d} layer {l}: avg_ds=[{avg}] "
                         f"cluster_means={means} keep={keep}"
                         f"{' (keep-all)' if lr.kept_all else ''}")
        lines += [
            f"connections: {self.connections_before} -> {self.connections_after} "
            f"(removed {self.connections_removed})",
            f"macs: {self.macs_before} -> {self.macs_after}",
        ]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        rows = []
        for lr in self.layers:
            b, d, l = lr.key
            stem = f"layer.{b}.{d}.{l}"
            rows.append(f"{stem}.avg_ds=" + ",".join(f"{v:.8f}" for v in lr.avg_ds))
            rows.append(f"{stem}.keep=" + ",".join("1" if f else "0" for f in lr.keep))
            if lr.mean_low is not None:
                rows.append(f"{stem}.mean_low={lr.mean_low:.8f}")
                rows.append(f"{stem}.mean_high={lr.mean_high:.8f}")
        rows += [
            f"connections_before={self.connections_before}",
            f"connections_after={self.connections_after}",
            f"connections_removed={self.connections_removed}",
            f"macs_before={self.macs_before}",
            f"macs_after={self.macs_after}",
        ]
        return "\n".join(rows) + "\n"


def prune_network(stats: PruneStats, channels: int, spatial_hw,
                  epsilon: float = 0.05):
    """Apply the prune decision to every recorded layer.

    Returns (BlockMask, PruneReport); the caller re-initializes and retrains
    the masked network from scratch.
    """
    missing = stats.missing()
    if missing:
        raise ValueError(f"no statistics recorded for layers: {missing}")

    by_block = {}
    reports = []
    for key in stats.keys():
        block, dense, layer = key
        avg = stats.average(key)
        keep = prune_decision(avg, epsilon)
        if len(avg) >= 2:
            split = kmeans_two(avg)
            mean_low, mean_high = split.mean_low, split.mean_high
        else:
            mean_low = mean_high = None
        reports.append(LayerReport(key=key, avg_ds=avg, keep=keep,
                                   mean_low=mean_low, mean_high=mean_high,
                                   kept_all=all(keep)))
        by_block.setdefault((block, dense), {})[layer] = tuple(keep)

    flags = {}
    for (block, dense), by_layer in by_block.items():
        k = max(by_layer)
        layers = [()]  # layer 1 has no candidates
        for l in range(2, k + 1):
            layers.append(by_layer[l])
        flags[(block, dense)] = tuple(layers)
    mask = BlockMask(flags)

    n_blocks = 1 + max(b for b, _ in flags)
    k_layers = max(len(layers) for layers in flags.values())
    full = BlockMask.full(n_blocks, k_layers)
    kept, total = mask.counts()
    report = PruneReport(
        layers=reports,
        connections_before=total,
        connections_after=kept,
        macs_before=dense_stack_macs(n_blocks, k_layers, channels, spatial_hw, full),
        macs_after=dense_stack_macs(n_blocks, k_layers, channels, spatial_hw, mask),
        epsilon=epsilon,
        spatial_hw=tuple(spatial_hw),
    )
    return mask, report
