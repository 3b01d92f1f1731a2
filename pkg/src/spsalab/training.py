"""Generator and discriminator assembly, losses, the two-phase training
loop with per-group learning rates and step decay, and the versioned binary
checkpoint format."""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import blocks as bl
from .attention import SpsaParams, spsa_forward
from .autodiff import Graph, ShapeError

UPSCALE = 4

PHASE_PSNR = "psnr_pretrain"
PHASE_GAN = "gan"

CKPT_MAGIC = b"SPSA"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """A run or network configuration violates its contract."""


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the diagnostic dump path if written."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class GeneratorConfig:
    n_blocks: int = 3
    channels: int = 8
    block_channels: int = 8
    dense_layers: int = 5
    residual_scaling: float = 0.2
    spsa_residual: bool = True
    precision: str = "f32"
    disc_channels: int = 8
    crop_size: int = 96

    def validate(self):
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.channels != self.block_channels:
            raise ConfigError("channels and block_channels must agree so block "
                              "features stay width-compatible with the trunk")
        if self.dense_layers < 2:
            raise ConfigError(f"dense_layers must be >= 2, got {self.dense_layers}")
        if not 0.0 <= self.residual_scaling <= 1.0:
            # 0 is the block-bypass configuration used by identity checks
            raise ConfigError(f"residual_scaling must lie in [0, 1], "
                              f"got {self.residual_scaling}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision}")
        if self.crop_size % (UPSCALE * UPSCALE):
            raise ConfigError(f"crop_size {self.crop_size} must be divisible by 16")
        return self

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


class ForwardResult(NamedTuple):
    sr: ad.Tensor
    states: list | None
    features: dict | None


class Generator:
    """Head conv -> block stack -> attention layer -> two x2 upsample convs
    -> two tail convs, producing RGB at 4x the input extents."""

    def __init__(self, config: GeneratorConfig, seed_or_rng=0, mask=None):
        self.config = config.validate()
        rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
               else np.random.default_rng(seed_or_rng))
        c = config.channels
        k = config.dense_layers
        self.mask = mask if mask is not None else bl.BlockMask.full(
            config.n_blocks, k)
        self.params = OrderedDict()

        def conv(name, cout, cin, ksize, scale=0.1):
            std = scale * np.sqrt(2.0 / (cin * ksize * ksize))
            self.params[f"{name}.k"] = (std * rng.standard_normal(
                (cout, cin, ksize, ksize))).astype(np.float32)
            self.params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

        conv("head", c, 3, 3)
        for b in range(config.n_blocks):
            for d in range(bl.DENSE_PER_BLOCK):
                flags = self.mask.layer_flags(b, d)
                dbp = bl.DenseBlockParams.initialize(
                    c, k, flags, rng, residual_scaling=config.residual_scaling)
                for l in range(k):
                    self.params[f"block{b}.d{d}.l{l}.k"] = dbp.kernels[l]
                    self.params[f"block{b}.d{d}.l{l}.b"] = dbp.biases[l]
        for name, arr in SpsaParams.initialize(c, rng).named().items():
            self.params[name] = arr
        conv("up1", c, c, 3)
        conv("up2", c, c, 3)
        conv("tail1", c, c, 3)
        conv("tail2", 3, c, 3)

    def attention_param_names(self):
        return {n for n in self.params if n.startswith("spsa.")}

    def param_groups(self):
        attn = self.attention_param_names()
        return {"attention": sorted(attn),
                "rest": sorted(set(self.params) - attn)}

    def leaves(self, graph: Graph, param: bool = True):
        return {name: graph.leaf(arr, param=param, name=name)
                for name, arr in self.params.items()}

    def forward(self, graph: Graph, leaves, lr_t, seg_t, use_spsa: bool = True,
                want_states: bool = False, collect_features: bool = False
                ) -> ForwardResult:
        cfg = self.config
        slope = 0.2
        x = ad.add_channel_bias(ad.conv2d(lr_t, leaves["head.k"], 1, 1),
                                leaves["head.b"])
        features = {} if collect_features else None
        for b in range(cfg.n_blocks):
            tensors = [bl.DenseBlockTensors(
                kernels=[leaves[f"block{b}.d{d}.l{l}.k"]
                         for l in range(cfg.dense_layers)],
                biases=[leaves[f"block{b}.d{d}.l{l}.b"]
                        for l in range(cfg.dense_layers)])
                for d in range(bl.DENSE_PER_BLOCK)]
            flags = [self.mask.layer_flags(b, d)
                     for d in range(bl.DENSE_PER_BLOCK)]
            x = bl.rrdb_forward(x, tensors, flags, cfg.residual_scaling, slope,
                                collect=features, key_prefix=b)
        states = None
        if use_spsa:
            spsa_leaves = {name[len("spsa."):]: leaves[name]
                           for name in self.attention_param_names()}
            x, states = spsa_forward(x, seg_t, spsa_leaves,
                                     residual=cfg.spsa_residual,
                                     want_state=want_states)
        u = ad.leaky_relu(ad.add_channel_bias(
            ad.conv2d(ad.nearest_upsample2(x), leaves["up1.k"], 1, 1),
            leaves["up1.b"]), slope)
        u = ad.leaky_relu(ad.add_channel_bias(
            ad.conv2d(ad.nearest_upsample2(u), leaves["up2.k"], 1, 1),
            leaves["up2.b"]), slope)
        t = ad.leaky_relu(ad.add_channel_bias(
            ad.conv2d(u, leaves["tail1.k"], 1, 1), leaves["tail1.b"]), slope)
        sr = ad.add_channel_bias(ad.conv2d(t, leaves["tail2.k"], 1, 1),
                                 leaves["tail2.b"])
        return ForwardResult(sr=sr, states=states, features=features)

    def trunk_features(self, lr_batch):
        """Plain forward of head + blocks, for the alpha magnitude rule."""
        g = Graph(self.config.dtype)
        leaves = self.leaves(g, param=False)
        x = ad.add_channel_bias(ad.conv2d(g.leaf(lr_batch), leaves["head.k"], 1, 1),
                                leaves["head.b"])
        for b in range(self.config.n_blocks):
            tensors = [bl.DenseBlockTensors(
                kernels=[leaves[f"block{b}.d{d}.l{l}.k"]
                         for l in range(self.config.dense_layers)],
                biases=[leaves[f"block{b}.d{d}.l{l}.b"]
                        for l in range(self.config.dense_layers)])
                for d in range(bl.DENSE_PER_BLOCK)]
            flags = [self.mask.layer_flags(b, d)
                     for d in range(bl.DENSE_PER_BLOCK)]
            x = bl.rrdb_forward(x, tensors, flags,
                                self.config.residual_scaling, 0.2)
        return x.data

    def initialize_alpha(self, lr_batch, seg_batch) -> float:
        """Data-dependent magnitude matching of the segmentation features."""
        from .attention import init_alpha

        x = self.trunk_features(lr_batch)
        g = Graph(self.config.dtype)
        conv = ad.add_channel_bias(
            ad.conv2d(g.leaf(seg_batch), g.leaf(self.params["spsa.seg_kernel"]),
                      stride=4, padding=0),
            g.leaf(self.params["spsa.seg_bias"]))
        alpha = init_alpha(x, conv.data)
        self.params["spsa.alpha"] = np.asarray(alpha, dtype=np.float32)
        return alpha

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.params.values())


def build_generator(config: GeneratorConfig, seed=0, mask=None) -> Generator:
    return Generator(config, seed, mask=mask)


class Discriminator:
    """VGG-style stack of stride-2 channel-doubling convs with leaky ReLU,
    flattened into two dense layers emitting one logit per batch item."""

    N_STAGES = 4

    def __init__(self, config: GeneratorConfig, seed_or_rng=0):
        rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
               else np.random.default_rng(seed_or_rng))
        self.crop = config.crop_size
        if self.crop % (2 ** self.N_STAGES):
            raise ConfigError(f"crop size {self.crop} not divisible by "
                              f"{2 ** self.N_STAGES}")
        d = config.disc_channels
        self.params = OrderedDict()
        cin = 3
        cout = d
        for s in range(self.N_STAGES):
            # 4x4 stride-2 convs halve even extents exactly
            std = 0.1 * np.sqrt(2.0 / (cin * 16))
            self.params[f"disc.conv{s}.k"] = (std * rng.standard_normal(
                (cout, cin, 4, 4))).astype(np.float32)
            self.params[f"disc.conv{s}.b"] = np.zeros(cout, dtype=np.float32)
            cin, cout = cout, cout * 2
        spatial = self.crop // (2 ** self.N_STAGES)
        flat = cin * spatial * spatial
        hidden = 64
        self.params["disc.fc1.w"] = (0.1 * np.sqrt(2.0 / flat) *
                                     rng.standard_normal((flat, hidden))
                                     ).astype(np.float32)
        self.params["disc.fc1.b"] = np.zeros(hidden, dtype=np.float32)
        self.params["disc.fc2.w"] = (0.01 * rng.standard_normal((hidden, 1))
                                     ).astype(np.float32)
        self.params["disc.fc2.b"] = np.zeros(1, dtype=np.float32)
        self._flat = flat

    def leaves(self, graph: Graph, param: bool = True):
        return {name: graph.leaf(arr, param=param, name=name)
                for name, arr in self.params.items()}

    def forward(self, graph: Graph, leaves, img_t) -> ad.Tensor:
        if img_t.ndim != 4 or img_t.shape[2] != self.crop or \
                img_t.shape[3] != self.crop:
            raise ShapeError(f"discriminator expects (B, 3, {self.crop}, "
                             f"{self.crop}), got {img_t.shape}")
        h = img_t
        for s in range(self.N_STAGES):
            h = ad.leaky_relu(ad.add_channel_bias(
                ad.conv2d(h, leaves[f"disc.conv{s}.k"], 2, 1),
                leaves[f"disc.conv{s}.b"]), 0.2)
        b = h.shape[0]
        flat = ad.reshape(h, (b, self._flat))
        h1 = ad.matmul(flat, leaves["disc.fc1.w"])
        h1 = ad.leaky_relu(ad.add_channel_bias(h1, leaves["disc.fc1.b"]), 0.2)
        logits = ad.add_channel_bias(ad.matmul(h1, leaves["disc.fc2.w"]),
                                     leaves["disc.fc2.b"])
        return logits  # (B, 1)

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.params.values())


def discriminator_forward(disc: Discriminator, img_batch) -> np.ndarray:
    """One-off logits for a plain array batch."""
    g = Graph(np.float32)
    out = disc.forward(g, disc.leaves(g, param=False), g.leaf(img_batch))
    return out.data.reshape(-1)


def l1_loss(sr: ad.Tensor, hr: ad.Tensor) -> ad.Tensor:
    return ad.mean_all(ad.absolute(ad.sub(sr, hr)))


def _g_adv(d_fake, form):
    if form == "nonsat":
        return ad.mean_all(ad.softplus(ad.neg(d_fake)))
    if form == "lsgan":
        one = d_fake.graph.constant(np.ones(d_fake.shape))
        diff = ad.sub(d_fake, one)
        return ad.smul(ad.mean_all(ad.mul(diff, diff)), 0.5)
    raise ConfigError(f"unknown gan loss form {form!r}")


def _d_adv(d_real, d_fake, form):
    if form == "nonsat":
        return ad.add(ad.mean_all(ad.softplus(ad.neg(d_real))),
                      ad.mean_all(ad.softplus(d_fake)))
    if form == "lsgan":
        one = d_real.graph.constant(np.ones(d_real.shape))
        dr = ad.sub(d_real, one)
        return ad.smul(ad.add(ad.mean_all(ad.mul(dr, dr)),
                              ad.mean_all(ad.mul(d_fake, d_fake))), 0.5)
    raise ConfigError(f"unknown gan loss form {form!r}")


def gan_losses(d_real: ad.Tensor, d_fake: ad.Tensor, form: str = "nonsat"):
    """(generator adversarial loss, discriminator loss) on logits."""
    return _g_adv(d_fake, form), _d_adv(d_real, d_fake, form)


class Adam:
    """Per-parameter moments with a shared step counter and per-name rates."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: OrderedDict, grads: dict, lr_of) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, arr in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.astype(np.float32)
            if name not in self.m:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mh = self.m[name] / b1c
            vh = self.v[name] / b2c
            arr -= np.float32(lr_of(name)) * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainSchedule:
    phase: str
    iters: int
    batch_size: int = 16
    base_lr: float = 2e-4
    attn_lr: float = 5e-4
    rest_lr: float = 1e-4
    decay_factor: float = 2.0
    decay_interval: int = 200_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    lambda_l1: float = 1e-2
    lambda_gan: float = 5e-3
    gan_loss: str = "nonsat"
    seed: int = 0

    def validate(self):
        if self.phase not in (PHASE_PSNR, PHASE_GAN):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.iters < 1 or self.batch_size < 1:
            raise ConfigError("iters and batch_size must be positive")
        for name in ("base_lr", "attn_lr", "rest_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.decay_factor <= 1.0:
            raise ConfigError(f"decay factor must be > 1, got {self.decay_factor}")
        if self.decay_interval < 1:
            raise ConfigError("decay interval must be >= 1")
        return self


def decayed_lr(base: float, factor: float, interval: int, iteration: int) -> float:
    """Step-decayed rate at a 1-based iteration."""
    return base / factor ** ((iteration - 1) // interval)


@dataclass
class TraceRow:
    iteration: int
    phase: str
    l1: float
    g_gan: float
    d_loss: float
    lr_attention: float
    lr_rest: float

    def csv(self) -> str:
        return (f"{self.iteration},{self.phase},{self.l1:.8e},{self.g_gan:.8e},"
                f"{self.d_loss:.8e},{self.lr_attention:.8e},{self.lr_rest:.8e}")


TRACE_HEADER = "iteration,phase,l1,g_gan,d_loss,lr_attention,lr_rest"


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: Adam
    opt_d: Adam
    iteration: int = 0
    phase: str = PHASE_PSNR
    alpha_initialized: bool = False


def new_train_state(config: GeneratorConfig, seed: int = 0,
                    mask=None) -> TrainState:
    rng = np.random.default_rng([seed, 100])
    gen = Generator(config, rng, mask=mask)
    disc = Discriminator(config, rng)
    return TrainState(generator=gen, discriminator=disc,
                      opt_g=Adam(), opt_d=Adam())


def _check_finite(value: float, what: str, state, dump_to=None):
    if np.isfinite(value):
        return
    dump_path = None
    if dump_to is not None:
        dump_path = str(dump_to)
        save_checkpoint(dump_path, state, config_echo="diverged=1")
    raise TrainingDiverged(f"{what} became non-finite ({value}); "
                           f"state dump: {dump_path or 'not written'}",
                           dump_path=dump_path)


def train(state: TrainState, schedule: TrainSchedule, dataset, *,
          trace_sink=None, dump_dir=None):
    """Run one training phase; returns (state, [TraceRow]).

    dataset is a DatasetManifest (or anything sample_batch accepts).
    Deterministic for a fixed schedule seed: batch composition, crops, and
    updates all derive from one seeded generator.
    """
    from .data import batch_cache, sample_batch

    schedule.validate()
    gen, disc = state.generator, state.discriminator
    state.phase = schedule.phase
    opt_g, opt_d = state.opt_g, state.opt_d
    opt_g.beta1 = opt_d.beta1 = schedule.adam_beta1
    opt_g.beta2 = opt_d.beta2 = schedule.adam_beta2
    attn = gen.attention_param_names()
    rng = np.random.default_rng([schedule.seed, 0])
    cache = batch_cache()
    gan = schedule.phase == PHASE_GAN
    dump_to = None if dump_dir is None else f"{dump_dir}/diverged.ckpt"

    if gan and not state.alpha_initialized:
        alpha_rng = np.random.default_rng([schedule.seed, 1])
        lr_b, _, seg_b = sample_batch(dataset, schedule.batch_size, alpha_rng, cache)
        gen.initialize_alpha(lr_b, seg_b)
        state.alpha_initialized = True

    rows = []
    for local_it in range(1, schedule.iters + 1):
        state.iteration += 1
        if gan:
            lr_attn = decayed_lr(schedule.attn_lr, schedule.decay_factor,
                                 schedule.decay_interval, local_it)
            lr_rest = decayed_lr(schedule.rest_lr, schedule.decay_factor,
                                 schedule.decay_interval, local_it)
        else:
            lr_attn = 0.0
            lr_rest = decayed_lr(schedule.base_lr, schedule.decay_factor,
                                 schedule.decay_interval, local_it)

        lr_b, hr_b, seg_b = sample_batch(dataset, schedule.batch_size, rng, cache)

        # generator pass
        g = Graph(gen.config.dtype)
        leaves = gen.leaves(g)
        result = gen.forward(g, leaves, g.leaf(lr_b), g.leaf(seg_b),
                             use_spsa=gan)
        l1 = l1_loss(result.sr, g.leaf(hr_b))
        g_gan_val = 0.0
        d_loss_val = 0.0
        if gan:
            d_leaves = disc.leaves(g, param=False)
            d_fake = disc.forward(g, d_leaves, result.sr)
            g_adv = _g_adv(d_fake, schedule.gan_loss)
            total = ad.add(ad.smul(l1, schedule.lambda_l1),
                           ad.smul(g_adv, schedule.lambda_gan))
            g_gan_val = float(g_adv.data)
        else:
            total = l1
        l1_val = float(l1.data)
        _check_finite(l1_val, "generator L1 loss", state, dump_to)
        if gan:
            _check_finite(g_gan_val, "generator adversarial loss", state, dump_to)
        g.backward(total)
        grads = {name: leaf.grad for name, leaf in leaves.items()}
        if gan:
            opt_g.step(gen.params, grads,
                       lambda n: lr_attn if n in attn else lr_rest)
        else:
            grads = {n: gr for n, gr in grads.items() if n not in attn}
            opt_g.step(gen.params, grads, lambda n: lr_rest)

        # discriminator pass on detached SR
        if gan:
            g2 = Graph(gen.config.dtype)
            d_leaves = disc.leaves(g2)
            d_real = disc.forward(g2, d_leaves, g2.leaf(hr_b))
            d_fake = disc.forward(g2, d_leaves, g2.leaf(result.sr.data))
            d_loss = _d_adv(d_real, d_fake, schedule.gan_loss)
            d_loss_val = float(d_loss.data)
            _check_finite(d_loss_val, "discriminator loss", state, dump_to)
            g2.backward(d_loss)
            opt_d.step(disc.params,
                       {n: lf.grad for n, lf in d_leaves.items()},
                       lambda n: lr_rest)

        row = TraceRow(iteration=state.iteration, phase=schedule.phase,
                       l1=l1_val, g_gan=g_gan_val, d_loss=d_loss_val,
                       lr_attention=lr_attn, lr_rest=lr_rest)
        rows.append(row)
        if trace_sink is not None:
            trace_sink(row)
    return state, rows


# ---------------------------------------------------------------------------
# Checkpoint format

def _pack_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(fh, n):
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("checkpoint truncated")
    return raw


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def _pack_array(buf, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f4")
    buf.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        buf.write(struct.pack("<I", extent))
    buf.write(arr.tobytes())


def _unpack_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32).copy()


@dataclass
class Checkpoint:
    version: int
    stamp: int
    config_echo: str
    phase: str
    iteration: int
    alpha_initialized: bool
    params: OrderedDict
    mask: bl.BlockMask
    opt_states: dict


def save_checkpoint(path, state: TrainState, config_echo: str = "",
                    stamp: int = 0) -> None:
    """Versioned little-endian binary; the 8-byte stamp defaults to 0 so
    reruns with one seed produce identical bytes."""
    gen, disc = state.generator, state.discriminator
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<Q", stamp))
    _pack_str(buf, config_echo)
    _pack_str(buf, state.phase)
    buf.write(struct.pack("<Q", state.iteration))
    buf.write(struct.pack("<B", 1 if state.alpha_initialized else 0))

    named = list(gen.params.items()) + list(disc.params.items())
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        _pack_str(buf, name)
        _pack_array(buf, arr)

    entries = gen.mask.entries()
    buf.write(struct.pack("<I", len(entries)))
    for b, d, l, flags in entries:
        buf.write(struct.pack("<IIII", b, d, l, len(flags)))
        buf.write(bytes(1 if f else 0 for f in flags))

    opts = [("gen", state.opt_g, gen.params), ("disc", state.opt_d, disc.params)]
    buf.write(struct.pack("<I", len(opts)))
    for opt_name, opt, params in opts:
        _pack_str(buf, opt_name)
        buf.write(struct.pack("<Q", opt.t))
        entries = [(n, opt.m[n], opt.v[n]) for n in params if n in opt.m]
        buf.write(struct.pack("<I", len(entries)))
        for n, m, v in entries:
            _pack_str(buf, n)
            _pack_array(buf, m)
            _pack_array(buf, v)

    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (stamp,) = struct.unpack("<Q", _read_exact(fh, 8))
        config_echo = _unpack_str(fh)
        phase = _unpack_str(fh)
        (iteration,) = struct.unpack("<Q", _read_exact(fh, 8))
        (alpha_init,) = struct.unpack("<B", _read_exact(fh, 1))

        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = OrderedDict()
        for _ in range(n_params):
            name = _unpack_str(fh)
            params[name] = _unpack_array(fh)

        (n_mask,) = struct.unpack("<I", _read_exact(fh, 4))
        rows = []
        for _ in range(n_mask):
            b, d, l, nf = struct.unpack("<IIII", _read_exact(fh, 16))
            flags = tuple(bool(x) for x in _read_exact(fh, nf))
            rows.append((b, d, l, flags))
        mask = bl.BlockMask.from_entries(rows)

        (n_opts,) = struct.unpack("<I", _read_exact(fh, 4))
        opt_states = {}
        for _ in range(n_opts):
            opt_name = _unpack_str(fh)
            (t,) = struct.unpack("<Q", _read_exact(fh, 8))
            (n_entries,) = struct.unpack("<I", _read_exact(fh, 4))
            moments = {}
            for _ in range(n_entries):
                n = _unpack_str(fh)
                moments[n] = (_unpack_array(fh), _unpack_array(fh))
            opt_states[opt_name] = (t, moments)

    return Checkpoint(version=version, stamp=stamp, config_echo=config_echo,
                      phase=phase, iteration=iteration,
                      alpha_initialized=bool(alpha_init), params=params,
                      mask=mask, opt_states=opt_states)


def restore_state(ckpt: Checkpoint, config: GeneratorConfig) -> TrainState:
    state = new_train_state(config, seed=0, mask=ckpt.mask)
    gen, disc = state.generator, state.discriminator
    for store in (gen.params, disc.params):
        for name in store:
            if name not in ckpt.params:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if ckpt.params[name].shape != store[name].shape:
                raise ValueError(f"checkpoint parameter {name!r} has shape "
                                 f"{ckpt.params[name].shape}, expected "
                                 f"{store[name].shape}")
            store[name] = ckpt.params[name].copy()
    for opt, key in ((state.opt_g, "gen"), (state.opt_d, "disc")):
        if key in ckpt.opt_states:
            t, moments = ckpt.opt_states[key]
            opt.t = t
            for n, (m, v) in moments.items():
                opt.m[n] = m.copy()
                opt.v[n] = v.copy()
    state.iteration = ckpt.iteration
    state.phase = ckpt.phase
    state.alpha_initialized = ckpt.alpha_initialized
    return state


def infer(lr_img: np.ndarray, seg, state_or_gen, use_spsa: bool = True
          ) -> np.ndarray:
    """Super-resolve one (H, W, 3) image with its HR-resolution seg map;
    output is clamped RGB at 4x the input extents."""
    from .attention import SegProbMap

    gen = state_or_gen.generator if isinstance(state_or_gen, TrainState) \
        else state_or_gen
    lr_img = np.asarray(lr_img, dtype=np.float32)
    if lr_img.ndim != 3 or lr_img.shape[2] != 3:
        raise ShapeError(f"infer: need (H, W, 3) input, got {lr_img.shape}")
    seg_arr = seg.data if isinstance(seg, SegProbMap) else np.asarray(seg)
    h, w = lr_img.shape[:2]
    if seg_arr.shape != (8, UPSCALE * h, UPSCALE * w):
        raise ShapeError(f"infer: seg map {seg_arr.shape} does not match "
                         f"4x input {(8, UPSCALE * h, UPSCALE * w)}")
    g = Graph(gen.config.dtype)
    leaves = gen.leaves(g, param=False)
    lr_t = g.leaf(lr_img.transpose(2, 0, 1)[None])
    seg_t = g.leaf(seg_arr[None])
    result = gen.forward(g, leaves, lr_t, seg_t, use_spsa=use_spsa)
    sr = result.sr.data[0].transpose(1, 2, 0)
    return np.clip(sr, 0.0, 1.0)
