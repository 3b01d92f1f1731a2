"""Command-line surface: flat key=value run configs, training/pruning/
inference subcommands, and machine-parsable error reporting."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import blocks as bl
from . import data as dt
from . import training as tr
from .attention import export_attention_map, save_heatmap
from .autodiff import Graph, ShapeError
from .training import ConfigError, TrainingDiverged

# key -> (parser, default); None default means the key has no default and is
# only meaningful when a subcommand requires or optionally reads it.
_KEYS = {
    "seed": (int, None),
    "out_dir": (str, None),
    "manifest": (str, None),
    "primary_dir": (str, None),
    "aux_dir": (str, ""),
    "mix_ratio": (str, "10:1"),
    "crop_size": (int, 96),
    "n_blocks": (int, 3),
    "channels": (int, 8),
    "block_channels": (int, None),  # defaults to channels
    "dense_layers": (int, 5),
    "residual_scaling": (float, 0.2),
    "spsa_residual": (int, 1),
    "precision": (str, "f32"),
    "disc_channels": (int, 8),
    "batch_size": (int, 16),
    "iters": (int, None),
    "base_lr": (float, 2e-4),
    "attn_lr": (float, 5e-4),
    "rest_lr": (float, 1e-4),
    "decay_factor": (float, 2.0),
    "decay_interval": (int, 200_000),
    "decay_interval_gan": (int, 100_000),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "lambda_l1": (float, 1e-2),
    "lambda_gan": (float, 5e-3),
    "gan_loss": (str, "nonsat"),
    "epsilon": (float, 0.05),
    "stats_window": (int, 100),
}

_REQUIRED = {
    "prepare-data": ("seed", "out_dir", "primary_dir"),
    "train-psnr": ("seed", "out_dir", "manifest", "iters"),
    "train-gan": ("seed", "out_dir", "manifest", "iters"),
    "prune": ("seed", "out_dir", "manifest"),
}

_CANONICAL_ORDER = tuple(_KEYS)


class RunConfig(dict):
    """Typed view of a flat key=value run configuration."""

    def echo(self) -> str:
        lines = [f"{k}={self[k]}" for k in _CANONICAL_ORDER if k in self]
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, subcommand: str | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = _KEYS[key]
        try:
            values[key] = parser(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}"
                              ) from None
    cfg = RunConfig()
    for key, (parser, default) in _KEYS.items():
        if key in values:
            cfg[key] = values[key]
        elif default is not None:
            cfg[key] = default
    if "block_channels" not in cfg:
        cfg["block_channels"] = cfg["channels"]
    if subcommand is not None:
        missing = [k for k in _REQUIRED.get(subcommand, ()) if k not in cfg]
        if missing:
            raise ConfigError(f"{subcommand} requires config keys: "
                              + ", ".join(missing))
    return cfg


def load_run_config(path, subcommand: str | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), subcommand)


def generator_config(cfg: RunConfig) -> tr.GeneratorConfig:
    return tr.GeneratorConfig(
        n_blocks=cfg["n_blocks"], channels=cfg["channels"],
        block_channels=cfg["block_channels"], dense_layers=cfg["dense_layers"],
        residual_scaling=cfg["residual_scaling"],
        spsa_residual=bool(cfg["spsa_residual"]), precision=cfg["precision"],
        disc_channels=cfg["disc_channels"], crop_size=cfg["crop_size"],
    ).validate()


def schedule_for(cfg: RunConfig, phase: str) -> tr.TrainSchedule:
    interval = cfg["decay_interval"] if phase == tr.PHASE_PSNR \
        else cfg["decay_interval_gan"]
    return tr.TrainSchedule(
        phase=phase, iters=cfg["iters"], batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"], attn_lr=cfg["attn_lr"], rest_lr=cfg["rest_lr"],
        decay_factor=cfg["decay_factor"], decay_interval=interval,
        adam_beta1=cfg["adam_beta1"], adam_beta2=cfg["adam_beta2"],
        lambda_l1=cfg["lambda_l1"], lambda_gan=cfg["lambda_gan"],
        gan_loss=cfg["gan_loss"], seed=cfg["seed"],
    ).validate()


def _mix_ratio(cfg: RunConfig):
    raw = cfg["mix_ratio"]
    try:
        a, b = raw.split(":")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"bad mix_ratio {raw!r}; expected like 10:1") from None


def _write_trace(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(tr.TRACE_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


def _cmd_prepare_data(args) -> int:
    cfg = load_run_config(args.config, "prepare-data")
    entries = []
    for directory, tag in ((cfg["primary_dir"], dt.PRIMARY),
                           (cfg.get("aux_dir", ""), dt.AUX)):
        if not directory:
            continue
        for name in sorted(os.listdir(directory)):
            if not name.endswith(".png"):
                continue
            hr = os.path.join(directory, name)
            seg = os.path.join(directory, name[:-4] + ".spm")
            if not os.path.exists(seg):
                raise dt.FormatError(f"{hr}: missing seg map {seg}")
            entries.append(dt.ManifestEntry(hr_path=hr, seg_path=seg, tag=tag))
    if not entries:
        raise ConfigError(f"no .png/.spm pairs under {cfg['primary_dir']}")
    manifest = dt.DatasetManifest(entries, ratio=_mix_ratio(cfg),
                                  crop=cfg["crop_size"], seed=cfg["seed"])
    manifest.validate_files()
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out = os.path.join(cfg["out_dir"], "manifest.txt")
    manifest.save(out)
    print(f"manifest: {out} ({len(entries)} entries)")
    return 0


def _load_manifest(cfg: RunConfig) -> dt.DatasetManifest:
    manifest = dt.DatasetManifest.load(cfg["manifest"])
    manifest.crop = cfg["crop_size"]
    return manifest


def _cmd_train_psnr(args) -> int:
    cfg = load_run_config(args.config, "train-psnr")
    gen_cfg = generator_config(cfg)
    manifest = _load_manifest(cfg)
    if args.resume:
        ckpt = tr.load_checkpoint(args.resume)
        state = tr.restore_state(ckpt, gen_cfg)
    else:
        state = tr.new_train_state(gen_cfg, seed=cfg["seed"])
    schedule = schedule_for(cfg, tr.PHASE_PSNR)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    state, rows = tr.train(state, schedule, manifest, dump_dir=cfg["out_dir"])
    _write_trace(os.path.join(cfg["out_dir"], "trace_psnr.csv"), rows)
    out = os.path.join(cfg["out_dir"], "ckpt_psnr.ckpt")
    tr.save_checkpoint(out, state, config_echo=cfg.echo())
    print(f"checkpoint: {out} (iteration {state.iteration}, "
          f"final l1 {rows[-1].l1:.6f})")
    return 0


def _cmd_train_gan(args) -> int:
    cfg = load_run_config(args.config, "train-gan")
    gen_cfg = generator_config(cfg)
    manifest = _load_manifest(cfg)
    ckpt = tr.load_checkpoint(args.init)
    state = tr.restore_state(ckpt, gen_cfg)
    schedule = schedule_for(cfg, tr.PHASE_GAN)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    state, rows = tr.train(state, schedule, manifest, dump_dir=cfg["out_dir"])
    _write_trace(os.path.join(cfg["out_dir"], "trace_gan.csv"), rows)
    out = os.path.join(cfg["out_dir"], "ckpt_gan.ckpt")
    tr.save_checkpoint(out, state, config_echo=cfg.echo())
    print(f"checkpoint: {out} (iteration {state.iteration})")
    return 0


def _cmd_prune(args) -> int:
    cfg = load_run_config(args.config, "prune")
    gen_cfg = generator_config(cfg)
    manifest = _load_manifest(cfg)
    ckpt = tr.load_checkpoint(args.ckpt)
    state = tr.restore_state(ckpt, gen_cfg)
    gen = state.generator
    if not gen.mask.is_full():
        raise ConfigError("statistics must be recorded on the dense network; "
                          "the checkpoint already carries a pruned mask")
    stats = bl.PruneStats.for_generator(gen_cfg.n_blocks, gen_cfg.dense_layers,
                                        window=cfg["stats_window"])
    rng = np.random.default_rng([cfg["seed"], 2])
    cache = dt.batch_cache()
    for _ in range(args.stats_iters):
        lr_b, _, seg_b = dt.sample_batch(manifest, cfg["batch_size"], rng, cache)
        g = Graph(gen_cfg.dtype)
        leaves = gen.leaves(g, param=False)
        result = gen.forward(g, leaves, g.leaf(lr_b), g.leaf(seg_b),
                             use_spsa=True, collect_features=True)
        stats.record_features(result.features)
    spatial = (cfg["crop_size"] // 4, cfg["crop_size"] // 4)
    mask, report = bl.prune_network(stats, gen_cfg.channels, spatial,
                                    epsilon=cfg["epsilon"])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "prune_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(cfg["out_dir"], "prune_report.kv"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_kv())
    pruned = tr.new_train_state(gen_cfg, seed=cfg["seed"], mask=mask)
    out = os.path.join(cfg["out_dir"], "pruned_init.ckpt")
    tr.save_checkpoint(out, pruned, config_echo=cfg.echo())
    print(f"connections_removed={report.connections_removed}")
    print(f"pruned checkpoint: {out}")
    return 0


def _state_from_ckpt(path) -> tr.TrainState:
    ckpt = tr.load_checkpoint(path)
    if not ckpt.config_echo.strip():
        raise ConfigError(f"{path}: checkpoint carries no config echo")
    cfg = parse_config_text(ckpt.config_echo)
    return tr.restore_state(ckpt, generator_config(cfg))


def _cmd_infer(args) -> int:
    state = _state_from_ckpt(args.ckpt)
    lr_img = dt.read_png(args.lr)
    seg = dt.read_segmap(args.seg)
    sr = tr.infer(lr_img, seg, state)
    dt.write_png(args.out, sr)
    print(f"sr: {args.out} ({sr.shape[1]}x{sr.shape[0]})")
    return 0


def _cmd_attention_map(args) -> int:
    state = _state_from_ckpt(args.ckpt)
    gen = state.generator
    lr_img = dt.read_png(args.lr)
    seg = dt.read_segmap(args.seg)
    h, w = lr_img.shape[:2]
    if (seg.height, seg.width) != (4 * h, 4 * w):
        raise ShapeError(f"seg map ({seg.height}, {seg.width}) is not 4x the "
                         f"input ({h}, {w})")
    try:
        qx, qy = (int(v) for v in args.query.split(","))
    except ValueError:
        raise ConfigError(f"bad --query {args.query!r}; expected X,Y") from None
    if not (0 <= qx < seg.width and 0 <= qy < seg.height):
        raise ConfigError(f"query ({qx}, {qy}) outside the HR raster")
    g = Graph(gen.config.dtype)
    leaves = gen.leaves(g, param=False)
    result = gen.forward(g, leaves, g.leaf(lr_img.transpose(2, 0, 1)[None]),
                         g.leaf(seg.data[None]), use_spsa=True,
                         want_states=True)
    query = (qy // 4) * w + (qx // 4)
    heat = export_attention_map(result.states[0], args.which, query,
                                (seg.height, seg.width))
    save_heatmap(heat, args.out)
    print(f"heatmap: {args.out} (query index {query})")
    return 0


def _cmd_metrics(args) -> int:
    a = dt.rgb_to_y(dt.read_png(args.a))
    b = dt.rgb_to_y(dt.read_png(args.b))
    p = dt.psnr(a, b)
    s = dt.ssim(a, b)
    print(f"PSNR={p:.6f} SSIM={s:.6f}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="spsalab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build and validate a manifest")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=_cmd_prepare_data)

    p = sub.add_parser("train-psnr", help="phase-1 L1 training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(handler=_cmd_train_psnr)

    p = sub.add_parser("train-gan", help="phase-2 adversarial training")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True)
    p.set_defaults(handler=_cmd_train_gan)

    p = sub.add_parser("prune", help="record dissimilarity stats and prune")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stats-iters", type=int, required=True)
    p.set_defaults(handler=_cmd_prune)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("attention-map", help="export one query's heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--query", required=True, help="X,Y in HR pixels")
    p.add_argument("--which", required=True, choices=("fea", "seg", "combined"))
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_attention_map)

    p = sub.add_parser("metrics", help="PSNR/SSIM of two images (Y channel)")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(handler=_cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 3
    except (dt.FormatError, OSError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
