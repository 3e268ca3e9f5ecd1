"""Command-line entry point: gen-data, train, edit, eval."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from .codec import make_embedding_table, tokenize
from .core import Rng, export_ppm_frames, load_video, save_tensor
from .denoiser import ArchConfig, init_params, load_checkpoint, param_count, save_checkpoint
from .diffusion import TrainConfig, Trainer, train
from .guidance import GuidanceScales, sample_edit
from .metrics import MetricsConfig, report
from .triplets import SceneRanges, gen_dataset, read_dataset

log = logging.getLogger("vidlab")

TABLE_SEED = 0


class CliError(Exception):
    pass


def _add_train_flags(p):
    g = p.add_argument_group("training (override --config values)")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lam", type=float, help="consistency-loss weight")
    g.add_argument("--lr", type=float)
    g.add_argument("--T", type=int)
    g.add_argument("--beta-start", type=float)
    g.add_argument("--beta-end", type=float)
    g.add_argument("--p-video", type=float)
    g.add_argument("--p-text", type=float)
    g.add_argument("--p-both", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--base-channels", type=int)
    g.add_argument("--levels", type=int)
    g.add_argument("--temporal-init", choices=["random", "identity"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a procedural triplet dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32, help="frame height and width")

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    _add_train_flags(p)

    p = sub.add_parser("edit", help="edit a video following an instruction")
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help=".vten file or directory of PPM frames")
    src.add_argument("--data", help="dataset file; pick a record with --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--instruction", help="instruction text (default: the record's own)")
    p.add_argument("--s-text", type=float, default=GuidanceScales.s_text)
    p.add_argument("--s-video", type=float, default=GuidanceScales.s_video)
    p.add_argument("--no-guidance", action="store_true", help="plain conditional sampling")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .vten path")
    p.add_argument("--ppm-dir", help="PPM frame directory (default: <out>.frames)")

    p = sub.add_parser("eval", help="compute the metrics report for a video")
    p.add_argument("--video", required=True, help=".vten file or directory of PPM frames")
    p.add_argument("--reference", nargs="*", default=None, help="reference videos for the Frechet distance")
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument("--block", type=int, default=MetricsConfig.block)
    p.add_argument("--radius", type=int, default=MetricsConfig.radius)
    p.add_argument("--hs-alpha", type=float, default=MetricsConfig.hs_alpha)
    p.add_argument("--hs-iters", type=int, default=MetricsConfig.hs_iters)
    return parser


def resolve_train_config(args) -> tuple[TrainConfig, ArchConfig]:
    values = {}
    if args.config:
        with open(args.config) as fh:
            values = json.load(fh)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    arch = dict(values.get("arch", {}))
    for name in ("base_channels", "levels", "temporal_init"):
        if getattr(args, name, None) is not None:
            arch[name] = getattr(args, name)
    if "betas" in values:
        values["betas"] = tuple(values["betas"])
    cfg = TrainConfig(**values)
    arch_cfg = ArchConfig(**{"base_channels": 16, "text_dim": cfg.text_dim, **arch})
    cfg.arch = arch_cfg.to_dict()
    return cfg, arch_cfg


def cmd_gen_data(args) -> None:
    ranges = SceneRanges(frames=args.frames, height=args.size, width=args.size)
    gen_dataset(args.count, args.seed, args.out, ranges)
    log.info("wrote %d triplets to %s", args.count, args.out)


def cmd_train(args) -> None:
    cfg, arch = resolve_train_config(args)
    data, meta = read_dataset(args.data)
    vocab = meta["vocab"]
    table = make_embedding_table(len(vocab), cfg.text_dim, TABLE_SEED)
    master = Rng(cfg.seed)
    init_rng, data_rng = master.spawn(2)
    model = init_params(arch, init_rng)
    log.info("denoiser with %d parameters", param_count(model))
    trainer = Trainer(model, cfg, table)
    log_path = args.log or os.fspath(args.out) + ".loss.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_sd", "loss_fd", "loss_total"])

        def record(step, res):
            writer.writerow([step, repr(res.loss_sd), repr(res.loss_fd), repr(res.loss_total)])
            if step % 100 == 0:
                log.info("step %d loss %.5f", step, res.loss_total)

        train(trainer, data, data_rng, log=record)
    save_checkpoint(model, args.out, {"train": asdict(cfg), "vocab": vocab, "table_seed": TABLE_SEED})


def cmd_edit(args) -> None:
    model, meta = load_checkpoint(args.ckpt)
    cfg = TrainConfig(**{**meta["train"], "betas": tuple(meta["train"]["betas"])})
    vocab = meta["vocab"]
    table = make_embedding_table(len(vocab), cfg.text_dim, meta.get("table_seed", TABLE_SEED))
    if args.data:
        records, _ = read_dataset(args.data)
        if not 0 <= args.index < len(records):
            raise CliError(f"index {args.index} outside dataset of {len(records)} records")
        video, ids = records[args.index].input, records[args.index].token_ids
    else:
        video, ids = load_video(args.input), None
    if args.instruction:
        ids = tokenize(args.instruction, vocab)
    if ids is None:
        raise CliError("--instruction is required with --input")
    scales = None if args.no_guidance else GuidanceScales(args.s_video, args.s_text)
    out = sample_edit(model, video, ids, table, cfg.schedule(), Rng(args.seed), args.steps,
                      scales, cfg.latent_scale)
    save_tensor(out, args.out)
    export_ppm_frames(out, args.ppm_dir or os.fspath(args.out) + ".frames")


def cmd_eval(args) -> None:
    video = load_video(args.video)
    refs = [load_video(r) for r in args.reference] if args.reference else None
    mcfg = MetricsConfig(args.hs_alpha, args.hs_iters, args.block, args.radius)
    text = report(video, refs, mcfg).to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "edit": cmd_edit, "eval": cmd_eval}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, CliError, ArithmeticError) as exc:
        print(f"vidlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
