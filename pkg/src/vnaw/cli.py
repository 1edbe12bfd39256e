"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment_clip
from .config import (
    ConfigError,
    apply_overrides,
    as_flat_dict,
    config_key,
    read_flat_config,
    write_flat_config,
)
from .data import GenConfig, LabeledClip, generate_dataset, read_clip, read_dataset, write_clip, write_dataset
from .loss import NawParams
from .metrics import class_names, macro_f1, per_class_f1
from .model import load_checkpoint, save_checkpoint
from .tensors import RngStream
from .train import (
    ABLATION_GEN,
    ABLATION_TRAIN,
    TrainConfig,
    check_gradients,
    evaluate,
    fit,
    infer_classes,
    run_ablation,
    split_dataset,
    tiny_problem,
)

GRADCHECK_TOL = 1e-4
GEN_CONFIG = "gen.cfg"

log = logging.getLogger("vnaw")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def fmt(x: float) -> str:
    return f"{x:.6f}"


def flag_name(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser, cfg_cls, skip=()) -> None:
    """One override flag per dataclass field; booleans get a ``--x/--no-x`` exclusive pair."""
    for f in dataclasses.fields(cfg_cls):
        if f.name in skip:
            continue
        key = config_key(f.name)
        flag = flag_name(key)
        if isinstance(f.default, bool):
            group = parser.add_mutually_exclusive_group()
            group.add_argument(flag, dest=key, action="store_const", const="true", default=None)
            group.add_argument("--no-" + flag[2:], dest=key, action="store_const", const="false", default=None)
        else:
            parser.add_argument(flag, dest=key, metavar=f.name.upper(), default=None)


def resolve_config(cfg_cls, config_path, args, skip=()):
    values = read_flat_config(config_path) if config_path else {}
    for f in dataclasses.fields(cfg_cls):
        key = config_key(f.name)
        if f.name not in skip and getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return apply_overrides(cfg_cls(), values)


def build_parser() -> Parser:
    parser = Parser(prog="vnaw", description="Clip-level expression classifier with noise-aware loss weighting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("gen-data", help="write a synthetic clip dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="flat key = value data config")
    add_config_flags(p, GenConfig)

    p = sub.add_parser("augment", help="augment one clip file (for inspection)")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lambda-min", type=float, default=0.2)
    p.add_argument("--lambda-max", type=float, default=0.4)
    p.add_argument("--erase-ratio", type=float, default=0.2)
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--no-erase", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preview", type=Path, help="also render the augmented frames to this image")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--log", type=Path, help="per-epoch CSV log")
    p.add_argument("--plot", type=Path, help="training-curve figure (default: next to --log)")
    add_config_flags(p, TrainConfig)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--config", type=Path, help="defaults to the config saved beside the checkpoint")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--csv", type=Path, help="also write the CSV row here")
    add_config_flags(p, TrainConfig)

    p = sub.add_parser("gradcheck", help="finite-difference check of end-to-end gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)

    p = sub.add_parser("ablate", help="vanilla / +aug / +NAW / +both comparison on synthetic data")
    p.add_argument("--data-config", type=Path)
    p.add_argument("--train-config", type=Path)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", type=Path, help="CSV table path")
    p.add_argument("--plot", type=Path, help="bar chart (default: next to --out)")
    return parser


# -- tables -----------------------------------------------------------------------------

def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def human_table(header, rows) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule, *(line(r) for r in rows)]) + "\n"


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(GenConfig, args.config, args).validate()
    clips = generate_dataset(cfg)
    manifest = write_dataset(clips, args.out)
    write_flat_config(as_flat_dict(cfg), Path(args.out) / GEN_CONFIG)
    counts = np.bincount([c.label for c in clips], minlength=cfg.classes)
    print(f"wrote {len(clips)} clips to {manifest}")
    print("label counts: " + " ".join(str(int(n)) for n in counts))
    return 0


def cmd_augment(args) -> int:
    item = read_clip(args.inp)
    cfg = AugmentConfig(args.lambda_min, args.lambda_max, args.erase_ratio,
                        skip=not args.no_skip, erase=not args.no_erase).validate()
    item.clip.validate_range()
    out = augment_clip(item.clip, cfg, RngStream(args.seed))
    write_clip(LabeledClip(out, item.label, item.clip_id), args.out)
    print(f"frames kept: {out.num_frames}/{item.clip.num_frames} source indices: "
          + " ".join(str(i) for i in out.indices))
    if args.preview:
        from .plotting import plot_clip

        plot_clip(out.values, args.preview, out.indices)
    return 0


def log_rows(history, k):
    header = ["epoch", "loss", "mean_weight", "train_macro_f1", "val_macro_f1"] + [f"f1_{n}" for n in class_names(k)]
    rows = [
        [h.epoch, fmt(h.loss), f"{h.mean_weight:.10g}", fmt(h.train_f1), fmt(h.val_f1)]
        + [fmt(x) for x in h.val_class_f1]
        for h in history
    ]
    return header, rows


def dataset_classes(data_dir, items) -> int:
    """Class count from the generator config beside the data, else the largest label seen."""
    k = infer_classes(items)
    gen = Path(data_dir) / GEN_CONFIG
    if gen.exists():
        k = max(k, int(read_flat_config(gen).get("classes", k)))
    return k


def cmd_train(args) -> int:
    cfg = resolve_config(TrainConfig, args.config, args).validate()
    items = read_dataset(args.data)
    k = dataset_classes(args.data, items)
    train_items, val_items = split_dataset(items, cfg.val_fraction)
    t0 = time.perf_counter()
    params, history = fit(train_items, val_items, cfg, k)
    save_checkpoint(params, args.out)
    write_flat_config(as_flat_dict(cfg), str(args.out) + ".cfg")
    header, rows = log_rows(history, k)
    if args.log:
        Path(args.log).write_text(csv_text(header, rows))
    plot_path = args.plot or (Path(args.log).with_suffix(".png") if args.log else None)
    if plot_path and history:
        from .plotting import plot_training_curves

        plot_training_curves(history, plot_path)
    log.info("trained %d epochs in %.1fs", cfg.epochs, time.perf_counter() - t0)
    if rows:
        print(human_table(header[:5], [r[:5] for r in rows[-1:]]), end="")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    sidecar = Path(str(args.ckpt) + ".cfg")
    config_path = args.config or (sidecar if sidecar.exists() else None)
    cfg = resolve_config(TrainConfig, config_path, args)
    items = read_dataset(args.data)
    train_items, val_items = split_dataset(items, cfg.val_fraction)
    chosen = {"val": val_items, "train": train_items, "all": items}[args.split]
    if not chosen:
        raise ValueError(f"split {args.split!r} is empty")
    counts = evaluate(params, chosen, cfg.eval_labels, cfg.per_frame)
    k = params.config.classes
    header = ["split"] + class_names(k) + ["Avg."]
    row = [args.split] + [fmt(x) for x in per_class_f1(counts)] + [fmt(macro_f1(counts))]
    text = csv_text(header, [row])
    if args.csv:
        Path(args.csv).write_text(text)
    print(text, end="")
    print()
    print(human_table(header, [row]), end="")
    return 0


def cmd_gradcheck(args) -> int:
    params, clip, y = tiny_problem(args.seed)
    k = params.config.classes
    ok = True
    for label, naw in (("on", NawParams.create(k)), ("off", None)):
        t0 = time.perf_counter()
        err = check_gradients(params, clip, y, naw, args.step)
        passed = err <= args.tol
        ok &= passed
        print(f"naw={label:<3} max_rel_err={err:.3e} tol={args.tol:g} "
              f"{'PASS' if passed else 'FAIL'} ({time.perf_counter() - t0:.2f}s)")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


def ablation_rows(table):
    rows = []
    for name, (aug, naw), cls, macro in zip(table.names, table.flags, table.class_f1, table.macro):
        rows.append([name, "x" if aug else "", "x" if naw else ""] + [fmt(x) for x in cls] + [fmt(macro)])
    return rows


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    gen_cfg = apply_overrides(ABLATION_GEN,
                              read_flat_config(args.data_config) if args.data_config else {}).validate()
    train_cfg = apply_overrides(ABLATION_TRAIN,
                                read_flat_config(args.train_config) if args.train_config else {}).validate()
    seeds = range(gen_cfg.seed, gen_cfg.seed + args.seeds)
    t0 = time.perf_counter()
    table = run_ablation(gen_cfg, train_cfg, seeds)
    header = ["variant", "Aug", "NAW"] + class_names(gen_cfg.classes) + ["Avg."]
    rows = ablation_rows(table)
    text = csv_text(header, rows)
    if args.out:
        Path(args.out).write_text(text)
        plot_path = args.plot or Path(args.out).with_suffix(".png")
    else:
        plot_path = args.plot
    if plot_path:
        from .plotting import plot_ablation

        plot_ablation(table, plot_path)
    print(text, end="")
    print()
    print(human_table(header, rows), end="")
    log.info("ablation over %d seeds took %.1fs", args.seeds, time.perf_counter() - t0)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"vnaw {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"vnaw {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
