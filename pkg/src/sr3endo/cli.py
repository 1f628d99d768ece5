"""Command line entry point: preprocess, train, sample, evaluate, eda.

Any configuration key can be overridden as ``--key value`` (e.g.
``--train.base_lr 1e-4``).  Every command prints the resolved configuration
and stores it next to its outputs as ``resolved_config.txt``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import tensor as T
from .config import ConfigError, RunConfig, parse_value
from .denoiser import build
from .diffusion import from_model_range, sample, to_model_range
from .imaging import (ImageFormatError, RAW_EXTENSIONS, bicubic_resize, default_data_root, load_image,
                      open_corpus, preprocess_corpus, save_image, toy_splits)
from .metrics import ImageTriplet, aggregate, eda_report, metric_rows, write_metric_rows, write_summary
from .schedule import respace
from .training import (CheckpointFormatError, CheckpointStore, TrainingAborted, load_checkpoint,
                       train_loop)

log = logging.getLogger("sr3endo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sr3endo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--preset", choices=["gen1", "gen2"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    sp = common(sub.add_parser("preprocess", help="clean raw images into a training corpus"))
    sp.add_argument("raw_dir")

    sp = common(sub.add_parser("train", help="train a denoiser"))
    sp.add_argument("--toy", action="store_true", help="desk-scale run on the synthetic corpus")
    sp.add_argument("--iters", type=int, help="total training iterations")

    sp = common(sub.add_parser("sample", help="super-resolve low-resolution images"))
    sp.add_argument("checkpoint")
    sp.add_argument("inputs", help="an LR image or a directory of them")
    sp.add_argument("--steps", type=int, help="sample with this many refinement steps instead of T")

    sp = common(sub.add_parser("evaluate", help="PSNR/SSIM of SR images against HR references"))
    sp.add_argument("sr_dir")
    sp.add_argument("hr_dir")

    sp = common(sub.add_parser("eda", help="metric and brightness/contrast report over triplets"))
    sp.add_argument("triplet_dir", help="directory with lr/, sr/ and hr/ subdirectories")
    return p


def _overrides(extra: list[str]) -> dict:
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            try:
                val = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for --{key}") from None
        out[key] = parse_value(val)
    return out


def _resolve(args, extra) -> RunConfig:
    overrides = _overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        overrides["train.total_iters"] = args.iters
    cfg = RunConfig.resolve(args.preset, getattr(args, "toy", False), args.config, overrides)
    if cfg["data.root"] is None and default_data_root():
        cfg.update({"data.root": default_data_root()})
    return cfg


def _announce(cfg: RunConfig, out: Path | None) -> None:
    text = cfg.dump()
    print("# resolved configuration")
    print(text, end="")
    if out is not None:
        cfg.save(out / "resolved_config.txt")


def _images_in(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"{path} does not exist")
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in RAW_EXTENSIONS)


def cmd_preprocess(args, cfg: RunConfig) -> int:
    cfg.validate()
    out = Path(args.out or cfg["data.root"] or "corpus")
    _announce(cfg, out)
    report = preprocess_corpus(args.raw_dir, out, cfg["data.hr_size"], cfg["data.scale"],
                               cfg["data.val_fraction"], cfg["seed"])
    counts: dict = {}
    for row in report:
        counts[row["action"]] = counts.get(row["action"], 0) + 1
    print("preprocess: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    if counts.get("kept", 0) + counts.get("cropped", 0) == 0:
        print(f"error: no usable images in {args.raw_dir}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    cfg.validate(need_data=True)
    out = Path(args.out or "run")
    _announce(cfg, out)
    T.set_precision(cfg["precision"])
    if cfg["data.toy"]:
        train, val = toy_splits(cfg["data.toy_train_items"], cfg["data.toy_val_items"],
                                cfg["data.hr_size"], cfg["data.scale"], cfg["seed"])
    else:
        train = open_corpus(cfg["data.root"], "train", cfg["data.hr_size"], cfg["data.scale"])
        try:
            val = open_corpus(cfg["data.root"], "val", cfg["data.hr_size"], cfg["data.scale"])
        except ValueError:
            val = None
    model = build(cfg.denoiser_config(), T.Rng(cfg["seed"]).fork(0))
    store = CheckpointStore(out)
    state = train_loop(model, train, cfg.schedule(), cfg.train_config(), store, val_data=val,
                       run_config=cfg.values)
    print(f"train: {state.step} steps, {len(store.saved)} checkpoints in {out}")
    return EXIT_OK


def _model_from_checkpoint(path):
    state = load_checkpoint(path)
    cfg = RunConfig(state.config)
    model = build(cfg.denoiser_config(), T.Rng(0))
    for k, p in model.params.items():
        if k not in state.ema_params:
            raise CheckpointFormatError(f"{path}: missing tensor {k}")
        p.data = state.ema_params[k]
    return cfg, state, model


def cmd_sample(args, cfg: RunConfig) -> int:
    ck_cfg, state, model = _model_from_checkpoint(args.checkpoint)
    T.set_precision(ck_cfg["precision"])
    for k, p in model.params.items():
        p.data = p.data.astype(T.get_dtype())
    hr, scale = ck_cfg["data.hr_size"], ck_cfg["data.scale"]
    lr_size = hr // scale
    seed = cfg["seed"]
    out = Path(args.out or "samples")
    merged = RunConfig(dict(ck_cfg.values, seed=seed))
    _announce(merged, out)
    sched = state.schedule
    if args.steps and args.steps < sched.T:
        sched = respace(sched, args.steps)
        log.warning("sampling with %d of %d refinement steps", sched.T, state.schedule.T)
    for path in _images_in(Path(args.inputs)):
        img = load_image(path)
        if img.shape[:2] != (lr_size, lr_size):
            print(f"error: {path} is {img.shape[1]}x{img.shape[0]}, checkpoint expects "
                  f"{lr_size}x{lr_size} inputs (scale {scale})", file=sys.stderr)
            return EXIT_CONFIG
        up = bicubic_resize(img, hr, hr)
        x = to_model_range(up).transpose(2, 0, 1)[None].astype(T.get_dtype())
        y = sample(model, x, sched, T.Rng(seed), ck_cfg["sample.clip_x0"])
        save_image(from_model_range(y[0]).transpose(1, 2, 0), out / f"{path.stem}.png")
    return EXIT_OK


def _pair_dirs(a: Path, b: Path):
    left = {p.stem: p for p in _images_in(a)}
    right = {p.stem: p for p in _images_in(b)}
    common = sorted(left.keys() & right.keys())
    for k in sorted(left.keys() ^ right.keys()):
        print(f"warning: {k} has no counterpart; skipped", file=sys.stderr)
    return common, left, right


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = Path(args.out or "evaluation")
    _announce(cfg, out)
    ids, sr, hr = _pair_dirs(Path(args.sr_dir), Path(args.hr_dir))
    if not ids:
        print("error: no matching ids between the two directories", file=sys.stderr)
        return EXIT_IO
    rows = metric_rows((i, load_image(sr[i]), load_image(hr[i])) for i in ids)
    write_metric_rows(rows, out / "report.tsv")
    agg = aggregate(rows)
    write_summary(agg, out / "summary.tsv")
    print(f"evaluate: n={agg['n']} mean_psnr={agg['mean_psnr']:.4f} mean_ssim={agg['mean_ssim']:.6f}")
    return EXIT_OK


def cmd_eda(args, cfg: RunConfig) -> int:
    out = Path(args.out or "eda")
    _announce(cfg, out)
    root = Path(args.triplet_dir)
    ids, sr, hr = _pair_dirs(root / "sr", root / "hr")
    if not ids:
        print("error: no matching ids between sr/ and hr/", file=sys.stderr)
        return EXIT_IO
    lr_dir = root / "lr"
    triplets = [ImageTriplet(i, load_image(lr_dir / sr[i].name) if (lr_dir / sr[i].name).exists() else None,
                             load_image(sr[i]), load_image(hr[i])) for i in ids]
    rep = eda_report(triplets, out)
    agg = rep.aggregates
    print(f"eda: n={agg['n']} mean_psnr={agg['mean_psnr']:.4f} mean_ssim={agg['mean_ssim']:.6f}")
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "sample": cmd_sample,
            "evaluate": cmd_evaluate, "eda": cmd_eda}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args, extra = _parser().parse_known_args(argv)
    try:
        cfg = _resolve(args, extra)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointFormatError, ImageFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        T.set_precision("single")


if __name__ == "__main__":
    sys.exit(main())
