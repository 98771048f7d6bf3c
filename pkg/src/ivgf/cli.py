"""Single executable: forward inference, gradient checking, augmentation
preview, toy training, evaluation (with missing-modality substitution), and
synthetic data generation.

Exit codes are a stable contract:
  0 success, 1 gradient-check violation, 2 config or argument error,
  3 I/O or format error, 4 shape error, 5 non-finite loss.

Seed precedence: --seed flag > IVGF_SEED env var > train.seed config key.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import __version__, augment, gradcheck, io_formats, pipeline, tensor
from .backbone import encoder_forward, feature_projection
from .errors import ConfigError, DimensionError, FormatError, NonFiniteError
from .rng import RngState

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SHAPE = 4
EXIT_NONFINITE = 5


def _resolve_seed(flag_seed, cfg) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("IVGF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"IVGF_SEED must be an integer, got {env!r}") from None
    return cfg.train_seed


def _write_metadata(out_dir: Path, command: str, cfg, seed: int, outputs) -> None:
    # metadata goes down before any result file; a results directory
    # without it is invalid
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"seed = {seed}",
        f"wall_clock = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
        "outputs = " + ",".join(outputs),
        "",
        cfg.dump().rstrip("\n"),
    ]
    (out_dir / "run_metadata.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_image(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"image file not found: {path}")
    return io_formats.read_pnm_file(path)


def _load_model(cfg, seed: int, ckpt_path):
    model = pipeline.build_model(cfg, seed)
    if ckpt_path is not None:
        if not os.path.exists(ckpt_path):
            raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
        loaded = io_formats.load_checkpoint(ckpt_path)
        model.store.load_arrays(loaded.arrays())
    return model


def _load_scene_dir(path: str, classes: int):
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {path}")
    scenes = []
    for ir_path in sorted(root.glob("*_ir.ppm")):
        stem = ir_path.name[: -len("_ir.ppm")]
        vis_path = root / f"{stem}_vis.ppm"
        mask_path = root / f"{stem}_mask.pgm"
        if not vis_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"scene {stem!r} is missing {vis_path.name} or {mask_path.name}")
        mask = io_formats.read_pgm_labels(mask_path)
        labeled = mask[mask != pipeline.IGNORE_LABEL]
        if labeled.size and labeled.max() >= classes:
            raise FormatError(
                f"{mask_path.name}: label {int(labeled.max())} exceeds head.classes = {classes}"
            )
        scenes.append(
            pipeline.SyntheticScene(
                ir=io_formats.read_pnm_file(ir_path),
                vis=io_formats.read_pnm_file(vis_path),
                mask=mask,
            )
        )
    if not scenes:
        raise FileNotFoundError(f"no scenes (*_ir.ppm) found in {path}")
    return scenes


# -- subcommands -----------------------------------------------------------------


def cmd_forward(args) -> int:
    cfg = io_formats.load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    ir = _read_image(args.ir)
    vis = _read_image(args.vis)
    model = _load_model(cfg, seed, args.ckpt)
    out_dir = Path(args.out_dir)

    outputs = ["mask.pgm"]
    if args.dump_features:
        outputs += [f"feat_s{i}_{tag}.pgm" for i in range(1, 5) for tag in ("x", "y", "xy")]
    _write_metadata(out_dir, "forward", cfg, seed, outputs)

    feats = encoder_forward(ir, vis, model.encoder)
    logits = pipeline.seg_forward(feats, model.head)
    io_formats.write_pgm_labels(logits.data.argmax(axis=0), out_dir / "mask.pgm")
    if args.dump_features:
        for i, ((fx, fy), fxy) in enumerate(zip(feats.pairs, feats.fused), start=1):
            for tag, fmap in (("x", fx), ("y", fy), ("xy", fxy)):
                io_formats.write_pnm(feature_projection(fmap)[None], out_dir / f"feat_s{i}_{tag}.pgm")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        print(f"error: --trials must be >= 1, got {args.trials}", file=sys.stderr)
        return EXIT_CONFIG
    fault = os.environ.get("IVGF_FAULT_INJECT")
    if fault:
        tensor.FAULT_SIGN_OP = fault  # test hook: flips one op's backward sign
    try:
        results = gradcheck.run_suite(seed=args.seed, trials=args.trials)
    finally:
        tensor.FAULT_SIGN_OP = None
    print(f"{'block':<12} {'max_rel_err':>12} {'tolerance':>10}  status")
    failed = []
    for res in results:
        status = "ok" if res.ok else f"FAIL at {res.worst}"
        print(f"{res.block:<12} {res.max_err:>12.3e} {res.tolerance:>10.0e}  {status}")
        if not res.ok:
            failed.append(res)
    if failed:
        print(
            "gradient check failed: "
            + "; ".join(f"{r.block} ({r.worst}, err {r.max_err:.3e})" for r in failed),
            file=sys.stderr,
        )
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = io_formats.load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    out_dir = Path(args.out_dir)
    ckpt_path = Path(args.out_ckpt) if args.out_ckpt else out_dir / "model.ckpt"
    _write_metadata(out_dir, "train-toy", cfg, seed, ["loss_curve.csv", ckpt_path.name])

    model, losses = pipeline.train_toy(cfg, steps=args.steps, seed=seed)
    curve = "step,loss\n" + "".join(f"{i},{loss!r}\n" for i, loss in enumerate(losses))
    (out_dir / "loss_curve.csv").write_text(curve, encoding="utf-8")
    io_formats.save_checkpoint(model.store, ckpt_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = io_formats.load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    scenes = _load_scene_dir(args.data, cfg.head_classes)
    model = _load_model(cfg, seed, args.ckpt)
    out_dir = Path(args.out_dir)
    _write_metadata(out_dir, "eval", cfg, seed, ["report.txt", "report.csv"])

    report = pipeline.evaluate(scenes, model, missing=args.missing)
    (out_dir / "report.txt").write_text(pipeline.report_text(report), encoding="utf-8")
    (out_dir / "report.csv").write_text(pipeline.report_csv(report), encoding="utf-8")
    print(pipeline.report_text(report), end="")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = io_formats.load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    ir = _read_image(args.ir)
    vis = _read_image(args.vis)
    out_dir = Path(args.out_dir)
    _write_metadata(out_dir, "augment", cfg, seed, ["ir_aug.ppm", "vis_aug.ppm", "record.txt"])

    aug_cfg = pipeline.aug_config_from(cfg)
    ir2, vis2, record = augment.cma_apply(ir, vis, aug_cfg, RngState(seed).derive("augment"))
    io_formats.write_pnm(tensor.Tensor(ir2.data.clip(0.0, 1.0)), out_dir / "ir_aug.ppm")
    io_formats.write_pnm(tensor.Tensor(vis2.data.clip(0.0, 1.0)), out_dir / "vis_aug.ppm")
    (out_dir / "record.txt").write_text(record.as_text(), encoding="utf-8")
    return EXIT_OK


def cmd_make_data(args) -> int:
    cfg = io_formats.load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    count = args.count if args.count is not None else (
        cfg.data_train_scenes if args.split == "train" else cfg.data_eval_scenes
    )
    out_dir = Path(args.out_dir)
    names = [f"scene_{i:03d}" for i in range(count)]
    outputs = [f"{n}_{suffix}" for n in names for suffix in ("ir.ppm", "vis.ppm", "mask.pgm")]
    _write_metadata(out_dir, "make-data", cfg, seed, outputs)

    scenes = pipeline.make_dataset(seed, args.split, count, cfg.data_image_size, cfg.head_classes)
    for name, scene in zip(names, scenes):
        io_formats.write_pnm(scene.ir, out_dir / f"{name}_ir.ppm")
        io_formats.write_pnm(scene.vis, out_dir / f"{name}_vis.ppm")
        io_formats.write_pgm_labels(scene.mask, out_dir / f"{name}_mask.pgm")
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivgf", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=True):
        p.add_argument("--config", default=None, help="config file (defaults apply when absent)")
        p.add_argument("--seed", type=int, default=None)
        if out_dir:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("forward", help="run dual-modality inference on one image pair")
    common(p)
    p.add_argument("--ir", required=True, help="infrared image (P5/P6 PNM)")
    p.add_argument("--vis", required=True, help="visible image (P5/P6 PNM)")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--dump-features", action="store_true", help="write all 12 per-scale feature views")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="verify every block's gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on the synthetic paired-modality task")
    common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out-ckpt", default=None)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally with a missing modality")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory of *_ir.ppm / *_vis.ppm / *_mask.pgm scenes")
    p.add_argument("--missing", choices=("ir", "vis", "none"), default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="preview cutout&mix augmentation on one image pair")
    common(p)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("make-data", help="materialize synthetic scenes as PNM files")
    common(p)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_make_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse reports bad flags with code 2
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DimensionError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except NonFiniteError as exc:
        print(f"non-finite: {exc}", file=sys.stderr)
        return EXIT_NONFINITE


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
