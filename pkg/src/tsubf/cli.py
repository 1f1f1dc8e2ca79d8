"""``tsubf`` command line: synth, preprocess, train, infer, eval, gradcheck, ablate, flops.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import report
from .losses import LossConfig
from .metrics import LabelVolume, evaluate_many, hd95_details, iou, dsc
from .network import CheckpointError, ModelConfig, TSUBFNet, load_checkpoint, sliding_window_infer
from .nifti import NiftiError, read_nifti1
from .synthetic import SyntheticSpec, make_synthetic
from .tensor import ConfigError, ShapeError, UsageError
from .train import TrainConfig, TrainingError, train
from .volumes import (VolumeFormatError, VolumeSample, load_sample, normalize_hu, read_manifest, read_native,
                      save_sample, split_counts, write_manifest, write_native)

log = logging.getLogger("tsubf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ORACLE_MAX_VOXELS = 32**3


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USAGE):
        super().__init__(msg)
        self.code = code


# --------------------------------------------------------------- config

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}")
    unknown = set(cfg) - {"model", "train", "loss"}
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}; expected model, train, loss")
    return cfg


def _build(cls, base: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = set(merged) - known
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**merged)


def resolve_run_config(args) -> tuple[ModelConfig, TrainConfig, LossConfig]:
    cfg = load_config(args.config)
    lam = args.lam
    model = _build(ModelConfig, cfg.get("model", {}), {
        "channels": args.channels, "patch_size": args.patch, "num_classes": args.classes,
        "seed": args.seed, "lambda_sobel": lam})
    tcfg = _build(TrainConfig, cfg.get("train", {}), {
        "steps": args.steps, "lr": args.lr, "seed": args.seed, "val_every": args.val_every,
        "lr_schedule": args.schedule})
    loss = _build(LossConfig, cfg.get("loss", {}), {"lam": model.lambda_sobel})
    return model, tcfg, loss


def write_snapshot(out_dir: Path, **sections) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {k: (v.to_dict() if hasattr(v, "to_dict") else asdict(v) if hasattr(v, "__dataclass_fields__") else v)
            for k, v in sections.items()}
    (out_dir / "config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------- dataset

def load_split(manifest, split: str | None, need_labels: bool = True) -> list[VolumeSample]:
    out = []
    for s in read_manifest(manifest):
        if split and s.get("split") != split:
            continue
        v = load_sample(s["image"], s.get("label") if need_labels else None, source=s["id"])
        out.append(normalize_hu(v) if v.units == "hu" else v)
    return out


def read_volume(path) -> VolumeSample:
    path = Path(path)
    if path.suffix == ".nii":
        return read_nifti1(path)
    arr, meta = read_native(path)
    return VolumeSample(arr, spacing=meta["spacing"], source=path.stem, units=meta["units"])


# --------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    fractions = tuple(args.split)
    n_train, n_val, n_test = split_counts(args.n, fractions)
    if args.n == 0:
        log.warning("n=0: writing an empty manifest")
    spec = SyntheticSpec(shape=tuple(args.shape), blur_sigma=args.blur, noise_std=args.noise)
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    samples = []
    for i, split in enumerate(names):
        v = make_synthetic(spec, seed=args.seed + i)
        sid = f"case{i:04d}"
        save_sample(v, out / "volumes" / f"{sid}_image", out / "volumes" / f"{sid}_label")
        samples.append({"id": sid, "image": f"volumes/{sid}_image", "label": f"volumes/{sid}_label",
                        "split": split})
    digest = write_manifest(out / "manifest.json", samples)
    write_snapshot(out, synth={**asdict(spec), "n": args.n, "seed": args.seed, "split": list(fractions)})
    print(f"wrote {len(samples)} volumes ({n_train} train / {n_val} val / {n_test} test), manifest sha256 {digest}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    samples = []
    for s in read_manifest(args.manifest):
        v = load_sample(s["image"], s.get("label"), source=s["id"])
        v = normalize_hu(v) if v.units == "hu" else v
        label = f"volumes/{s['id']}_label" if v.label is not None else None
        save_sample(v, out / "volumes" / f"{s['id']}_image", out / label if label else None)
        samples.append({"id": s["id"], "image": f"volumes/{s['id']}_image", "label": label, "split": s.get("split")})
    digest = write_manifest(out / "manifest.json", samples)
    print(f"normalized {len(samples)} volumes, manifest sha256 {digest}")
    return EXIT_OK


def _train_one(model_cfg, tcfg, loss_cfg, train_s, val_s, out: Path, resume=None) -> dict:
    write_snapshot(out, model=model_cfg, train=tcfg, loss=loss_cfg)
    model = TSUBFNet(model_cfg)
    t0 = time.perf_counter()
    summary = train(model, train_s, val_s, out, tcfg, loss_cfg, resume=resume)
    report.plot_losses(out / "losses.csv", out / "losses.png")
    if val_s:
        report.plot_validation(out / "val.csv", out / "val.png")
    log.info("trained %d steps in %.1f s", tcfg.steps, time.perf_counter() - t0)
    return summary


def cmd_train(args) -> int:
    model_cfg, tcfg, loss_cfg = resolve_run_config(args)
    train_s = load_split(args.manifest, "train")
    val_s = load_split(args.manifest, "val")
    summary = _train_one(model_cfg, tcfg, loss_cfg, train_s, val_s, Path(args.out), args.resume)
    best = summary["best"]
    print(f"best step {best['step']}: val dsc {best.get('dsc', float('nan')):.4f} "
          f"hd95 {best.get('hd95', float('nan')):.3f} smoothness {best.get('smoothness', float('nan')):.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    v = read_volume(args.input)
    v = normalize_hu(v) if v.units == "hu" else v
    probs = sliding_window_infer(model, v.image, overlap=args.overlap)
    pred = probs.argmax(axis=-1).astype(np.int16)
    write_native(args.out, pred, "i16", v.spacing, "label")
    if args.probs:
        np.save(Path(args.out).with_suffix(".probs.npy"), probs)
    counts = np.bincount(pred.ravel(), minlength=model.cfg.num_classes)
    print("class voxel counts: " + ", ".join(f"{c}={n}" for c, n in enumerate(counts)))
    return EXIT_OK


def _oracle_disagreements(y: LabelVolume, p: LabelVolume, num_classes: int) -> list[str]:
    bad = []
    for c in range(1, num_classes):
        fast, slow = hd95_details(y, p, c), hd95_details(y, p, c, oracle=True)
        for name, a, b in (("hd95", fast.value, slow.value), ("iou", iou(y, p, c), iou(y, p, c, oracle=True)),
                           ("dsc", dsc(y, p, c), dsc(y, p, c, oracle=True))):
            if not (a == b or (a != a and b != b)):
                bad.append(f"class {c} {name}: fast {a!r} oracle {b!r}")
    return bad


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ncls = model.cfg.num_classes
    entries = [s for s in read_manifest(args.manifest) if not args.split or s.get("split") == args.split]
    items, disagreements = [], []
    for s in entries:
        try:
            if not s.get("label"):
                raise FileNotFoundError("no label listed in manifest")
            v = load_sample(s["image"], s["label"], source=s["id"])
        except (OSError, VolumeFormatError) as exc:
            items.append((s["id"], exc, None, None))
            continue
        if int(v.label.max(initial=0)) >= ncls:
            raise CliError(f"{s['id']}: label value {int(v.label.max())} but checkpoint has {ncls} classes")
        v = normalize_hu(v) if v.units == "hu" else v
        probs = sliding_window_infer(model, v.image)
        y = LabelVolume(v.label, v.spacing)
        p = LabelVolume(probs.argmax(axis=-1), v.spacing)
        if args.oracle and v.image.size <= ORACLE_MAX_VOXELS:
            disagreements += [f"{s['id']} {d}" for d in _oracle_disagreements(y, p, ncls)]
        items.append((s["id"], y, p, probs))
    rep = evaluate_many(items, ncls, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(rep.to_csv())
    (out / "summary.json").write_text(rep.summary_json() + "\n")
    if rep.aggregate_rows:
        report.plot_eval(rep, out / "eval.png")
    for r in rep.aggregate_rows:
        print(f"class {r.class_id}: hd95 {r.hd95:.3f} iou {r.iou:.4f} dsc {r.dsc:.4f} smoothness {r.smoothness:.4f}")
    for r in rep.rows:
        if r.error:
            print(f"error {r.volume_id}: {r.error}", file=sys.stderr)
    if args.oracle:
        print(f"oracle disagreements: {len(disagreements)}")
        for d in disagreements:
            print("  " + d, file=sys.stderr)
    return EXIT_FAIL if rep.failed or disagreements else EXIT_OK


def cmd_gradcheck(args) -> int:
    blocks = gc.BLOCKS if args.block == "all" else (args.block,)
    results = gc.run(blocks, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40s} max rel err {r.max_rel_error:.3e} "
              f"(tol {r.tolerance:.0e}, {r.checked} entries, {r.seconds:.1f} s)")
    if args.out:
        report.write_csv(args.out, report.GRADCHECK_COLUMNS,
                         [(r.name, r.max_rel_error, r.tolerance, r.checked, int(r.passed)) for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_ablate(args) -> int:
    out = Path(args.out)
    train_s = load_split(args.manifest, "train")
    val_s = load_split(args.manifest, "val")
    rows = []
    for lam in args.lambdas:
        args.lam = lam
        model_cfg, tcfg, loss_cfg = resolve_run_config(args)
        summary = _train_one(model_cfg, tcfg, loss_cfg, train_s, val_s, out / f"lambda_{lam:g}")
        best = summary["best"]
        rows.append({"lambda": lam, "dsc": best["dsc"], "hd95": best["hd95"], "smoothness": best["smoothness"],
                     "best_step": best["step"], "final_loss": summary["final_loss"]})
    report.write_csv(out / "ablation.csv", report.ABLATION_COLUMNS,
                     [[r[c] for c in report.ABLATION_COLUMNS] for r in rows])
    report.plot_ablation(rows, out / "ablation.png")
    print(f"{'lambda':>8} {'dsc':>8} {'hd95':>8} {'smoothness':>11}")
    for r in rows:
        print(f"{r['lambda']:>8g} {r['dsc']:>8.4f} {r['hd95']:>8.3f} {r['smoothness']:>11.4f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = ModelConfig(channels=tuple(args.channels), patch_size=tuple(args.shape), num_classes=args.classes)
    n = TSUBFNet(cfg).flops(tuple(args.shape) + (cfg.input_channels,))
    print(f"{n} MACs ({n / 1e9:.3f} G)")
    return EXIT_OK


# --------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with optional model/train/loss sections")
    p.add_argument("--channels", type=int, nargs=4)
    p.add_argument("--patch", type=int, nargs=3)
    p.add_argument("--classes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("poly", "constant"))
    p.add_argument("--val-every", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsubf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ellipsoid dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--split", type=float, nargs=3, default=(0.7, 0.1, 0.2), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=20.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize HU volumes into a new dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on the train split, validating on val")
    _add_train_flags(p)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window segmentation of one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="native volume stem or .nii file")
    p.add_argument("--out", required=True, help="native label volume stem")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--probs", action="store_true", help="also save class probabilities as .npy")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--oracle", action="store_true", help="cross-check metrics against brute force (<=32^3)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--block", choices=gc.BLOCKS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV of results")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train once per Sobel weight and tabulate")
    _add_train_flags(p)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 0.5, 1.0])
    p.set_defaults(func=cmd_ablate, lam=None)

    p = sub.add_parser("flops", help="analytic multiply-accumulate count")
    p.add_argument("--channels", type=int, nargs=4, default=(32, 64, 128, 256))
    p.add_argument("--shape", type=int, nargs=3, default=(192, 192, 64))
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_flops)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tsubf: error: {exc}", file=sys.stderr)
        return exc.code
    except (UsageError, ConfigError, ShapeError, VolumeFormatError, CheckpointError, NiftiError,
            ValueError, FileNotFoundError) as exc:
        print(f"tsubf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"tsubf: training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
