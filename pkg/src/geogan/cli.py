"""Command-line pipeline: every experiment stage as one subcommand.

Stages communicate only through the run directory. ``toy-data`` writes the
dataset tree; ``wss-train`` the weak grid maps, sidecar, and segmenter;
``wss-relabel`` refined per-image maps; ``shape-pretrain`` the frozen
arrangement prior; ``geogan-train`` the synthesis checkpoints; ``generate``
the augmented dataset with provenance and transform audit; the seg-/cls-
pairs downstream models and metric reports; ``ablate`` replays synthesis,
generation, and evaluation with one loss term disabled.

Each stage writes ``manifest.json`` (config digest, seeds, git describe,
wall time, artifact list) so any artifact can be traced to its inputs. A
missing input directory exits nonzero naming the subcommand that produces
it. The run directory defaults to $GEOGAN_OUT, then ./runs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .augment import build_augmented_dataset
from .data import Dataset, load_dataset, load_mask_png, make_toy_dataset_tree, save_mask_png
from .downstream import classify, segment, train_classifier, train_segmenter
from .gan import load_gan, save_gan, train as train_gan
from .metrics import MetricsReport, classification_report, segmentation_report
from .nets import NestedUNet, SmallClassifier
from .shape_prior import load_shape_prior, pretrain_shape_prior, save_shape_prior, score_pairs
from .stn import AffineTransform
from .wss import run_wss, save_wss_outputs, segment_with

OUT_ENV = "GEOGAN_OUT"

ABLATION_FLAGS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_class": {"use_class_loss": False},
    "no_shape": {"use_shape_loss": False},
    "no_sampling": {"use_sampling": False},
}


class PipelineError(RuntimeError):
    """A required input artifact is absent; message names the producing stage."""


@dataclass
class StageResult:
    stage: str                       # manifest directory, relative to the run root
    artifacts: list[str]             # run-root-relative artifact paths
    seeds: dict[str, int]            # derived stage seeds actually used
    extra: dict = field(default_factory=dict)


# ----------------------------------------------------------------- plumbing
def _git_describe() -> str:
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
        if proc.returncode == 0:
            return proc.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(
            f"missing {what} at {path}; run the {producer} subcommand first"
        )
    return path


def _load_run_dataset(out: Path, splits: tuple[str, ...]) -> Dataset:
    root = out / "data"
    _require(root / "scheme.json", "dataset", "toy-data")
    return load_dataset(root, splits=splits)


def _write_trace(path: Path, trace: list[float],
                 steps_per_epoch: int | None = None) -> None:
    """Loss trace CSV; with steps_per_epoch an epoch column is included."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if steps_per_epoch:
            writer.writerow(["epoch", "step", "loss"])
            for i, v in enumerate(trace):
                writer.writerow([i // steps_per_epoch, i, f"{v:.6f}"])
        else:
            writer.writerow(["step", "loss"])
            for i, v in enumerate(trace):
                writer.writerow([i, f"{v:.6f}"])


def _write_report(report: MetricsReport, out_dir: Path) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.csv").write_text(
        report.csv_header() + "\n" + report.to_csv_row() + "\n"
    )
    return ["metrics.json", "metrics.csv"]


def _save_torch_model(net, path: Path, scheme, width: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": net.state_dict(),
            "n_labels": scheme.n,
            "width": width,
            "scheme_digest": scheme.digest(),
        },
        path,
    )


def _load_torch_model(path: Path, scheme, build) -> torch.nn.Module:
    blob = torch.load(path, weights_only=True)
    if blob["scheme_digest"] != scheme.digest():
        raise ValueError(
            f"{path.name} was trained under scheme {blob['scheme_digest']}, "
            f"current scheme is {scheme.digest()}"
        )
    net = build(blob["n_labels"], blob["width"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net


# -------------------------------------------------------------- subcommands
def _cmd_toy_data(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    d = cfg.stage_config("data")
    counts = {"train": d.train, "val": d.val, "test": d.test}
    make_toy_dataset_tree(
        out / "data", counts, (d.height, d.width), d.infected_fraction,
        seed=d.seed,
    )
    artifacts = ["data/scheme.json", "data/labels.csv"]
    artifacts += [f"data/{s}" for s, n in counts.items() if n > 0]
    return StageResult("data", artifacts, {"data": d.seed}, {"counts": counts})


def _cmd_wss_train(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=("train",))
    train = ds.splits["train"]
    if not train:
        raise PipelineError(
            "dataset has an empty train split; run the toy-data subcommand first"
        )
    wcfg = cfg.stage_config("wss")
    result = run_wss(train, ds.scheme, wcfg)
    save_wss_outputs(result, ds.scheme, out / "wss", wcfg)
    _save_torch_model(
        result.segmenter, out / "wss" / "segmenter.pt", ds.scheme,
        wcfg.seg_width,
    )
    artifacts = ["wss/maps", "wss/wss_run.json", "wss/segmenter.pt"]
    extra = {
        "discarded_count": sum(result.discarded_counts.values()),
        "label_attempts": {str(k): v for k, v in result.label_attempts.items()},
    }
    return StageResult("wss", artifacts, {"wss": wcfg.seed}, extra)


def _cmd_wss_relabel(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=(args.split,))
    ckpt_path = _require(
        out / "wss" / "segmenter.pt", "weak-label segmenter", "wss-train"
    )
    net = _load_torch_model(
        ckpt_path, ds.scheme, lambda n, w: NestedUNet(1, n, w)
    )
    map_dir = out / "wss" / "relabel"
    map_dir.mkdir(parents=True, exist_ok=True)
    for sample in ds.splits[args.split]:
        pmap = segment_with(net, sample.image)
        save_mask_png(pmap, map_dir / f"{sample.id}.png", ds.scheme.n)
    extra = {"split": args.split, "n_maps": len(ds.splits[args.split])}
    return StageResult("wss/relabel", ["wss/relabel"], {}, extra)


def _cmd_shape_pretrain(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=("train",))
    scfg = cfg.stage_config("shape")
    model, trace = pretrain_shape_prior(
        [s.mask for s in ds.splits["train"]], ds.scheme, scfg
    )
    save_shape_prior(model, ds.scheme, out / "shape" / "prior.pt")
    _write_trace(out / "shape" / "trace.csv", trace)
    extra = {"final_loss": trace[-1] if trace else None}
    return StageResult(
        "shape", ["shape/prior.pt", "shape/trace.csv"], {"shape": scfg.seed},
        extra,
    )


def _cmd_shape_score(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=())
    prior = load_shape_prior(
        _require(out / "shape" / "prior.pt", "arrangement prior",
                 "shape-pretrain"),
        ds.scheme,
    )
    mask_dir = Path(args.masks) if args.masks else out / "data" / "test" / "masks"
    _require(mask_dir, "mask directory", "toy-data")
    rows: list[tuple[str, int, int, float]] = []
    for path in sorted(mask_dir.glob("*.png")):
        mask = load_mask_png(path)
        rows.extend((path.stem, i, j, p) for i, j, p in
                    score_pairs(prior, mask, ds.scheme))
    lines = ["id,label_i,label_j,probability"]
    lines += [f"{sid},{i},{j},{p:.6f}" for sid, i, j, p in rows]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    score_dir = out / "shape_score"
    score_dir.mkdir(parents=True, exist_ok=True)
    (score_dir / "scores.csv").write_text(text)
    n_masks = len({sid for sid, *_ in rows})
    mean_p = float(np.mean([p for *_, p in rows])) if rows else None
    extra = {"n_masks": n_masks, "mean_pair_probability": mean_p,
             "masks_dir": str(mask_dir)}
    return StageResult("shape_score", ["shape_score/scores.csv"], {}, extra)


def _cmd_geogan_train(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=("train",))
    prior = load_shape_prior(
        _require(out / "shape" / "prior.pt", "arrangement prior",
                 "shape-pretrain"),
        ds.scheme,
    )
    gcfg = cfg.stage_config("gan")
    masks = None
    if args.masks == "wss":
        map_dir = _require(
            out / "wss" / "relabel", "weak label maps", "wss-relabel"
        )
        masks = {p.stem: load_mask_png(p) for p in sorted(map_dir.glob("*.png"))}
    t0 = time.perf_counter()
    generator, stn, disc, state = train_gan(
        ds.splits["train"], prior, ds.scheme, gcfg, masks=masks
    )
    save_gan(generator, stn, disc, ds.scheme, gcfg, out / "gan", state,
             duration_s=time.perf_counter() - t0)
    artifacts = [f"gan/{name}" for name in
                 ("generator.pt", "stn.pt", "discriminator.pt", "trace.csv")]
    extra = {
        "gan_config_digest": gcfg.digest(),
        "steps_run": state.step,
        "mask_source": args.masks,
    }
    return StageResult("gan", artifacts, {"gan": gcfg.seed}, extra)


def _write_transform_audit(gen_root: Path) -> None:
    """Decomposed affine parameters alongside the raw matrices, per sample."""
    with open(gen_root / "provenance.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    keys = ("scale_x", "scale_y", "rotation", "shear", "t_x", "t_y")
    with open(gen_root / "transforms.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *keys, "a00", "a01", "a02", "a10", "a11", "a12"])
        for row in rows:
            if row["origin"] != "synthetic":
                continue
            matrix = np.array([
                [float(row["a00"]), float(row["a01"]), float(row["a02"])],
                [float(row["a10"]), float(row["a11"]), float(row["a12"])],
            ])
            decomposed = AffineTransform(matrix).decompose()
            writer.writerow(
                [row["id"]]
                + [f"{decomposed[k]:.6f}" for k in keys]
                + [f"{v:.6f}" for v in matrix.ravel()]
            )


def _cmd_generate(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=("train",))
    _require(out / "gan" / "generator.pt", "synthesis checkpoints",
             "geogan-train")
    generator, stn, _disc, gcfg = load_gan(out / "gan", ds.scheme)
    plan = cfg.stage_config("augment")
    dataset = build_augmented_dataset(
        generator, stn, ds.scheme, ds.splits["train"], plan,
        out / "generate", use_sampling=gcfg.use_sampling,
    )
    _write_transform_audit(out / "generate")
    artifacts = ["generate/train", "generate/provenance.csv",
                 "generate/transforms.csv", "generate/scheme.json",
                 "generate/labels.csv"]
    extra = {
        "n_samples": len(dataset.splits["train"]),
        "policy": plan.policy,
        "use_sampling": gcfg.use_sampling,
    }
    return StageResult("generate", artifacts, {"augment": plan.seed}, extra)


def _resolve_train_root(args, out: Path) -> Path:
    root = Path(args.train_root) if args.train_root else out / "data"
    producer = "generate" if root == out / "generate" else "toy-data"
    _require(root / "scheme.json", "training dataset", producer)
    return root


def _cmd_seg_train(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    root = _resolve_train_root(args, out)
    ds = load_dataset(root, splits=("train",))
    dcfg = cfg.stage_config("seg")
    net, trace = train_segmenter(ds.splits["train"], ds.scheme, dcfg)
    _save_torch_model(net, out / "seg" / "model.pt", ds.scheme, dcfg.width)
    per_epoch = -(-len(ds.splits["train"]) // dcfg.batch)
    _write_trace(out / "seg" / "trace.csv", trace, steps_per_epoch=per_epoch)
    extra = {"n_train": len(ds.splits["train"]), "train_root": str(root)}
    return StageResult(
        "seg", ["seg/model.pt", "seg/trace.csv"], {"seg": dcfg.seed}, extra
    )


def _cmd_seg_eval(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=(args.split,))
    net = _load_torch_model(
        _require(out / "seg" / "model.pt", "segmentation model", "seg-train"),
        ds.scheme, lambda n, w: NestedUNet(1, n, w),
    )
    samples = ds.splits[args.split]
    preds = [segment(net, s.image) for s in samples]
    report = segmentation_report(
        preds, [s.mask for s in samples], ds.scheme.n,
        label_names=list(ds.scheme.names[1:]),
    )
    names = _write_report(report, out / "seg" / "eval")
    extra = {"split": args.split, "dice_mean": report.dice_mean}
    return StageResult("seg/eval", [f"seg/eval/{n}" for n in names], {}, extra)


def _cmd_cls_train(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    root = _resolve_train_root(args, out)
    ds = load_dataset(root, splits=("train",))
    dcfg = cfg.stage_config("cls")
    net, trace = train_classifier(ds.splits["train"], dcfg)
    _save_torch_model(net, out / "cls" / "model.pt", ds.scheme, dcfg.width)
    per_epoch = -(-len(ds.splits["train"]) // dcfg.batch)
    _write_trace(out / "cls" / "trace.csv", trace, steps_per_epoch=per_epoch)
    extra = {"n_train": len(ds.splits["train"]), "train_root": str(root)}
    return StageResult(
        "cls", ["cls/model.pt", "cls/trace.csv"], {"cls": dcfg.seed}, extra
    )


def _cmd_cls_eval(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    ds = _load_run_dataset(out, splits=(args.split,))
    net = _load_torch_model(
        _require(out / "cls" / "model.pt", "classification model", "cls-train"),
        ds.scheme, lambda n, w: SmallClassifier(w),
    )
    samples = ds.splits[args.split]
    scores = np.array([classify(net, s.image) for s in samples])
    labels = np.array([s.class_label for s in samples])
    report = classification_report([scores], [labels])
    names = _write_report(report, out / "cls" / "eval")
    extra = {"split": args.split, "auc_mean": report.auc_mean}
    return StageResult("cls/eval", [f"cls/eval/{n}" for n in names], {}, extra)


def _cmd_ablate(args, cfg: config_mod.RunConfig, out: Path) -> StageResult:
    """One synthesis variant end-to-end: train, generate, segment, evaluate."""
    ds = _load_run_dataset(out, splits=("train", "test"))
    prior = load_shape_prior(
        _require(out / "shape" / "prior.pt", "arrangement prior",
                 "shape-pretrain"),
        ds.scheme,
    )
    gcfg = dataclasses.replace(
        cfg.stage_config("gan"), **ABLATION_FLAGS[args.variant]
    )
    vdir = out / "ablate" / args.variant
    t0 = time.perf_counter()
    generator, stn, disc, state = train_gan(
        ds.splits["train"], prior, ds.scheme, gcfg
    )
    save_gan(generator, stn, disc, ds.scheme, gcfg, vdir / "gan", state,
             duration_s=time.perf_counter() - t0)

    plan = cfg.stage_config("augment")
    augmented = build_augmented_dataset(
        generator, stn, ds.scheme, ds.splits["train"], plan, vdir / "dataset",
        use_sampling=gcfg.use_sampling,
    )
    _write_transform_audit(vdir / "dataset")

    dcfg = cfg.stage_config("seg")
    net, trace = train_segmenter(augmented.splits["train"], ds.scheme, dcfg)
    _save_torch_model(net, vdir / "model.pt", ds.scheme, dcfg.width)
    per_epoch = -(-len(augmented.splits["train"]) // dcfg.batch)
    _write_trace(vdir / "trace.csv", trace, steps_per_epoch=per_epoch)

    test = ds.splits["test"]
    preds = [segment(net, s.image) for s in test]
    report = segmentation_report(
        preds, [s.mask for s in test], ds.scheme.n,
        label_names=list(ds.scheme.names[1:]),
    )
    _write_report(report, vdir)

    stage = f"ablate/{args.variant}"
    artifacts = [f"{stage}/{name}" for name in
                 ("gan", "dataset", "model.pt", "trace.csv", "metrics.json",
                  "metrics.csv")]
    seeds = {"gan": gcfg.seed, "augment": plan.seed, "seg": dcfg.seed}
    extra = {
        "variant": args.variant,
        "gan_config_digest": gcfg.digest(),
        "dice_mean": report.dice_mean,
    }
    return StageResult(stage, artifacts, seeds, extra)


_HANDLERS = {
    "toy-data": _cmd_toy_data,
    "wss-train": _cmd_wss_train,
    "wss-relabel": _cmd_wss_relabel,
    "shape-pretrain": _cmd_shape_pretrain,
    "shape-score": _cmd_shape_score,
    "geogan-train": _cmd_geogan_train,
    "generate": _cmd_generate,
    "seg-train": _cmd_seg_train,
    "seg-eval": _cmd_seg_eval,
    "cls-train": _cmd_cls_train,
    "cls-eval": _cmd_cls_eval,
    "ablate": _cmd_ablate,
}


# --------------------------------------------------------------- entrypoint
def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geogan",
        description="Geometry-aware synthesis pipeline on the toy benchmark.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="key=value config file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    common.add_argument("--out", type=Path, default=None,
                        help=f"run directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", dest="overrides",
                        help="config override, repeatable")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("toy-data", parents=[common],
                   help="write the procedural benchmark dataset")
    sub.add_parser("wss-train", parents=[common],
                   help="weak grid label maps and segmenter from image labels")
    p = sub.add_parser("wss-relabel", parents=[common],
                       help="refined per-image label maps from the weak segmenter")
    p.add_argument("--split", default="train", help="split to relabel")
    sub.add_parser("shape-pretrain", parents=[common],
                   help="pretrain and freeze the arrangement prior")
    p = sub.add_parser("shape-score", parents=[common],
                       help="per-pair arrangement probabilities for mask PNGs")
    p.add_argument("--masks", type=Path, default=None,
                   help="mask directory (default: the run's test masks)")
    p = sub.add_parser("geogan-train", parents=[common],
                       help="adversarial training of the synthesis models")
    p.add_argument("--masks", choices=("gt", "wss"), default="gt",
                   help="train on ground-truth or weak label maps")
    sub.add_parser("generate", parents=[common],
                   help="write the augmented dataset from the trained models")
    p = sub.add_parser("seg-train", parents=[common],
                       help="train the downstream segmenter")
    p.add_argument("--train-root", type=Path, default=None,
                   help="dataset root to train on (default: the run's data)")
    p = sub.add_parser("seg-eval", parents=[common],
                       help="segmentation metrics report")
    p.add_argument("--split", default="test", help="split to evaluate")
    p = sub.add_parser("cls-train", parents=[common],
                       help="train the downstream classifier")
    p.add_argument("--train-root", type=Path, default=None,
                   help="dataset root to train on (default: the run's data)")
    p = sub.add_parser("cls-eval", parents=[common],
                       help="classification metrics report")
    p.add_argument("--split", default="test", help="split to evaluate")
    p = sub.add_parser("ablate", parents=[common],
                       help="one synthesis variant end-to-end")
    p.add_argument("--variant", required=True, choices=sorted(ABLATION_FLAGS),
                   help="which loss term to disable")
    return parser


def _load_config(args) -> config_mod.RunConfig:
    entries: dict[str, str] = {}
    if args.config is not None:
        if not Path(args.config).exists():
            raise config_mod.ConfigError(f"config file not found: {args.config}")
        entries.update(config_mod.parse_config_text(Path(args.config).read_text()))
    for pair in args.overrides:
        key, value = config_mod.parse_assignment(pair)
        entries[key] = value
    cfg = config_mod.build_config(entries)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _write_manifest(out: Path, result: StageResult, command: str,
                    cfg: config_mod.RunConfig, t0: float) -> None:
    stage_dir = out / result.stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": command,
        "config_digest": config_mod.config_digest(cfg),
        "config": config_mod.flatten_config(cfg),
        "seed": cfg.seed,
        "stage_seeds": result.seeds,
        "git_describe": _git_describe(),
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "artifacts": result.artifacts,
        **result.extra,
    }
    (stage_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs"))
        t0 = time.perf_counter()
        result = _HANDLERS[args.command](args, cfg, out)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _write_manifest(out, result, args.command, cfg, t0)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
