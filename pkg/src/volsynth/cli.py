"""Command-line entry point: dataset generation, staged training, synthesis,
evaluation, and the augmentation experiment.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import dice, fid_3d, fid_per_view, make_extractor, save_montage, VIEW_AXES
from .pipeline import (
    STAGES,
    PipelineConfig,
    ensure_dataset,
    load_bundle,
    run_training,
    synthesize_dataset,
)
from .segmentation import (
    SegTrainConfig,
    TASKS,
    format_report_table,
    run_augmentation_experiment,
)
from .storage import Manifest


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_json(args.config)
    else:
        cfg = PipelineConfig.default_desk()
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=str(args.out))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed).derive_seeds()
    return cfg


def _echo_config(out: Path, command: str, payload: dict) -> None:
    echo_dir = Path(out) / "config-echo"
    echo_dir.mkdir(parents=True, exist_ok=True)
    (echo_dir / f"{command}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"
    )


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    cfg = replace(cfg, data=replace(cfg.data, n_items=args.n))
    _echo_config(cfg.out, "gen-data", {"command": "gen-data", "config": cfg.to_dict()})
    manifest = ensure_dataset(cfg)
    path = cfg.data_dir() / "manifest.json"
    print(f"wrote {len(manifest.entries)} phantoms; manifest at {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _echo_config(cfg.out, "train", {"command": "train", "stage": args.stage, "config": cfg.to_dict()})
    if args.stage != "all":
        for prereq in STAGES[: STAGES.index(args.stage)]:
            if not cfg.checkpoint_base(prereq).with_suffix(".npz").exists():
                print(
                    f"error: stage {args.stage!r} requires the {prereq!r} checkpoint; "
                    f"run `train --stage {prereq}` (or --stage all) first",
                    file=sys.stderr,
                )
                return 1
    result = run_training(cfg, resume=not args.no_resume, only=None if args.stage == "all" else args.stage)
    print(f"trained stages: {result['trained'] or 'none (all checkpoints present)'}")
    for stage, path in result["checkpoints"].items():
        print(f"  {stage}: {path}.npz")
    return 0


def cmd_synthesize(args) -> int:
    cfg = _load_config(args)
    run_config = cfg.out / "config.json"
    if not getattr(args, "config", None) and run_config.exists():
        cfg = replace(PipelineConfig.from_json(run_config), out_dir=str(cfg.out))
    _echo_config(cfg.out, "synthesize", {
        "command": "synthesize", "n": args.n, "seed": args.seed, "config": cfg.to_dict(),
    })
    bundle = load_bundle(cfg)
    out_dir = cfg.out / "synth"
    manifest = synthesize_dataset(bundle, args.n, args.seed, out_dir)
    print(f"wrote {len(manifest.entries)} synthetic pairs; manifest at {out_dir / 'manifest.json'}")
    if args.montage:
        volumes = [manifest.load_volume(e) for e in manifest.entries]
        labels = [manifest.load_label(e).astype(np.float32) / 4.0 for e in manifest.entries]
        save_montage(volumes, out_dir / "montage_volumes.png")
        save_montage(labels, out_dir / "montage_labels.png")
        print(f"montages at {out_dir / 'montage_volumes.png'} and {out_dir / 'montage_labels.png'}")
    return 0


def _load_volumes(manifest_path: str) -> list[np.ndarray]:
    manifest = Manifest.load(Path(manifest_path))
    return [manifest.load_volume(e) for e in manifest.entries]


def cmd_eval(args) -> int:
    out = Path(args.out)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "eval", {"command": "eval", "args": vars(args)})

    if args.fid:
        a, b = (_load_volumes(p) for p in args.fid)
        extractor = make_extractor("3d", dim=args.feature_dim, seed=args.extractor_seed)
        metrics = {"fid": fid_3d(a, b, extractor)}
        print(f"FID: {metrics['fid']:.6f}")
    elif args.per_view:
        a, b = (_load_volumes(p) for p in args.per_view)
        extractor = make_extractor("2d", dim=args.feature_dim, seed=args.extractor_seed)
        metrics = {view: fid_per_view(a, b, view, extractor) for view in VIEW_AXES}
        metrics["average"] = float(np.mean([metrics[v] for v in VIEW_AXES]))
        print(f"{'Ax. FID':>12} {'Sag. FID':>12} {'Cor. FID':>12} {'Avg. FID':>12}")
        print(
            f"{metrics['axial']:>12.4f} {metrics['sagittal']:>12.4f} "
            f"{metrics['coronal']:>12.4f} {metrics['average']:>12.4f}"
        )
    else:
        ma = Manifest.load(Path(args.dice[0]))
        mb = Manifest.load(Path(args.dice[1]))
        n = min(len(ma.entries), len(mb.entries))
        per_class: dict[str, list[float]] = {}
        from . import CLASS_NAMES

        for ea, eb in zip(ma.entries[:n], mb.entries[:n]):
            la, lb = ma.load_label(ea), mb.load_label(eb)
            for cls, name in enumerate(CLASS_NAMES):
                if cls == 0:
                    continue
                per_class.setdefault(name, []).append(dice(la, lb, class_id=cls))
        metrics = {name: float(np.mean(vals)) for name, vals in per_class.items()}
        metrics["mean"] = float(np.mean(list(metrics.values())))
        for name, value in metrics.items():
            print(f"{name:>14}: {value:.4f}")

    payload = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    (reports / "metrics.json").write_text(payload)
    print(f"metrics written to {reports / 'metrics.json'}")
    return 0


def cmd_experiment(args) -> int:
    out = Path(args.out)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "experiment", {"command": "experiment", "args": vars(args)})

    real = Manifest.load(Path(args.real))
    synth = Manifest.load(Path(args.synthetic))
    cfg = SegTrainConfig(
        lr=args.lr, max_steps=args.max_steps, batch_size=args.batch_size, seed=args.base_seed
    )
    report = run_augmentation_experiment(
        real, synth, tasks=args.tasks, architectures=args.arch, cfg=cfg,
        n_seeds=args.seeds, log_dir=reports / "cells",
    )
    (reports / "augmentation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_report_table(report)
    (reports / "augmentation.txt").write_text(table + "\n")
    print(table)
    print(f"report written to {reports / 'augmentation.json'}")
    ok_cells = sum(len(row["cells"]) for row in report["rows"])
    return 0 if ok_cells > 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volsynth",
        description="Label-guided 3D latent diffusion: phantoms, training, synthesis, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"volsynth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--n", type=int, required=True, help="number of phantoms")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output root (default: config's out_dir)")
    p.add_argument("--config", help="pipeline config JSON")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--stage", choices=list(STAGES) + ["all"], default="all")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-resume", action="store_true", help="retrain even if checkpoints exist")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synthesize", help="emit synthetic (label, volume) pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="run root (default: config's out_dir)")
    p.add_argument("--config", help="pipeline config JSON (defaults to the training echo)")
    p.add_argument("--montage", action="store_true", help="also write slice montage PNGs")
    p.set_defaults(fn=cmd_synthesize)

    p = sub.add_parser("eval", help="FID / per-view FID / Dice between two manifests")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--fid", nargs=2, metavar=("A", "B"))
    group.add_argument("--per-view", nargs=2, metavar=("A", "B"))
    group.add_argument("--dice", nargs=2, metavar=("A", "B"))
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="R vs R+S augmentation comparison")
    p.add_argument("--real", required=True, help="real (phantom) manifest")
    p.add_argument("--synthetic", required=True, help="synthetic manifest")
    p.add_argument("--tasks", nargs="+", choices=sorted(TASKS), default=["hcc_only"])
    p.add_argument("--arch", nargs="+", default=["unet"])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--out", default="runs/desk")
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
