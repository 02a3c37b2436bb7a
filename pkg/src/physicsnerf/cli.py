"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, DatasetConfig, RunConfig, default_config_dict, load_config
from .data import DatasetError, SceneDataset, ToySceneSpec, generate_toy_scene, load_depth_priors, load_nerf_synthetic
from .field import CheckpointError, RadianceField, load_field
from .fileio import write_pfm, write_png
from .render import Camera, render_image
from .train import TrainConfig, ablation_suite, evaluate, gap_report, train

logger = logging.getLogger("physicsnerf")


class UsageError(Exception):
    pass


def _load_dataset(data: str, dcfg: DatasetConfig) -> SceneDataset:
    dataset = load_nerf_synthetic(data, n_train=dcfg.n_train, train_indices=dcfg.train_indices,
                                  background=tuple(dcfg.background), bounds=dcfg.bounds)
    if dcfg.depth_priors:
        prior_dir = Path(data) / dcfg.depth_priors
        if prior_dir.is_dir():
            load_depth_priors(prior_dir, dataset)
        else:
            logger.warning("depth prior directory %s not found; depth ranking has no pairs", prior_dir)
    return dataset


def _read_sidecar(ckpt: str) -> dict:
    path = Path(ckpt + ".json")
    if not path.exists():
        raise CheckpointError(f"missing checkpoint sidecar {path}")
    return json.loads(path.read_text())


def _model_from_checkpoint(ckpt: str) -> tuple[RadianceField, TrainConfig, dict]:
    sidecar = _read_sidecar(ckpt)
    cfg = TrainConfig.from_dict(sidecar["config"])
    model = RadianceField(cfg.field, cfg.encoding, seed=cfg.seed, dtype=cfg.dtype)
    load_field(ckpt, model)
    return model, cfg, sidecar


def cmd_train(args) -> int:
    run = load_config(args.config) if args.config else RunConfig(TrainConfig(), DatasetConfig())
    cfg = run.train
    if args.iterations is not None:
        cfg.iterations = args.iterations
    dataset = _load_dataset(args.data, run.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2))
    trainer = train(dataset, cfg, out, resume=args.resume, progress=args.verbose)
    report = {"step": trainer.state.step, **gap_report(trainer.model, dataset, cfg.n_samples)}
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({k: report[k] for k in ("step", "train", "test", "gap")}))
    return 0


def cmd_gen_toy(args) -> int:
    spec_doc = {}
    if args.spec:
        text = Path(args.spec).read_text()
        try:
            spec_doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    try:
        spec = ToySceneSpec.from_dict(spec_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid toy-scene spec: {exc}") from exc
    scene = generate_toy_scene(spec)
    scene.write(args.out)
    print(json.dumps({"out": str(args.out), "train": len(scene.dataset.train), "test": len(scene.dataset.test)}))
    return 0


def _parse_pose(text: str, frames) -> np.ndarray:
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    if len(parts) == 1:
        try:
            index = int(parts[0])
        except ValueError as exc:
            raise UsageError(f"--pose must be an integer index or 16 comma-separated numbers") from exc
        if not 0 <= index < len(frames):
            raise UsageError(f"--pose index {index} out of range (0..{len(frames) - 1})")
        return frames[index].camera.transform
    if len(parts) != 16:
        raise UsageError("--pose matrix needs 16 comma-separated numbers (row-major 4x4)")
    return np.array([float(p) for p in parts]).reshape(4, 4)


def cmd_render(args) -> int:
    model, cfg, sidecar = _model_from_checkpoint(args.ckpt)
    data = args.data or sidecar.get("dataset")
    if not data or not Path(data).is_dir():
        raise UsageError("render needs --data (dataset directory providing cameras)")
    dataset = load_nerf_synthetic(data)
    frames = dataset.split(args.split)
    pose = _parse_pose(args.pose, frames)
    ref = (frames or dataset.train)[0].camera
    camera = Camera(pose, ref.focal, ref.width, ref.height, ref.near, ref.far)
    image, depth, _ = render_image(model, camera, args.samples or cfg.n_samples, dataset.background,
                                   seed=args.seed)
    write_png(args.out, image)
    if args.depth_out:
        write_pfm(args.depth_out, depth)
    print(json.dumps({"out": str(args.out)}))
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.ckpt)
    dataset = load_nerf_synthetic(args.data)
    splits = ["train", "test"] if args.split == "both" else [args.split]
    report = {}
    for split in splits:
        if not dataset.split(split):
            raise DatasetError(f"split {split!r} has no frames in {args.data}")
        res = evaluate(model, dataset, split, args.samples or cfg.n_samples)
        report[split] = res["mean"]
        report[f"{split}_views"] = res["psnr"]
    if args.split == "both":
        report["gap"] = report["train"] - report["test"]
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_ablate(args) -> int:
    run = load_config(args.config)
    if args.iterations is not None:
        run.train.iterations = args.iterations
    dataset = _load_dataset(args.data, run.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    run_id = 0
    if table.exists():
        with table.open(newline="") as fh:
            ids = [int(r["run_id"]) for r in csv.DictReader(fh)]
        run_id = max(ids, default=-1) + 1
    rows = ablation_suite(dataset, run.train, out / f"run_{run_id:03d}", progress=args.verbose)
    fields = ["run_id", "configuration", "train", "test", "gap",
              "lambda_depth", "lambda_cv", "lambda_sparse", "lambda_reg", "iterations", "seconds"]
    new = not table.exists()
    with table.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({"run_id": run_id, **row})
    (out / f"ablation_{run_id:03d}.json").write_text(json.dumps(rows, indent=2))
    print(json.dumps({"run_id": run_id, "rows": rows}, indent=2))
    return 0


def cmd_config(args) -> int:
    print(json.dumps(default_config_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="physicsnerf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a field on a dataset directory")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--data", required=True, help="NeRF-synthetic layout directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-toy", help="write a procedural toy dataset")
    p.add_argument("--spec", help="toy-scene spec JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", required=True, help="frame index or 16 comma-separated row-major numbers "
                   "(write --pose=... when the first number is negative)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--data", help="dataset directory (defaults to the one recorded in the checkpoint)")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--depth-out", help="optional PFM depth output")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test", "both"], default="both")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--out", help="write the report JSON here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="cumulative constraint ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("config", help="print the default run configuration")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"physicsnerf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"physicsnerf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
