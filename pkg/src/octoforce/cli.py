"""Command-line entry point.

Subcommands: generate | train | eval | infer | extract-surfaces.
Configuration lives in one JSON file; fields that are omitted fall back
to documented defaults, and the fully resolved config is echoed into
every output directory so a run can be reproduced from its artifacts.

Single volumes outside a dataset directory travel as .npy arrays indexed
[x, y, z]; spacing is inferred from the configured field of view.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .blocks import BlockSpec
from .datapipe import LabelScaler, SplitSpec, Volume, extract_surfaces, split_indices
from .dataset_io import read_dataset, write_dataset
from .errors import ConfigError, OctoforceError
from .evaluator import evaluate
from .models import (ArchSpec, DEFAULT_INIT_CHANNELS, DEFAULT_JOINT_BLOCKS,
                     DEFAULT_PATH_BLOCKS, MODEL_FAMILIES, PLANAR_SIAMESE,
                     VOLUMETRIC_SIAMESE, VOLUMETRIC_SINGLE, build_model)
from .phantom import AcquisitionPlan, PairDataset, PhantomSpec, run_protocol
from .trainer import (Checkpoint, TrainConfig, load_checkpoint, predict,
                      prepare_pair_arrays, save_checkpoint, train, write_log)

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "phantom": {},
    "plan": {},
    "split": {},
    "arch": {},
    "train": {},
}


def load_config(path: str | None) -> dict:
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_CONFIG.items()}
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: no such file {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON in {p}: {e}") from e
    for key, val in user.items():
        if key not in cfg:
            raise ConfigError(f"config.{key}: unknown section")
        if isinstance(cfg[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config.{key}: expected an object")
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def _section_seed(cfg: dict, section: str) -> int:
    return int(cfg[section].get("seed", cfg["seed"]))


def resolve_phantom(cfg: dict) -> PhantomSpec:
    d = dict(cfg["phantom"])
    d["seed"] = _section_seed(cfg, "phantom")
    try:
        return PhantomSpec.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"phantom: {e}") from e


def resolve_plan(cfg: dict) -> AcquisitionPlan:
    d = dict(cfg["plan"])
    d["seed"] = _section_seed(cfg, "plan")
    try:
        return AcquisitionPlan.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"plan: {e}") from e


def resolve_split(cfg: dict) -> SplitSpec:
    d = dict(cfg["split"])
    d["seed"] = _section_seed(cfg, "split")
    try:
        return SplitSpec.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"split: {e}") from e


def resolve_train(cfg: dict) -> TrainConfig:
    d = dict(cfg["train"])
    d["seed"] = _section_seed(cfg, "train")
    try:
        return TrainConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"train: {e}") from e


def resolve_arch(cfg: dict, family: str, grid: tuple[int, int, int]) -> ArchSpec:
    """Build the ArchSpec for ``family``, sized to the dataset grid."""
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"model: unknown family {family!r}; valid: {', '.join(MODEL_FAMILIES)}")
    a = dict(cfg["arch"])
    extent = a.get("input_extent")
    if extent is None:
        if grid == (128, 128, 512):
            extent = 64
        elif grid[0] == grid[1] == grid[2]:
            extent = grid[0]
        else:
            raise ConfigError(f"arch.input_extent: cannot infer from grid {grid}")
    path_blocks = tuple(BlockSpec.from_dict(b) for b in a["path_blocks"]) \
        if a.get("path_blocks") else DEFAULT_PATH_BLOCKS
    joint_blocks = tuple(BlockSpec.from_dict(b) for b in a["joint_blocks"]) \
        if a.get("joint_blocks") else DEFAULT_JOINT_BLOCKS
    kw = dict(
        input_extent=int(extent),
        init_channels=int(a.get("init_channels", DEFAULT_INIT_CHANNELS)),
        init_stride=int(a.get("init_stride", 1)),
        path_blocks=path_blocks, joint_blocks=joint_blocks,
        share_weights=bool(a.get("share_weights", True)),
    )
    if family == "siamcnn":
        return ArchSpec(mode=VOLUMETRIC_SIAMESE, **kw)
    if family in ("diffcnn-", "diffcnn+"):
        return ArchSpec(mode=VOLUMETRIC_SINGLE,
                        combine="subtract" if family == "diffcnn-" else "add", **kw)
    return ArchSpec(mode=PLANAR_SIAMESE, representation=family.split("-", 1)[1], **kw)


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
        f.write("\n")


def _limit_threads(n: int | None) -> int | None:
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        print(f"warning: threadpoolctl unavailable, --threads {n} ignored", file=sys.stderr)
    return n


def _load_volume_npy(path: str, cfg: dict) -> Volume:
    arr = np.load(path)
    if arr.ndim != 3:
        raise ConfigError(f"{path}: expected a 3-axis volume, got shape {arr.shape}")
    phantom = resolve_phantom(cfg)
    spacing = (phantom.lateral_fov_mm / arr.shape[0], phantom.lateral_fov_mm / arr.shape[1],
               phantom.axial_fov_mm / arr.shape[2])
    return Volume(arr.astype(np.float32), spacing)


def _dataset_pair(ds_dir: str, index: int):
    ds = read_dataset(ds_dir)
    if not 0 <= index < len(ds.pairs):
        raise ConfigError(f"--index {index} out of range for dataset of {len(ds.pairs)} pairs")
    return ds.pairs[index]


# -- subcommands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    phantom = resolve_phantom(cfg)
    plan = resolve_plan(cfg)
    out = Path(args.out)
    ds = run_protocol(phantom, plan)
    write_dataset(ds, out)
    echo_config(cfg, out)
    print(f"wrote {len(ds.pairs)} pairs ({plan.roi_relocations} ROIs) to {out}")
    return 0


def _split_dataset(ds: PairDataset, cfg: dict) -> dict[str, list[int]]:
    spec = resolve_split(cfg)
    return split_indices(len(ds.pairs), spec, groups=ds.rois())


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.model not in MODEL_FAMILIES:
        raise ConfigError(
            f"model: unknown family {args.model!r}; valid: {', '.join(MODEL_FAMILIES)}")
    _limit_threads(args.threads)
    ds = read_dataset(args.dataset)
    splits = _split_dataset(ds, cfg)
    if not splits["train"]:
        raise ConfigError("split: empty training split")
    if not splits["val"]:
        raise ConfigError("split: empty validation split (training needs one)")

    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.arch.family != args.model:
        raise ConfigError(
            f"--resume checkpoint is a {resume.arch.family}, not a {args.model}")
    arch = resume.arch if resume else resolve_arch(cfg, args.model, ds.phantom.grid)
    tc = resume.train_config if resume else resolve_train(cfg)
    if args.max_steps is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "max_steps": args.max_steps})
    model = build_model(arch, seed=tc.seed)

    train_data = prepare_pair_arrays(ds, arch, splits["train"])
    val_data = prepare_pair_arrays(ds, arch, splits["val"])
    scaler = resume.scaler if resume else LabelScaler.fit(train_data[2])

    result = train(model, train_data, val_data, tc, scaler=scaler, resume=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "checkpoint.bin")
    write_log(result.log, out / "train_log.jsonl")
    echo_config(cfg, out)
    best = result.checkpoint.best_val_mae
    print(f"trained {args.model} for {result.checkpoint.metadata['final_step']} steps; "
          f"best val MAE {best:.4f} N -> {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    threads = _limit_threads(args.threads)
    ds = read_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    splits = _split_dataset(ds, cfg)
    wanted = list(splits) if args.split == "all" else [args.split]
    for name in wanted:
        if name not in splits:
            raise ConfigError(f"--split {name}: expected one of train, val, test, all")
    report = evaluate(ckpt, ds, {k: splits[k] for k in wanted},
                      dataset_id=str(args.dataset), with_timing=args.timing,
                      threads=threads)
    out = Path(args.out)
    path = report.save(out)
    echo_config(cfg, out)
    for name in wanted:
        sec = report.splits[name]
        print(f"{name}: MAE {sec['mae_mean_n'] * 1e3:.2f} +/- {sec['mae_std_n'] * 1e3:.2f} mN  "
              f"aCC {sec['acc']:.4f}  R2 {sec['r2']:.4f}  (n={sec['n']})")
    print(f"report -> {path}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    _limit_threads(args.threads)
    ckpt = load_checkpoint(args.checkpoint)
    if args.dataset is not None:
        pair = _dataset_pair(args.dataset, args.index)
        ref, samp = pair.reference, pair.sample
    else:
        if not (args.reference and args.sample):
            raise ConfigError("infer: provide --reference and --sample, or --dataset and --index")
        ref = _load_volume_npy(args.reference, cfg)
        samp = _load_volume_npy(args.sample, cfg)
    f = predict(ckpt, ref, samp)
    print(f"fx={f.fx:+.6f} N  fy={f.fy:+.6f} N  fz={f.fz:+.6f} N")
    return 0


def cmd_extract_surfaces(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset is not None:
        pair = _dataset_pair(args.dataset, args.index)
        volumes = {"reference": pair.reference, "sample": pair.sample}
    else:
        if not args.input:
            raise ConfigError("extract-surfaces: provide --input, or --dataset and --index")
        volumes = {"volume": _load_volume_npy(args.input, cfg)}
    for name, vol in volumes.items():
        maps = extract_surfaces(vol)
        np.save(out / f"{name}_mip.npy", maps.mip)
        np.save(out / f"{name}_depth.npy", maps.depth)
        print(f"{name}: mip/depth {maps.mip.shape} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="octoforce",
                                 description="Synthetic OCT force-estimation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override top-level seed")
        if threads:
            p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")

    g = sub.add_parser("generate", help="render a phantom dataset")
    common(g, threads=False)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one model family on a dataset")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", required=True,
                   help=f"one of: {', '.join(MODEL_FAMILIES)}")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, default=None, help="override train.max_steps")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", help="train | val | test | all")
    e.add_argument("--out", required=True)
    e.add_argument("--timing", action="store_true", help="include inference timing")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict the force for one pair")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--reference", default=None, help=".npy volume")
    i.add_argument("--sample", default=None, help=".npy volume")
    i.add_argument("--dataset", default=None, help="dataset directory (with --index)")
    i.add_argument("--index", type=int, default=0)
    i.set_defaults(fn=cmd_infer)

    x = sub.add_parser("extract-surfaces", help="write MIP and depth maps")
    common(x, threads=False)
    x.add_argument("--input", default=None, help=".npy volume")
    x.add_argument("--dataset", default=None, help="dataset directory (with --index)")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_extract_surfaces)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"ConfigError: {e}", file=sys.stderr)
        return 2
    except OctoforceError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
