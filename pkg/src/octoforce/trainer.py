"""Mini-batch training: Adam, plateau-halving lr schedule, early stopping.

Training minimizes the double-averaged MSE on labels rescaled to [0,1]
by a train-split-fit LabelScaler. Scheduling is driven by the unscaled
validation MAE in newtons: when it fails to improve by more than
``min_rel_improvement`` for ``plateau_patience`` consecutive
evaluations, the learning rate halves; after ``max_halvings`` halvings a
further plateau stops the run. The returned checkpoint always carries
the parameters from the best validation point, not the last step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .datapipe import LabelScaler, Volume, downsample, extract_surfaces
from .errors import CheckpointFormatError, ConfigError, ShapeError, TrainingDivergedError
from .models import ArchSpec, ModelGraph, build_model
from .optim import AdamState, adam_step, zero_grads
from .phantom import ForceVector, PairDataset
from .tensor import Tensor

CKPT_TAG = b"octoforce-ckpt/1\n"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_steps: int = 2000
    eval_interval: int = 50
    plateau_patience: int = 5          # evals without improvement before halving
    min_rel_improvement: float = 1e-3  # relative MAE gain that counts as progress
    max_halvings: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr: must be positive, got {self.lr}")
        if self.plateau_patience < 1:
            raise ConfigError(f"train.plateau_patience: must be >= 1, got {self.plateau_patience}")
        if self.min_rel_improvement < 0:
            raise ConfigError("train.min_rel_improvement: must be >= 0")
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_interval < 1:
            raise ConfigError("train: batch_size, max_steps, eval_interval must be >= 1")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "batch_size": self.batch_size, "max_steps": self.max_steps,
                "eval_interval": self.eval_interval, "plateau_patience": self.plateau_patience,
                "min_rel_improvement": self.min_rel_improvement,
                "max_halvings": self.max_halvings, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- input preparation --------------------------------------------------------


def _to_model_volume(v: Volume, extent: int) -> np.ndarray:
    if v.extents == (extent, extent, extent):
        return v.data
    if all(e % extent == 0 for e in v.extents):
        return downsample(v, (extent, extent, extent)).data
    raise ShapeError(f"volume extents {v.extents} incompatible with model extent {extent}")


def prepare_pair_arrays(ds_or_pairs, spec: ArchSpec,
                        indices: Optional[list[int]] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Turn SamplePairs into (reference, sample, labels_newton) arrays.

    Volumetric models see [N,e,e,e,1] volumes; planar models see the
    requested surface representation as [N,e,e,1] maps. Volumes whose
    grid exceeds the model extent are block-downsampled on the fly.
    """
    pairs = ds_or_pairs.pairs if isinstance(ds_or_pairs, PairDataset) else ds_or_pairs
    if indices is not None:
        pairs = [pairs[i] for i in indices]
    e = spec.input_extent
    refs, samps, labels = [], [], []
    ref_cache: dict[int, np.ndarray] = {}
    for p in pairs:
        if spec.ndim == 3:
            key = id(p.reference)
            if key not in ref_cache:
                ref_cache[key] = _to_model_volume(p.reference, e)[..., None]
            refs.append(ref_cache[key])
            samps.append(_to_model_volume(p.sample, e)[..., None])
        else:
            key = id(p.reference)
            if key not in ref_cache:
                maps = extract_surfaces(Volume(_to_model_volume(p.reference, e),
                                               p.reference.spacing_mm))
                ref_cache[key] = getattr(maps, spec.representation)[..., None]
            refs.append(ref_cache[key])
            maps = extract_surfaces(Volume(_to_model_volume(p.sample, e), p.sample.spacing_mm))
            samps.append(getattr(maps, spec.representation)[..., None])
        labels.append(p.label.as_array())
    n = len(pairs)
    shape = (n, e, e, e, 1) if spec.ndim == 3 else (n, e, e, 1)
    if n == 0:
        return (np.zeros(shape, np.float32), np.zeros(shape, np.float32),
                np.zeros((0, 3), np.float64))
    return (np.stack(refs).astype(np.float32), np.stack(samps).astype(np.float32),
            np.stack(labels))


# -- checkpoint ----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume or serve it."""

    arch: ArchSpec
    train_config: TrainConfig
    scaler: LabelScaler
    params: dict[str, np.ndarray]
    bn: dict[str, ops.BNState]
    adam: AdamState
    step: int
    lr: float
    halvings: int
    plateau_evals: int
    best_val_mae: float
    rng_state: dict
    metadata: dict = field(default_factory=dict)

    @property
    def family(self) -> str:
        return self.arch.family


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Versioned binary: magic line, JSON header, packed float32 blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    offset = 0

    def put(name: str, kind: str, arr: np.ndarray) -> None:
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name, arr in ckpt.params.items():
        put(name, "param", arr)
    for name, st in ckpt.bn.items():
        put(name, "bn_mean", st.mean)
        put(name, "bn_var", st.var)
    for name, arr in ckpt.adam.m.items():
        put(name, "adam_m", arr)
    for name, arr in ckpt.adam.v.items():
        put(name, "adam_v", arr)

    header = {
        "arch": ckpt.arch.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "scaler": ckpt.scaler.to_dict(),
        "bn_momentum": {name: st.momentum for name, st in ckpt.bn.items()},
        "adam_t": ckpt.adam.t,
        "step": ckpt.step,
        "lr": ckpt.lr,
        "halvings": ckpt.halvings,
        "plateau_evals": ckpt.plateau_evals,
        "best_val_mae": ckpt.best_val_mae,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
        "tensors": table,
    }
    hdr = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_TAG)
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if not raw.startswith(CKPT_TAG):
        raise CheckpointFormatError(f"bad checkpoint magic in {path}")
    n = len(CKPT_TAG)
    (hdr_len,) = struct.unpack("<Q", raw[n:n + 8])
    try:
        header = json.loads(raw[n + 8:n + 8 + hdr_len].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint header: {e}") from e
    blob = raw[n + 8 + hdr_len:]

    tensors: dict[str, dict[str, np.ndarray]] = {"param": {}, "bn_mean": {}, "bn_var": {},
                                                 "adam_m": {}, "adam_v": {}}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        size = int(np.prod(shape)) * 4 if shape else 4
        o = rec["offset"]
        arr = np.frombuffer(blob[o:o + size], dtype="<f4").reshape(shape).copy()
        tensors[rec["kind"]][rec["name"]] = arr

    bn = {}
    for name, mom in header["bn_momentum"].items():
        bn[name] = ops.BNState(tensors["bn_mean"][name], tensors["bn_var"][name], mom)
    adam = AdamState(tensors["adam_m"], tensors["adam_v"], int(header["adam_t"]))
    return Checkpoint(
        arch=ArchSpec.from_dict(header["arch"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        scaler=LabelScaler.from_dict(header["scaler"]),
        params=tensors["param"], bn=bn, adam=adam,
        step=int(header["step"]), lr=float(header["lr"]),
        halvings=int(header["halvings"]), plateau_evals=int(header["plateau_evals"]),
        best_val_mae=float(header["best_val_mae"]),
        rng_state=header["rng_state"], metadata=header.get("metadata", {}),
    )


def restore_model(ckpt: Checkpoint) -> ModelGraph:
    model = build_model(ckpt.arch, seed=0)
    model.load_state(ckpt.params, ckpt.bn)
    return model


# -- prediction ----------------------------------------------------------------


def predict_batch(model: ModelGraph, scaler: LabelScaler,
                  refs: np.ndarray, samps: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Infer-mode forward over prepared arrays; returns newtons [N,3]."""
    outs = []
    for i in range(0, len(refs), batch_size):
        out = model.forward(Tensor(refs[i:i + batch_size]),
                            Tensor(samps[i:i + batch_size]), mode="infer")
        outs.append(out.data)
    scaled = np.concatenate(outs) if outs else np.zeros((0, model.spec.output_dim), np.float32)
    return scaler.invert(scaled)


def predict(ckpt: Checkpoint, reference: Volume, sample: Volume,
            model: Optional[ModelGraph] = None) -> ForceVector:
    """Force estimate in newtons for one reference/sample pair."""
    if reference.extents != sample.extents:
        raise ShapeError(
            f"predict: reference {reference.extents} vs sample {sample.extents}")
    model = model if model is not None else restore_model(ckpt)
    spec = ckpt.arch
    e = spec.input_extent
    if spec.ndim == 3:
        r = _to_model_volume(reference, e)[None, ..., None]
        s = _to_model_volume(sample, e)[None, ..., None]
    else:
        rm = extract_surfaces(Volume(_to_model_volume(reference, e), reference.spacing_mm))
        sm = extract_surfaces(Volume(_to_model_volume(sample, e), sample.spacing_mm))
        r = getattr(rm, spec.representation)[None, ..., None]
        s = getattr(sm, spec.representation)[None, ..., None]
    out = predict_batch(model, ckpt.scaler, r.astype(np.float32), s.astype(np.float32))
    return ForceVector.from_array(out[0])


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def _val_mae_newton(model: ModelGraph, scaler: LabelScaler, refs, samps, labels_n) -> float:
    preds = predict_batch(model, scaler, refs, samps)
    return float(np.mean(np.abs(preds - labels_n)))


def train(model: ModelGraph, train_data: tuple[np.ndarray, np.ndarray, np.ndarray],
          val_data: tuple[np.ndarray, np.ndarray, np.ndarray],
          config: TrainConfig, scaler: Optional[LabelScaler] = None,
          resume: Optional[Checkpoint] = None,
          val_metric_fn: Optional[Callable[[int], float]] = None,
          on_eval: Optional[Callable[[int, float, ModelGraph], None]] = None) -> TrainResult:
    """Run the training loop; see the module docstring for the schedule.

    ``val_metric_fn`` replaces the real validation pass (used to test the
    schedule mechanics); ``on_eval(step, val_mae, model)`` observes every
    evaluation point.
    """
    refs, samps, labels_n = train_data
    if len(refs) == 0:
        raise ConfigError("train: empty training split")
    if scaler is None:
        scaler = LabelScaler.fit(labels_n)
    targets = scaler.apply(labels_n).astype(np.float32)

    if resume is not None:
        model.load_state(resume.params, resume.bn)
        adam = AdamState({k: a.copy() for k, a in resume.adam.m.items()},
                         {k: a.copy() for k, a in resume.adam.v.items()}, resume.adam.t)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        step = resume.step
        lr = resume.lr
        halvings = resume.halvings
        plateau = resume.plateau_evals
        best_mae = resume.best_val_mae
    else:
        adam = AdamState.create(model.params)
        rng = np.random.default_rng([config.seed, 555])
        step = 0
        lr = config.lr
        halvings = 0
        plateau = 0
        best_mae = float("inf")

    best_state = model.state_copy()
    best_adam = adam.copy()
    best_step = step
    log: list[dict] = []
    n = len(refs)
    bsz = min(config.batch_size, n)
    perm = rng.permutation(n)
    ptr = 0
    loss_accum: list[float] = []
    stop = False

    while step < config.max_steps and not stop:
        if ptr + bsz > n:
            perm = rng.permutation(n)
            ptr = 0
        idx = perm[ptr:ptr + bsz]
        ptr += bsz

        zero_grads(model.params)
        out = model.forward(Tensor(refs[idx]), Tensor(samps[idx]), mode="train")
        loss = ops.mse_loss(out, Tensor(targets[idx]))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(
                f"loss became {loss_val} at step {step + 1} (lr={lr:g})")
        loss.backward()
        adam_step(model.params, adam, lr)
        step += 1
        loss_accum.append(loss_val)

        if step % config.eval_interval == 0 or step == config.max_steps:
            if val_metric_fn is not None:
                val_mae = float(val_metric_fn(step))
            else:
                val_mae = _val_mae_newton(model, scaler, *val_data)
            log.append({"step": step, "train_loss": float(np.mean(loss_accum)),
                        "val_mae_N": val_mae, "lr": lr})
            loss_accum = []
            if on_eval is not None:
                on_eval(step, val_mae, model)

            improved = val_mae < best_mae * (1.0 - config.min_rel_improvement) \
                if np.isfinite(best_mae) else True
            if improved:
                best_mae = val_mae
                best_state = model.state_copy()
                best_adam = adam.copy()
                best_step = step
                plateau = 0
            else:
                plateau += 1
                if plateau >= config.plateau_patience:
                    if halvings < config.max_halvings:
                        lr *= 0.5
                        halvings += 1
                        plateau = 0
                    else:
                        stop = True

    params_best, bn_best = best_state
    model.load_state(params_best, bn_best)
    ckpt = Checkpoint(
        arch=model.spec, train_config=config, scaler=scaler,
        params=params_best, bn=bn_best, adam=best_adam,
        step=best_step, lr=lr, halvings=halvings, plateau_evals=plateau,
        best_val_mae=best_mae, rng_state=rng.bit_generator.state,
        metadata={"final_step": step},
    )
    return TrainResult(ckpt, log)


def write_log(log: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps(rec) + "\n")
    return path
