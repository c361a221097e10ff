"""Dataset container: a manifest plus one blob of raw volume data.

Layout of a dataset directory:

  manifest.json   format tag "octoforce-ds/1", phantom spec, plan, and
                  per-pair records (pose, label in newtons, ROI id, byte
                  offsets into the blob)
  volumes.bin     little-endian float32 voxels, x-fastest; references are
                  stored once per ROI and shared by its pairs

Write -> read round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datapipe import Volume
from .errors import DatasetFormatError
from .phantom import (AcquisitionPlan, ForceVector, PairDataset, PhantomSpec,
                      SamplePair, ToolPose)

FORMAT_TAG = "octoforce-ds/1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "volumes.bin"


def _volume_bytes(v: Volume) -> bytes:
    # flat index (z*H + y)*W + x so x varies fastest in the blob
    return np.ascontiguousarray(v.data.transpose(2, 1, 0)).astype("<f4").tobytes()


def _volume_from_bytes(buf: bytes, grid: tuple[int, int, int],
                       spacing: tuple[float, float, float]) -> Volume:
    w, h, d = grid
    arr = np.frombuffer(buf, dtype="<f4").reshape(d, h, w).transpose(2, 1, 0)
    return Volume(np.ascontiguousarray(arr), spacing)


def write_dataset(ds: PairDataset, path: str | Path) -> Path:
    """Serialize a PairDataset into directory ``path`` (created if needed)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    grid = ds.phantom.grid
    nbytes = int(np.prod(grid)) * 4

    references: list[dict] = []
    ref_offset_by_roi: dict[int, int] = {}
    pair_records: list[dict] = []
    offset = 0
    with open(out / BLOB_NAME, "wb") as blob:
        for i, pair in enumerate(ds.pairs):
            if pair.roi not in ref_offset_by_roi:
                blob.write(_volume_bytes(pair.reference))
                ref_offset_by_roi[pair.roi] = offset
                references.append({"roi": pair.roi,
                                   "offset_mm": list(pair.roi_offset_mm),
                                   "blob_offset": offset})
                offset += nbytes
            blob.write(_volume_bytes(pair.sample))
            pair_records.append({
                "id": i, "roi": pair.roi, "pose": pair.pose.to_dict(),
                "label_n": pair.label.as_array().tolist(),
                "blob_offset": offset,
            })
            offset += nbytes

    manifest = {
        "format": FORMAT_TAG,
        "phantom": ds.phantom.to_dict(),
        "plan": ds.plan.to_dict(),
        "grid": list(grid),
        "spacing_mm": list(ds.phantom.spacing_mm),
        "references": references,
        "pairs": pair_records,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return out


def read_dataset(path: str | Path) -> PairDataset:
    """Load a dataset directory; raises DatasetFormatError on anything off."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    blob_path = root / BLOB_NAME
    if not manifest_path.is_file():
        raise DatasetFormatError(f"missing {MANIFEST_NAME} in {root}")
    if not blob_path.is_file():
        raise DatasetFormatError(f"missing {BLOB_NAME} in {root}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != FORMAT_TAG:
        raise DatasetFormatError(
            f"bad format tag {manifest.get('format')!r}, expected {FORMAT_TAG!r}")

    phantom = PhantomSpec.from_dict(manifest["phantom"])
    plan = AcquisitionPlan.from_dict(manifest["plan"])
    grid = tuple(int(g) for g in manifest["grid"])
    spacing = tuple(float(s) for s in manifest["spacing_mm"])
    nbytes = int(np.prod(grid)) * 4

    blob = blob_path.read_bytes()
    expected = nbytes * (len(manifest["references"]) + len(manifest["pairs"]))
    if len(blob) != expected:
        raise DatasetFormatError(
            f"blob size {len(blob)} != expected {expected} for {grid} volumes")

    ref_by_roi: dict[int, Volume] = {}
    offset_by_roi: dict[int, list[float]] = {}
    for rec in manifest["references"]:
        o = int(rec["blob_offset"])
        ref_by_roi[int(rec["roi"])] = _volume_from_bytes(blob[o:o + nbytes], grid, spacing)
        offset_by_roi[int(rec["roi"])] = rec["offset_mm"]

    pairs: list[SamplePair] = []
    for rec in manifest["pairs"]:
        roi = int(rec["roi"])
        if roi not in ref_by_roi:
            raise DatasetFormatError(f"pair {rec['id']} references unknown roi {roi}")
        o = int(rec["blob_offset"])
        sample = _volume_from_bytes(blob[o:o + nbytes], grid, spacing)
        pairs.append(SamplePair(
            reference=ref_by_roi[roi], sample=sample,
            label=ForceVector.from_array(rec["label_n"]),
            pose=ToolPose.from_dict(rec["pose"]), roi=roi,
            roi_offset_mm=tuple(offset_by_roi[roi]),
        ))
    return PairDataset(phantom, plan, pairs)
