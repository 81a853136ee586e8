"""On-disk formats: datasets, checkpoints, MoE bundles and training logs.

Binary files start with a 4-byte magic, a little-endian u32 format version
and a u32 header length, followed by a UTF-8 JSON header and the payload.
All payload numbers are little-endian.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .channel import ChannelSet, Scene
from .data import FederatedDataset, ul_features
from .nn.model import CnnArch, GateArch, ModelParams

DATASET_MAGIC = b"BFDS"
CHECKPOINT_MAGIC = b"BFCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def _write_blob(path: Path, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)


def _read_blob(path: Path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: truncated file")
    got, version, hlen = _PREFIX.unpack_from(raw)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise ValueError(f"{path}: truncated header")
    return json.loads(raw[_PREFIX.size:start]), raw[start:]


# -- datasets ----------------------------------------------------------------------


def _record_dtype(ul_shape: tuple[int, int], dl_shape: tuple[int, int], num_beams: int) -> np.dtype:
    return np.dtype([
        ("client_id", "<i4"),
        ("ue_index", "<i4"),
        ("label", "<i4"),
        ("ul_snr_db", "<f8"),
        ("h_ul", "<f4", (*ul_shape, 2)),       # interleaved real, imag
        ("h_dl", "<f4", (*dl_shape, 2)),
        ("dl_capacity", "<f8", (num_beams,)),
    ])


def _interleave(h: np.ndarray) -> np.ndarray:
    return np.stack([h.real, h.imag], axis=-1).astype("<f4")


def save_dataset(dataset: FederatedDataset, path: str | Path, config: dict | None = None,
                 scene: Scene | None = None) -> tuple[Path, Path]:
    """Write ``<path>`` (records) and ``<path>.json`` (config, scene, split manifest)."""
    path = Path(path)
    s = dataset.samples
    ul_shape, dl_shape = s.h_ul.shape[1:], s.h_dl.shape[1:]
    dt = _record_dtype(ul_shape, dl_shape, dataset.num_beams)
    rec = np.zeros(len(s), dtype=dt)
    for name in ("client_id", "ue_index", "label", "ul_snr_db"):
        rec[name] = getattr(s, name)
    rec["h_ul"] = _interleave(s.h_ul)
    rec["h_dl"] = _interleave(s.h_dl)
    rec["dl_capacity"] = s.dl_capacity
    header = {"num_samples": len(s), "ul_shape": list(ul_shape), "dl_shape": list(dl_shape),
              "num_beams": dataset.num_beams}
    _write_blob(path, DATASET_MAGIC, header, rec.tobytes())
    sidecar = path.with_name(path.name + ".json")
    meta = {"config": config, "scene": scene.to_dict() if scene is not None else None,
            "split": dataset.manifest()}
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return path, sidecar


def load_dataset(path: str | Path, phase_reference: bool | None = None
                 ) -> tuple[FederatedDataset, dict]:
    """Inverse of :func:`save_dataset`; returns the dataset and the sidecar dict."""
    path = Path(path)
    header, payload = _read_blob(path, DATASET_MAGIC)
    dt = _record_dtype(tuple(header["ul_shape"]), tuple(header["dl_shape"]), header["num_beams"])
    if len(payload) != dt.itemsize * header["num_samples"]:
        raise ValueError(f"{path}: payload size does not match the header")
    rec = np.frombuffer(payload, dtype=dt)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    h_ul = (rec["h_ul"][..., 0] + 1j * rec["h_ul"][..., 1]).astype(np.complex64)
    h_dl = (rec["h_dl"][..., 0] + 1j * rec["h_dl"][..., 1]).astype(np.complex64)
    samples = ChannelSet(
        h_ul=h_ul, h_dl=h_dl, label=rec["label"].astype(np.int64),
        client_id=rec["client_id"].astype(np.int64), ue_index=rec["ue_index"].astype(np.int64),
        ul_snr_db=rec["ul_snr_db"].astype(np.float64),
        dl_capacity=rec["dl_capacity"].astype(np.float64),
    )
    if phase_reference is None:
        phase_reference = ((meta.get("config") or {}).get("data") or {}).get("phase_reference", True)
    split = meta["split"]
    ds = FederatedDataset(samples, [], split["seed"], header["num_beams"],
                          ul_features(h_ul, phase_reference=phase_reference))
    return ds.with_manifest(split), meta


# -- checkpoints --------------------------------------------------------------------

_ARCHS = {"CnnArch": CnnArch, "GateArch": GateArch}


def arch_to_dict(arch) -> dict:
    d = dataclasses.asdict(arch)
    d["input_shape"] = list(d["input_shape"])
    return {"type": type(arch).__name__, **d}


def arch_from_dict(d: dict):
    d = dict(d)
    cls = _ARCHS[d.pop("type")]
    d["input_shape"] = tuple(d["input_shape"])
    return cls(**d)


def save_checkpoint(params: ModelParams, arch, path: str | Path, meta: dict | None = None) -> Path:
    if params.layout != arch.layout():
        raise ValueError("parameters do not match the architecture")
    path = Path(path)
    header = {"arch": arch_to_dict(arch), "num_params": len(params), "meta": meta or {}}
    _write_blob(path, CHECKPOINT_MAGIC, header, params.values.astype("<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, object, dict]:
    """Returns (params, arch, meta)."""
    header, payload = _read_blob(Path(path), CHECKPOINT_MAGIC)
    arch = arch_from_dict(header["arch"])
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if len(values) != header["num_params"] or len(values) != arch.num_params():
        raise ValueError(f"{path}: parameter count does not match the header")
    return ModelParams(values, arch.layout()), arch, header["meta"]


_BUNDLE_PARTS = ("local_expert", "global_expert", "gate")


def save_bundle(bundle, directory: str | Path, meta: dict | None = None) -> Path:
    """Three checkpoints plus ``manifest.json`` in ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for part in _BUNDLE_PARTS:
        arch = bundle.gate_arch if part == "gate" else bundle.arch
        save_checkpoint(getattr(bundle, part), arch, d / f"{part}.ckpt")
        files[part] = f"{part}.ckpt"
    (d / "manifest.json").write_text(json.dumps({"files": files, "meta": meta or {}},
                                                sort_keys=True, indent=1))
    return d


def load_bundle(directory: str | Path):
    from .personalize import MoeBundle

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    loaded = {part: load_checkpoint(d / manifest["files"][part]) for part in _BUNDLE_PARTS}
    return MoeBundle(
        local_expert=loaded["local_expert"][0], global_expert=loaded["global_expert"][0],
        gate=loaded["gate"][0], arch=loaded["local_expert"][1], gate_arch=loaded["gate"][1],
    )


# -- logs ------------------------------------------------------------------------------

HISTORY_COLUMNS = ("round", "cluster_id", "train_loss", "val_loss", "val_accuracy",
                   "cumulative_local_epochs", "server_lr_t")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_history_csv(history: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([_cell(row[c]) for c in HISTORY_COLUMNS])
    return path


def write_trace_csv(trace: Sequence[dict], path: str | Path) -> Path:
    """Assignment trace with one ``val_loss_<j>`` column per cluster."""
    path = Path(path)
    J = max((len(r["val_losses"]) for r in trace), default=1)
    cols = ["round", "client_id", "chosen_cluster", "was_exploration"] + [f"val_loss_{j}" for j in range(J)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in trace:
            w.writerow([_cell(r["round"]), _cell(r["client_id"]), _cell(r["chosen_cluster"]),
                        _cell(r["was_exploration"])] + [_cell(float(x)) for x in r["val_losses"]])
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
