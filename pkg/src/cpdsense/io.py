"""On-disk formats.

All binary files share one layout: a single line of JSON (the header, UTF-8,
terminated by ``\\n``) followed by a little-endian float32 payload.

* recordings (``.csi``): payload is interleaved (real, imag) samples in
  ``[time][link][subcarrier]`` order; header holds dims, sample rate, RF
  parameters and the scenario.
* ACF batches (``.acf``): payload is the row-major ``l x N_s`` matrices of
  all samples back to back; the header's ``samples`` list is the index table
  (label, dims, float offset, per-link motion statistics, provenance).
* checkpoints (``.ckpt``): payload is every tensor flattened in the order of
  the header's ``tensors`` table (name, shape, float offset) plus the model
  config.  Stage-1 and stage-2 checkpoints use the same ``encoder.*`` names.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .channel import CsiRecording, Label, ScenarioConfig
from .features import AcfSample
from .model import ModelConfig

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _pack(header: dict, payload: np.ndarray) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return head + b"\n" + np.ascontiguousarray(payload, dtype=_F32).tobytes()


def _unpack(data: bytes, expected_format: str) -> tuple[dict, np.ndarray]:
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if header.get("format") != expected_format:
        raise FormatError(f"expected {expected_format}, found {header.get('format')!r}")
    body = data[nl + 1:]
    if len(body) % 4:
        raise FormatError("payload is not a whole number of float32 values")
    return header, np.frombuffer(body, dtype=_F32).astype(np.float64)


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# recordings


def write_recording(path: Path, rec: CsiRecording) -> None:
    t, l, s = rec.samples.shape
    header = {
        "format": "cpdsense-csi/1",
        "dims": [t, l, s],
        "sample_rate_hz": rec.sample_rate_hz,
        "carrier_hz": rec.carrier_hz,
        "bandwidth_hz": rec.bandwidth_hz,
        "recording_id": rec.recording_id,
        "scenario": rec.scenario.to_dict(),
    }
    inter = np.empty((t, l, s, 2))
    inter[..., 0] = rec.samples.real
    inter[..., 1] = rec.samples.imag
    atomic_write_bytes(path, _pack(header, inter))


def read_recording(path: Path) -> CsiRecording:
    header, payload = _unpack(Path(path).read_bytes(), "cpdsense-csi/1")
    t, l, s = header["dims"]
    if payload.size != t * l * s * 2:
        raise FormatError("recording payload size does not match header dims")
    inter = payload.reshape(t, l, s, 2)
    return CsiRecording(samples=inter[..., 0] + 1j * inter[..., 1],
                        sample_rate_hz=float(header["sample_rate_hz"]),
                        scenario=ScenarioConfig.from_dict(header["scenario"]),
                        carrier_hz=float(header["carrier_hz"]),
                        bandwidth_hz=float(header["bandwidth_hz"]),
                        recording_id=header.get("recording_id", ""))


# ---------------------------------------------------------------------------
# ACF samples


def write_acf_batch(path: Path, samples: list[AcfSample]) -> None:
    index, offset = [], 0
    for smp in samples:
        l, n = smp.matrix.shape
        index.append({
            "label": smp.label.name,
            "dims": [l, n],
            "offset": offset,
            "lag_step_s": smp.lag_step_s,
            "num_links": smp.num_links,
            "per_link_motion_stat": [float(v) for v in smp.per_link_motion_stat],
            "window_start_s": smp.window_start_s,
            "source": smp.source,
            "dead_subcarriers": list(smp.dead_subcarriers),
            "provenance": smp.provenance,
            "parents": list(smp.parents),
        })
        offset += l * n
    payload = (np.concatenate([s.matrix.ravel() for s in samples]) if samples else np.zeros(0))
    atomic_write_bytes(path, _pack({"format": "cpdsense-acf/1", "samples": index}, payload))


def read_acf_batch(path: Path) -> list[AcfSample]:
    header, payload = _unpack(Path(path).read_bytes(), "cpdsense-acf/1")
    out = []
    for entry in header["samples"]:
        l, n = entry["dims"]
        off = entry["offset"]
        if off + l * n > payload.size:
            raise FormatError("ACF index points past the payload")
        out.append(AcfSample(
            matrix=payload[off:off + l * n].reshape(l, n).copy(),
            lag_step_s=float(entry["lag_step_s"]),
            label=Label[entry["label"]],
            num_links=int(entry["num_links"]),
            per_link_motion_stat=np.array(entry["per_link_motion_stat"]),
            window_start_s=float(entry["window_start_s"]),
            source=entry.get("source", ""),
            dead_subcarriers=tuple(entry.get("dead_subcarriers", ())),
            provenance=entry.get("provenance", "original"),
            parents=tuple(entry.get("parents", ())),
        ))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, params, config: ModelConfig, meta: dict | None = None) -> None:
    tensors, offset = [], 0
    for name, arr in params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    header = {"format": "cpdsense-ckpt/1", "model_config": config.to_dict(),
              "tensors": tensors, "meta": meta or {}}
    payload = np.concatenate([np.ravel(a) for a in params.values()]) if params else np.zeros(0)
    atomic_write_bytes(path, _pack(header, payload))


def load_checkpoint(path: Path):
    """Returns ``(params, model_config, meta)``."""
    header, payload = _unpack(Path(path).read_bytes(), "cpdsense-ckpt/1")
    config = ModelConfig.from_dict(header["model_config"])
    params = OrderedDict()
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        off = t["offset"]
        if off + size > payload.size:
            raise FormatError(f"tensor {t['name']} points past the payload")
        params[t["name"]] = payload[off:off + size].reshape(t["shape"]).copy()
    return params, config, header.get("meta", {})


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path: Path, entries: list[dict]) -> None:
    atomic_write_text(path, json.dumps(entries, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Path) -> list[dict]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise FormatError("manifest must be a JSON list")
    return entries
