"""End-to-end orchestration shared by the CLI and the acceptance tests.

A run configuration is a plain nested dict (loaded from YAML or JSON) with
the sections ``seed``, ``data``, ``features``, ``model``, ``train`` and
``eval``.  :func:`resolve_config` fills defaults so that every command can be
replayed from the snapshot it writes.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .channel import Label, make_scenario_bank, synth_csi
from .evaluation import argmax_flips, evaluate_probabilities, smooth_probabilities, write_metrics
from .features import AcfSample, FeatureConfig, extract_windows
from .io import (atomic_write_text, load_checkpoint, read_acf_batch, read_recording,
                 save_checkpoint, write_acf_batch, write_manifest, write_recording)
from .model import ModelConfig, predict_proba
from .training import TrainConfig, TrainResult, train_stage1, train_stage2

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "train_count": 300,
        "val_count": 60,
        "test_count": 100,
        "pretrain_count": 300,
        "num_links": 4,
        "subcarriers_per_link": 58,
        "sample_rate_hz": 30.0,
        "duration_s": 10.0,
        "windows_per_recording": 1,
        "write_recordings": True,
    },
    "features": asdict(FeatureConfig()),
    "model": ModelConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "eval": {"smoothing_window": 15},
}

SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    """Missing or inconsistent input data (CLI exit code 2)."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _plain(obj):
    """Tuples to lists, recursively, so snapshots compare equal after a JSON round trip."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError("configuration file must hold a mapping")
    return data


def resolve_config(user: dict | None = None) -> dict:
    cfg = _plain(_merge(DEFAULT_CONFIG, user or {}))
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown configuration sections: {sorted(unknown)}")
    # validate eagerly so bad configs fail before any work is done
    FeatureConfig(**cfg["features"])
    model_config(cfg)
    TrainConfig.from_dict(cfg["train"])
    return cfg


def feature_config(cfg: dict) -> FeatureConfig:
    return FeatureConfig(**cfg["features"])


def model_config(cfg: dict) -> ModelConfig:
    d = cfg["data"]
    m = dict(cfg["model"])
    m["num_lags"] = cfg["features"]["num_lags"]
    m["num_features"] = d["num_links"] * d["subcarriers_per_link"]
    return ModelConfig.from_dict(m)


def write_snapshot(directory: Path, cfg: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_text(directory / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# dataset generation


def _bank(cfg: dict, split: str, count: int, environment: str = "car"):
    d = cfg["data"]
    return make_scenario_bank(split, count, cfg["seed"], environment=environment,
                              num_links=d["num_links"], num_subcarriers_per_link=d["subcarriers_per_link"],
                              sample_rate_hz=d["sample_rate_hz"], duration_s=d["duration_s"])


def build_samples(cfg: dict, split: str, count: int, environment: str = "car",
                  out_dir: Path | None = None, manifest: list | None = None) -> list[AcfSample]:
    """Simulate a split and extract its ACF samples (optionally writing recordings)."""
    fconf = feature_config(cfg)
    d = cfg["data"]
    samples = []
    tag = split if environment == "car" else f"pretrain-{environment}"
    for i, scenario in enumerate(_bank(cfg, split, count, environment)):
        rec_id = f"{tag}_{i:05d}"
        rec = synth_csi(scenario, min_duration_s=fconf.window_s, recording_id=rec_id)
        samples.extend(extract_windows(rec, fconf, max_windows=d["windows_per_recording"]))
        if manifest is not None:
            path = f"recordings/{rec_id}.csi"
            if out_dir is not None and d.get("write_recordings", True):
                write_recording(out_dir / path, rec)
            manifest.append({
                "path": path if d.get("write_recordings", True) else None,
                "label": scenario.class_label.name,
                "split": tag,
                "environment": environment,
                "antenna_config": scenario.antenna_config,
                "child_state": scenario.child_state,
                "static_paths": list(scenario.static_paths),
                "static_delay_ns": list(scenario.static_delay_ns),
                "rng_seed": scenario.rng_seed,
            })
    return samples


def generate_dataset(cfg: dict, out_dir: Path) -> dict[str, list[AcfSample]]:
    """Write recordings, per-split ACF batches and a manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = cfg["data"]
    manifest: list[dict] = []
    splits = {}
    for split, key in (("train", "train_count"), ("val", "val_count"), ("test", "test_count")):
        splits[split] = build_samples(cfg, split, d[key], out_dir=out_dir, manifest=manifest)
    if d["pretrain_count"] > 0:
        splits["pretrain"] = build_samples(cfg, "train", d["pretrain_count"], environment="indoor",
                                           out_dir=out_dir, manifest=manifest)
    for name, samples in splits.items():
        write_acf_batch(out_dir / "features" / f"{name}.acf", samples)
    write_manifest(out_dir / "manifest.json", manifest)
    write_snapshot(out_dir, cfg)
    return splits


def class_counts(samples: list[AcfSample]) -> dict[str, int]:
    c = Counter(s.label.name for s in samples)
    return {lab.name: c.get(lab.name, 0) for lab in Label}


def load_split(data_dir: Path, name: str) -> list[AcfSample]:
    path = Path(data_dir) / "features" / f"{name}.acf"
    if not path.exists():
        raise DataError(f"missing feature batch {path}")
    return read_acf_batch(path)


# ---------------------------------------------------------------------------
# training


def _check_dims(samples: list[AcfSample], mconf: ModelConfig, what: str) -> None:
    for s in samples:
        if s.matrix.shape != (mconf.num_lags, mconf.num_features):
            raise DataError(f"{what} sample shape {s.matrix.shape} does not match model "
                            f"({mconf.num_lags}, {mconf.num_features})")


def _save_run(run_dir: Path, result: TrainResult, cfg: dict, stage: int) -> None:
    meta = {"stage": stage, "features": cfg["features"], "seed": cfg["seed"]}
    save_checkpoint(run_dir / "best.ckpt", result.best_params, result.model_config, meta)
    save_checkpoint(run_dir / "final.ckpt", result.params, result.model_config, meta)


def run_stage1(cfg: dict, splits: dict, run_dir: Path | None = None) -> TrainResult:
    """Presence pretraining on indoor-variant data plus the in-car training split."""
    mconf = model_config(cfg)
    tconf = TrainConfig.from_dict({**cfg["train"], "stage": 1})
    train = list(splits.get("pretrain", [])) + list(splits["train"])
    _check_dims(train, mconf, "training")
    if run_dir is not None:
        write_snapshot(run_dir, cfg)
    result = train_stage1(train, splits.get("val", []), mconf, tconf, run_dir)
    if run_dir is not None:
        _save_run(run_dir, result, cfg, 1)
    return result


def run_stage2(cfg: dict, splits: dict, stage1_params, run_dir: Path | None = None) -> TrainResult:
    mconf = model_config(cfg)
    tconf = TrainConfig.from_dict({**cfg["train"], "stage": 2})
    _check_dims(splits["train"], mconf, "training")
    if run_dir is not None:
        write_snapshot(run_dir, cfg)
    result = train_stage2(splits["train"], splits.get("val", []), stage1_params, mconf, tconf, run_dir)
    if run_dir is not None:
        _save_run(run_dir, result, cfg, 2)
    return result


# ---------------------------------------------------------------------------
# evaluation and inference


def _sequences(samples: list[AcfSample]) -> list[list[int]]:
    """Sample indices grouped per source recording, in window order."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.source or f"#{i}", []).append(i)
    return [sorted(idx, key=lambda i: samples[i].window_start_s) for idx in groups.values()]


def evaluate_samples(samples: list[AcfSample], params, mconf: ModelConfig, window: int) -> dict:
    _check_dims(samples, mconf, "evaluation")
    probs = predict_proba(np.stack([s.matrix for s in samples]), params, mconf)
    labels = np.array([int(s.label) for s in samples])
    smoothed = np.empty_like(probs)
    flips_raw = flips_smooth = 0
    for idx in _sequences(samples):
        smoothed[idx] = smooth_probabilities(probs[idx], window)
        flips_raw += argmax_flips(probs[idx])
        flips_smooth += argmax_flips(smoothed[idx])
    return {
        "probs": probs,
        "labels": labels,
        "unsmoothed": evaluate_probabilities(probs, labels),
        "smoothed": evaluate_probabilities(smoothed, labels),
        "flips_unsmoothed": flips_raw,
        "flips_smoothed": flips_smooth,
    }


def write_eval_report(report: dict, out_dir: Path, window: int) -> None:
    out_dir = Path(out_dir)
    write_metrics(report["unsmoothed"], out_dir, prefix="unsmoothed_")
    write_metrics(report["smoothed"], out_dir, prefix="smoothed_")
    summary = {
        "smoothing_window": window,
        "num_samples": int(report["labels"].size),
        "flips_unsmoothed": report["flips_unsmoothed"],
        "flips_smoothed": report["flips_smoothed"],
        "unsmoothed": {k: getattr(report["unsmoothed"], k) for k in ("accuracy", "f1", "tpr", "fpr", "auc")},
        "smoothed": {k: getattr(report["smoothed"], k) for k in ("accuracy", "f1", "tpr", "fpr", "auc")},
    }
    atomic_write_text(out_dir / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def infer_recording(recording_path: Path, checkpoint_path: Path, window: int = 15):
    """Per-window probabilities and smoothed decisions for one recording file."""
    params, mconf, meta = load_checkpoint(checkpoint_path)
    if mconf.num_classes != 3:
        raise DataError("inference needs a three-class (stage-2) checkpoint")
    fconf = FeatureConfig(**meta.get("features", {}))
    rec = read_recording(recording_path)
    if rec.duration_s + 1e-9 < fconf.window_s:
        raise DataError(f"recording of {rec.duration_s:.2f} s is shorter than one "
                        f"{fconf.window_s} s window")
    if rec.num_links * rec.num_subcarriers != mconf.num_features:
        raise DataError(f"recording has {rec.num_links}x{rec.num_subcarriers} features, "
                        f"model expects {mconf.num_features}")
    samples = extract_windows(rec, fconf)
    probs = predict_proba(np.stack([s.matrix for s in samples]), params, mconf)
    smoothed = smooth_probabilities(probs, window)
    starts = [s.window_start_s for s in samples]
    return starts, probs, np.argmax(smoothed, axis=1)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
