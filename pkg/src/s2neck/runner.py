"""End-to-end jobs shared by the CLI and the ablation runner."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .config import FORMAT_VERSION, RunConfig
from .data import Dataset, DatasetError, generate_dataset, load_dataset
from .detector import Detector
from .evaluation import count_params
from .train import evaluate_model, train

log = logging.getLogger(__name__)

_CACHE: dict[tuple[str, str], Dataset] = {}


def ensure_dataset(cfg: RunConfig, split: str) -> Dataset:
    """Load the configured dataset, generating it first if the directory has no manifest."""
    path = Path(cfg["data.path"])
    key = (str(path.resolve()), split)
    if key in _CACHE:
        return _CACHE[key]
    if not (path / "manifest.json").exists():
        log.info("generating dataset at %s", path)
        generate_dataset(cfg.manifest(), path)
    ds = load_dataset(path, split)
    want = cfg.manifest().to_json()
    if ds.manifest.to_json() != want:
        raise DatasetError(f"{path}: dataset manifest does not match the run config")
    _CACHE[key] = ds
    return ds


def write_run_stamp(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    (out / "run.json").write_text(json.dumps({"format_version": FORMAT_VERSION, "seed": cfg["seed"]},
                                             sort_keys=True) + "\n")


def build_model(cfg: RunConfig) -> Detector:
    return Detector(cfg.detector(), seed=cfg.model_seed())


def run_training(cfg: RunConfig, out: Path, evaluate: bool = True) -> dict:
    """Train one model, save checkpoint/logs, evaluate on the val split."""
    write_run_stamp(cfg, out)
    train_set = ensure_dataset(cfg, "train")
    model = build_model(cfg)
    total, groups = count_params(model)
    records = train(model, train_set, cfg.schedule(), cfg["seed"], out, config_echo=cfg.values)
    result = {"params": total, "param_groups": groups, "final_loss": records[-1]["loss_total"],
              "initial_loss": records[0]["loss_total"]}
    if evaluate:
        val = ensure_dataset(cfg, "val")
        report = evaluate_model(model, val, score_threshold=cfg["eval.score_threshold"], nms_iou=cfg["eval.nms_iou"])
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
        result["report"] = report.to_json()
    return result
