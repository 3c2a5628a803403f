"""Run configuration: flat dotted keys, JSON file + flag overrides.

Precedence (lowest to highest): built-in defaults, ``--config`` file,
explicit command-line flags.  All randomness derives from ``seed``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .data import DatasetManifest
from .detector import BackboneConfig, DetectorConfig, LossWeights
from .neck import S2Config
from .train import TrainSchedule

FORMAT_VERSION = 1

DEFAULTS: dict = {
    "seed": 0,
    "data.path": "data/default",
    "data.image_size": 128,
    "data.n_train": 2000,
    "data.n_val": 500,
    "data.mix.small": 0.5,
    "data.mix.medium": 0.3,
    "data.mix.large": 0.2,
    "data.seed": 0,
    "model.neck": "pan",
    "model.neck_width": 16,
    "model.neck_normalized": False,
    "model.head_width": 16,
    "model.s2": False,
    "model.s2_targets": [3],
    "model.fusion": "one_stage",
    "model.backbone.stem": 8,
    "model.backbone.widths": [16, 24, 32, 48],
    "model.backbone.extra_blocks": [0, 1, 1, 0],
    "s2.kernel": [3, 3, 3],
    "s2.leaky_slope": 0.1,
    "s2.bn_eps": 1e-5,
    "s2.bn_momentum": 0.1,
    "s2.basis_level": 3,
    "s2.resize_mode": "bilinear",
    "train.epochs": 24,
    "train.batch_size": 8,
    "train.lr": 0.02,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.warmup_iters": 100,
    "train.max_iters": None,
    "train.loss.obj": 10.0,
    "train.loss.cls": 2.0,
    "train.loss.box": 1.0,
    "train.loss.obj_pos_weight": 5.0,
    "eval.score_threshold": 0.01,
    "eval.nms_iou": 0.5,
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Fully resolved flat settings."""

    def __init__(self, values: dict | None = None):
        merged = copy.deepcopy(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        self.values = merged

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls(values)

    def with_overrides(self, overrides: dict) -> RunConfig:
        merged = dict(self.values)
        for k, v in overrides.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        return RunConfig(merged)

    def __getitem__(self, key: str):
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True) + "\n"

    # -- typed views ------------------------------------------------------
    def manifest(self) -> DatasetManifest:
        v = self.values
        return DatasetManifest(
            image_size=v["data.image_size"], n_train=v["data.n_train"], n_val=v["data.n_val"],
            scale_mix={"small": v["data.mix.small"], "medium": v["data.mix.medium"], "large": v["data.mix.large"]},
            seed=v["data.seed"],
        )

    def detector(self) -> DetectorConfig:
        v = self.values
        s2 = S2Config(kernel=tuple(v["s2.kernel"]), bn_eps=v["s2.bn_eps"], bn_momentum=v["s2.bn_momentum"],
                      leaky_slope=v["s2.leaky_slope"], two_stage_adapter=v["model.fusion"] == "two_stage",
                      basis_level=v["s2.basis_level"], resize_mode=v["s2.resize_mode"])
        bb = BackboneConfig(v["model.backbone.stem"], tuple(v["model.backbone.widths"]),
                            tuple(v["model.backbone.extra_blocks"]))
        return DetectorConfig(backbone=bb, neck=v["model.neck"],
                              neck_normalized=bool(v["model.neck_normalized"]), neck_width=v["model.neck_width"],
                              head_width=v["model.head_width"], s2=bool(v["model.s2"]), s2_cfg=s2,
                              s2_targets=tuple(v["model.s2_targets"]), fusion=v["model.fusion"])

    def schedule(self) -> TrainSchedule:
        v = self.values
        return TrainSchedule(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"], lr=v["train.lr"],
            momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
            warmup_iters=v["train.warmup_iters"], max_iters=v["train.max_iters"],
            loss=LossWeights(v["train.loss.obj"], v["train.loss.cls"], v["train.loss.box"],
                             v["train.loss.obj_pos_weight"]),
        )

    def model_seed(self) -> int:
        """Weight-init seed; the data-order seed is ``seed`` itself (see ``train.batch_order``)."""
        return self.values["seed"]
