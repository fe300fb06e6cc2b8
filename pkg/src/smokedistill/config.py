"""Run configuration: one YAML file, every key defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .distill.losses import LossConfig
from .distill.student import DEFAULT_WIDTHS
from .distill.train import TrainConfig
from .splitter import DEFAULT_MIN_GAP_S, REFERENCE_RATIOS

TEACHER_CMD_ENV = "SMOKEDISTILL_TEACHER_CMD"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    manifest: str = "data/manifest.jsonl"
    image_root: str | None = None          # default: the manifest's directory
    masks_dir: str = "work/pseudo_labels"
    gt_dir: str = "data/gt"
    negatives_manifest: str | None = None  # smokeless images for fp-eval
    checkpoints_dir: str = "work/checkpoints"
    reports_dir: str = "work/reports"


@dataclass
class TeacherConfig:
    kind: str = "oracle"                   # oracle | external
    oracle_shape: str = "FILL_BOX"
    oracle_jitter_px: int = 0
    command: list[str] | None = None       # external teacher process; env var overrides
    external_kind: str = "BOX_PROMPTED"
    score_threshold: float = 0.5
    clip_to_boxes: bool = False
    workers: int = 1


@dataclass
class LossSection:
    lambda0: float = 0.4
    lambda1: float = 20.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    t: float = 0.8
    use_l0: bool = True
    use_l1: bool = True
    use_l2: bool = True
    use_l3: bool = True


@dataclass
class TrainSection:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-2
    resolution: list[int] = field(default_factory=lambda: [192, 320])
    edge_width: int = 3
    augment: bool = True
    device: str = "cpu"


@dataclass
class ModelSection:
    widths: list[int] = field(default_factory=lambda: list(DEFAULT_WIDTHS))


@dataclass
class EvalSection:
    threshold: float = 0.5
    fp_min_area: int = 0


@dataclass
class SplitSection:
    ratios: list[float] = field(default_factory=lambda: list(REFERENCE_RATIOS))
    min_gap_s: float = DEFAULT_MIN_GAP_S
    pinned_test: str | None = None         # file with one test id per line


@dataclass
class BenchSection:
    input_dims: list[int] = field(default_factory=lambda: [1080, 1920])
    warmup: int = 10
    iters: int = 100
    device: str = "cpu"
    half: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    split: SplitSection = field(default_factory=SplitSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def loss_config(self) -> LossConfig:
        return LossConfig(**dataclasses.asdict(self.loss))

    def train_config(self, loss: LossConfig | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
                           resolution=tuple(t.resolution), seed=self.seed, loss=loss or self.loss_config(),
                           edge_width=t.edge_width, augment=t.augment, eval_threshold=self.eval.threshold,
                           device=t.device)

    def teacher_command(self) -> list[str] | None:
        env = os.environ.get(TEACHER_CMD_ENV)
        return env.split() if env else self.teacher.command

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data: Mapping[str, Any] | None, where: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = _build(RunConfig, data or {}, "")
    try:
        cfg.loss_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg
