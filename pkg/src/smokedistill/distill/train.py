"""Training loop: augment, optimise the four-term loss, validate, checkpoint."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import torch

from ..augment import apply_joint_augmentation, sample_policy
from ..data import DatasetManifest, SegMask, Split, load_image
from ..edges import DEFAULT_EDGE_WIDTH, boundary_map
from ..metrics import binarize, mean_iou
from ..pseudolabel import PseudoLabelSet
from .losses import LossConfig, total_loss
from .student import StudentModel, image_to_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-2
    resolution: tuple[int, int] = (192, 320)  # (height, width)
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    edge_width: int = DEFAULT_EDGE_WIDTH
    augment: bool = True
    eval_threshold: float = 0.5
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ValueError(f"resolution must be (height, width), got {self.resolution}")

    def check_model(self, model: StudentModel) -> None:
        h, w = self.resolution
        if h % model.stride or w % model.stride:
            raise ValueError(f"resolution {h}x{w} not divisible by model stride {model.stride}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


@dataclass
class CheckpointRef:
    epoch: int
    sha256: str
    path: Path | None = None
    state: dict[str, torch.Tensor] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "sha256": self.sha256,
                "path": None if self.path is None else str(self.path)}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    checkpoint: CheckpointRef
    train_components: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    val_components: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_components": list(self.train_components),
            "val_loss": self.val_loss,
            "val_components": list(self.val_components),
            "val_miou": self.val_miou,
            "checkpoint": self.checkpoint.to_dict(),
        }


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def val_mious(self) -> list[float]:
        return [r.val_miou for r in self.records]


def select_best_checkpoint(history: TrainHistory | Sequence[EpochRecord]) -> CheckpointRef:
    """Checkpoint of the epoch with the highest validation mIoU (earliest on ties)."""
    records = list(history)
    if not records:
        raise ValueError("cannot select a checkpoint from an empty history")
    best = records[0]
    for r in records[1:]:
        if r.val_miou > best.val_miou:
            best = r
    return best.checkpoint


def state_hash(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def snapshot(model: torch.nn.Module, epoch: int, cfg: TrainConfig,
             checkpoint_dir: Path | None = None) -> CheckpointRef:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    digest = state_hash(state)
    ref = CheckpointRef(epoch, digest, state=state)
    if checkpoint_dir is not None:
        path = checkpoint_dir / f"epoch{epoch:03d}-{digest[:12]}.pt"
        torch.save({
            "state_dict": state,
            "epoch": epoch,
            "train_config": cfg.to_dict(),
            "aug_seed": cfg.seed,
            "descriptor": getattr(model, "descriptor", type(model).__name__),
            "sha256": digest,
        }, path)
        ref.path = path
    return ref


def load_checkpoint(model: torch.nn.Module, ref: CheckpointRef | str | Path) -> torch.nn.Module:
    if isinstance(ref, CheckpointRef) and ref.state is not None:
        state = ref.state
    else:
        path = ref.path if isinstance(ref, CheckpointRef) else Path(ref)
        if path is None:
            raise ValueError("checkpoint has neither in-memory state nor a file")
        state = torch.load(path, map_location="cpu", weights_only=True)["state_dict"]
    model.load_state_dict(state)
    return model


def resize_pair(image: np.ndarray, mask: SegMask | None, resolution: tuple[int, int]):
    h, w = resolution
    if image.shape[:2] != (h, w):
        image = cv2.resize(image, (w, h), interpolation=cv2.INTER_AREA)
    if mask is not None and mask.data.shape != (h, w):
        mask = SegMask(cv2.resize(mask.data, (w, h), interpolation=cv2.INTER_NEAREST))
    return image, mask


def load_labelled(manifest: DatasetManifest, labels: PseudoLabelSet, splits: Iterable[Split],
                  resolution: tuple[int, int], image_root: str | Path | None = None):
    root = Path(image_root) if image_root is not None else None
    out = []
    for s in manifest.select(*splits):
        if s.id not in labels:
            raise KeyError(f"no pseudo-label for {s.split.value} sample {s.id}")
        image = load_image(root / s.image_path if root is not None else s.image_path)
        mask = labels.read(s.id, (s.width, s.height))
        out.append(resize_pair(image, mask, resolution))
    return out


def _batch(items, edge_width: int, device):
    x = torch.stack([image_to_tensor(img) for img, _, _ in items]).to(device)
    y = torch.stack([torch.from_numpy(m.data.astype(np.float32))[None] for _, m, _ in items]).to(device)
    e = torch.stack([torch.from_numpy(ed.data.astype(np.float32))[None] for _, _, ed in items]).to(device)
    return x, y, e


def _validate(model, val, cfg: TrainConfig, device):
    model.eval()
    total = 0.0
    comps = np.zeros(4)
    pairs = []
    with torch.no_grad():
        for i in range(0, len(val), cfg.batch_size):
            chunk = [(img, m, boundary_map(m, cfg.edge_width)) for img, m in val[i:i + cfg.batch_size]]
            x, y, e = _batch(chunk, cfg.edge_width, device)
            out = model(x)
            res = total_loss(out, y, e, cfg.loss)
            total += float(res.total) * len(chunk)
            comps += np.array([float(c) for c in res.components]) * len(chunk)
            prob = torch.sigmoid(out.final_seg_logits).double().cpu().numpy()
            for p, (_, m, _) in zip(prob, chunk):
                pairs.append((binarize(p[0], cfg.eval_threshold), m))
    n = len(val)
    return total / n, tuple(comps / n), mean_iou(pairs)


def train_student(model: StudentModel, manifest: DatasetManifest, labels: PseudoLabelSet,
                  cfg: TrainConfig = TrainConfig(), *, image_root: str | Path | None = None,
                  checkpoint_dir: str | Path | None = None, log_path: str | Path | None = None) -> TrainHistory:
    """Train ``model`` in place on TRAIN samples, validating on VAL each epoch.

    Validation mIoU is measured against the VAL pseudo-labels. Every epoch is
    snapshotted (in memory, and to ``checkpoint_dir`` when given); use
    :func:`select_best_checkpoint` and :func:`load_checkpoint` afterwards.
    """
    cfg.check_model(model)
    device = torch.device(cfg.device)
    train = load_labelled(manifest, labels, [Split.TRAIN], cfg.resolution, image_root)
    val = load_labelled(manifest, labels, [Split.VAL], cfg.resolution, image_root)
    if not train:
        raise ValueError("manifest has no TRAIN samples")
    if not val:
        raise ValueError("manifest has no VAL samples")
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model.to(device)
    model.input_size = cfg.resolution
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = TrainHistory()
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(train))
            seen = 0
            running = 0.0
            comps = np.zeros(4)
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                items = []
                for idx in order[start:start + cfg.batch_size]:
                    img, mask = train[idx]
                    if cfg.augment:
                        aug = apply_joint_augmentation(img, mask, sample_policy(rng), cfg.edge_width)
                        items.append((aug.image, aug.mask, aug.edges))
                    else:
                        items.append((img, mask, boundary_map(mask, cfg.edge_width)))
                x, y, e = _batch(items, cfg.edge_width, device)
                res = total_loss(model(x), y, e, cfg.loss)
                loss_value = res.total.item()
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad(set_to_none=True)
                if res.total.requires_grad:
                    res.total.backward()
                    opt.step()
                running += loss_value * len(items)
                comps += np.array([c.item() for c in res.components]) * len(items)
                seen += len(items)
            val_loss, val_comps, val_miou = _validate(model, val, cfg, device)
            record = EpochRecord(
                epoch=epoch,
                train_loss=running / seen,
                val_loss=val_loss,
                val_miou=val_miou,
                checkpoint=snapshot(model, epoch, cfg, ckpt_dir),
                train_components=tuple(float(c) for c in comps / seen),
                val_components=tuple(float(c) for c in val_comps),
            )
            history.records.append(record)
            log.info("epoch %d: train %.4f val %.4f mIoU %.4f", epoch, record.train_loss,
                     record.val_loss, record.val_miou)
            if log_fh is not None:
                log_fh.write(json.dumps(record.to_dict()) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
