"""Teacher adapters and box-to-mask pseudo-label generation."""

from __future__ import annotations

import abc
import enum
import json
import logging
import math
import os
import re
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import (
    BoxAnnotation,
    DatasetManifest,
    MaskFormatError,
    SegMask,
    Split,
    load_image,
    read_mask,
    save_image,
    write_mask,
)

log = logging.getLogger(__name__)

INDEX_NAME = "index.jsonl"
DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_LABEL_SPLITS = (Split.TRAIN, Split.VAL, Split.UNASSIGNED)


class TeacherKind(str, enum.Enum):
    BOX_PROMPTED = "BOX_PROMPTED"
    BOX_TRAINED_INSTANCE = "BOX_TRAINED_INSTANCE"
    SYNTHETIC_ORACLE = "SYNTHETIC_ORACLE"


class OracleShape(str, enum.Enum):
    FILL_BOX = "FILL_BOX"
    INSCRIBED_ELLIPSE = "INSCRIBED_ELLIPSE"


class TeacherError(RuntimeError):
    def __init__(self, message: str, sample_id: str | None = None):
        super().__init__(message if sample_id is None else f"sample {sample_id}: {message}")
        self.sample_id = sample_id


class PseudoLabelJobError(RuntimeError):
    def __init__(self, failures: dict[str, str], partial: "PseudoLabelSet"):
        lines = "\n".join(f"  {sid}: {msg}" for sid, msg in failures.items())
        super().__init__(f"{len(failures)} sample(s) without pseudo-label:\n{lines}")
        self.failures = failures
        self.partial = partial


@dataclass(frozen=True)
class TeacherOutput:
    """Instance masks (bool, image-sized) with one confidence score each."""

    masks: tuple[np.ndarray, ...]
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.masks) != len(self.scores):
            raise TeacherError(f"{len(self.masks)} masks but {len(self.scores)} scores")


class TeacherAdapter(abc.ABC):
    """Wraps a mask-producing teacher.

    Box-prompted adapters return exactly one mask per prompt box; when the
    wrapped model yields several candidates per prompt, choosing one is the
    adapter's job. Instance adapters return any number of scored masks.
    """

    kind: TeacherKind
    #: False means calls are serialized through a lock by the job runner.
    share_safe: bool = False

    @property
    def descriptor(self) -> str:
        return f"{self.kind.value}:{type(self).__name__}"

    @abc.abstractmethod
    def segment(self, image: np.ndarray, boxes: Sequence[BoxAnnotation]) -> TeacherOutput:
        ...


class OracleBoxTeacher(TeacherAdapter):
    """Deterministic stand-in teacher that draws each box (or its inscribed ellipse).

    With ``jitter_px > 0`` each box edge is shifted by a seeded random offset
    before drawing, mimicking imprecise teacher boundaries. The offset depends
    only on the seed and the box, so box order does not matter.
    """

    kind = TeacherKind.SYNTHETIC_ORACLE
    share_safe = True

    def __init__(self, shape: OracleShape | str = OracleShape.FILL_BOX, noise_seed: int = 0,
                 jitter_px: int = 0):
        self.shape = OracleShape(shape)
        self.noise_seed = int(noise_seed)
        self.jitter_px = int(jitter_px)

    @property
    def descriptor(self) -> str:
        return f"{self.kind.value}:{self.shape.value}:seed={self.noise_seed}:jitter={self.jitter_px}"

    def _jittered(self, box: BoxAnnotation, width: int, height: int) -> tuple[int, int, int, int]:
        x0, y0, x1, y1 = box.as_list()
        if self.jitter_px:
            rng = np.random.default_rng([self.noise_seed, x0, y0, x1, y1])
            dx0, dy0, dx1, dy1 = rng.integers(-self.jitter_px, self.jitter_px + 1, size=4)
            x0, y0 = max(0, x0 + dx0), max(0, y0 + dy0)
            x1, y1 = min(width, x1 + dx1), min(height, y1 + dy1)
            if x1 <= x0:
                x0, x1 = box.x_min, box.x_max
            if y1 <= y0:
                y0, y1 = box.y_min, box.y_max
        return int(x0), int(y0), int(x1), int(y1)

    def _draw(self, x0: int, y0: int, x1: int, y1: int, width: int, height: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        if self.shape is OracleShape.FILL_BOX:
            out[y0:y1, x0:x1] = True
            return out
        for row, (start, length) in enumerate(ellipse_runs(x1 - x0, y1 - y0)):
            out[y0 + row, x0 + start:x0 + start + length] = True
        return out

    def segment(self, image: np.ndarray, boxes: Sequence[BoxAnnotation]) -> TeacherOutput:
        height, width = image.shape[:2]
        masks = tuple(self._draw(*self._jittered(b, width, height), width, height) for b in boxes)
        return TeacherOutput(masks, tuple(1.0 for _ in boxes))


def ellipse_runs(width: int, height: int) -> list[tuple[int, int]]:
    """Centred (start, length) pixel run per row of the ellipse inscribed in a width x height box.

    Run lengths are differences of the rounded cumulative exact area above each
    row boundary, so the total pixel count is round(pi * width * height / 4)
    rather than the lattice-point count, whose error grows with box size.
    """
    ax, ay = width / 2.0, height / 2.0

    def area_above(k: int) -> float:
        u = min(1.0, max(-1.0, (k - ay) / ay))
        return ax * ay * (u * math.sqrt(1.0 - u * u) + math.asin(u) + math.pi / 2)

    cum = [math.floor(area_above(k) + 0.5) for k in range(height + 1)]
    runs = []
    for row in range(height):
        length = min(width, max(0, cum[row + 1] - cum[row]))
        runs.append(((width - length) // 2, length))
    return runs


def oracle_box_teacher(shape: OracleShape | str = OracleShape.FILL_BOX, noise_seed: int = 0,
                       jitter_px: int = 0) -> OracleBoxTeacher:
    return OracleBoxTeacher(shape, noise_seed, jitter_px)


class ExternalProcessTeacher(TeacherAdapter):
    """Talks to a long-running teacher process over stdin/stdout, one JSON line each way.

    Request:  ``{"image_path": "...", "boxes": [[x0, y0, x1, y1], ...]}``
    Response: ``{"masks": [{"path": "...", "score": 0.97}, ...]}`` or ``{"error": "..."}``

    Mask files use the {0, 255} single-channel format. This is how SAM or a
    BoxSnake-trained model is plugged in without importing it here.
    """

    share_safe = False

    def __init__(self, command: Sequence[str], kind: TeacherKind | str = TeacherKind.BOX_PROMPTED,
                 name: str | None = None, timeout_s: float = 600.0):
        self.command = list(command)
        self.kind = TeacherKind(kind)
        self.name = name or Path(self.command[0]).name
        self.timeout_s = timeout_s
        self._proc: subprocess.Popen | None = None
        self._tmp = tempfile.TemporaryDirectory(prefix="teacher-")

    @property
    def descriptor(self) -> str:
        return f"{self.kind.value}:external:{self.name}"

    def _process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        return self._proc

    def request(self, image_path: str | Path, boxes: Sequence[BoxAnnotation]) -> dict:
        proc = self._process()
        assert proc.stdin is not None and proc.stdout is not None
        line = json.dumps({"image_path": str(image_path), "boxes": [b.as_list() for b in boxes]})
        proc.stdin.write(line + "\n")
        proc.stdin.flush()
        reply = proc.stdout.readline()
        if not reply:
            raise TeacherError(f"teacher process exited (code {proc.poll()})")
        response = json.loads(reply)
        if "error" in response:
            raise TeacherError(str(response["error"]))
        return response

    def segment(self, image: np.ndarray, boxes: Sequence[BoxAnnotation]) -> TeacherOutput:
        image_path = save_image(image, Path(self._tmp.name) / "request.png")
        response = self.request(image_path, boxes)
        height, width = image.shape[:2]
        masks, scores = [], []
        for item in response.get("masks", []):
            masks.append(read_mask(item["path"], (width, height)).data.astype(bool))
            scores.append(float(item.get("score", 1.0)))
        return TeacherOutput(tuple(masks), tuple(scores))

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._proc = None
        self._tmp.cleanup()


def generate_pseudo_label(image: np.ndarray, boxes: Sequence[BoxAnnotation], teacher: TeacherAdapter,
                          score_threshold: float = DEFAULT_SCORE_THRESHOLD, clip_to_boxes: bool = False,
                          sample_id: str | None = None) -> SegMask:
    """Union of the teacher's instance masks for one image.

    Box-prompted teachers contribute every mask; other kinds only masks with
    score >= ``score_threshold``.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must be in [0, 1], got {score_threshold}")
    height, width = image.shape[:2]
    if not boxes:
        return SegMask.zeros(width, height)
    try:
        output = teacher.segment(image, boxes)
    except TeacherError as exc:
        raise TeacherError(str(exc), sample_id) from exc
    except Exception as exc:
        raise TeacherError(f"teacher failed: {exc!r}", sample_id) from exc

    if teacher.kind is TeacherKind.BOX_PROMPTED and len(output.masks) != len(boxes):
        raise TeacherError(
            f"box-prompted teacher returned {len(output.masks)} masks for {len(boxes)} boxes", sample_id
        )
    union = np.zeros((height, width), dtype=bool)
    for mask, score in zip(output.masks, output.scores):
        if mask.shape != (height, width):
            raise TeacherError(f"teacher mask shape {mask.shape} != image shape {(height, width)}", sample_id)
        if not 0.0 <= score <= 1.0:
            raise TeacherError(f"teacher score {score} outside [0, 1]", sample_id)
        if teacher.kind is not TeacherKind.BOX_PROMPTED and score < score_threshold:
            continue
        union |= mask.astype(bool)
    if clip_to_boxes:
        union &= SegMask.from_boxes(boxes, width, height).data.astype(bool)
    return SegMask(union)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def mask_filename(sample_id: str) -> str:
    return _UNSAFE.sub("_", sample_id) + ".png"


@dataclass
class PseudoLabelSet:
    """Sample id -> mask file, plus how the masks were produced."""

    masks: dict[str, Path]
    teacher: str
    score_threshold: float
    generated_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.masks

    def __len__(self) -> int:
        return len(self.masks)

    def read(self, sample_id: str, expected_dims: tuple[int, int] | None = None) -> SegMask:
        try:
            path = self.masks[sample_id]
        except KeyError:
            raise KeyError(f"no pseudo-label for sample {sample_id}") from None
        return read_mask(path, expected_dims)

    def save(self, index_path: str | Path) -> Path:
        index_path = Path(index_path)
        root = index_path.parent
        with index_path.open("w", encoding="utf-8") as fh:
            header = {"teacher": self.teacher, "score_threshold": self.score_threshold,
                      "generated_at": self.generated_at}
            fh.write(json.dumps(header) + "\n")
            for sid in sorted(self.masks):
                rel = Path(os.path.relpath(self.masks[sid], root)).as_posix()
                fh.write(json.dumps({"id": sid, "mask": rel}) + "\n")
        return index_path

    @classmethod
    def load(cls, index_path: str | Path) -> "PseudoLabelSet":
        index_path = Path(index_path)
        if index_path.is_dir():
            index_path = index_path / INDEX_NAME
        lines = [ln for ln in index_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{index_path}: empty pseudo-label index")
        header = json.loads(lines[0])
        masks = {}
        for ln in lines[1:]:
            rec = json.loads(ln)
            masks[rec["id"]] = index_path.parent / rec["mask"]
        return cls(masks, header["teacher"], float(header["score_threshold"]), header.get("generated_at", ""))


def _existing_valid(path: Path, dims: tuple[int, int]) -> bool:
    if not path.is_file():
        return False
    try:
        read_mask(path, dims)
    except (MaskFormatError, OSError):
        return False
    return True


def run_pseudolabel_job(manifest: DatasetManifest, teacher: TeacherAdapter, out_dir: str | Path,
                        score_threshold: float = DEFAULT_SCORE_THRESHOLD, *,
                        splits: Iterable[Split] = DEFAULT_LABEL_SPLITS,
                        image_root: str | Path | None = None, workers: int = 1,
                        clip_to_boxes: bool = False,
                        image_loader: Callable[[str], np.ndarray] | None = None) -> PseudoLabelSet:
    """Write one mask per labelled sample under ``out_dir`` and an index file.

    Samples whose mask already exists and decodes cleanly are skipped, so an
    interrupted job can simply be rerun. Samples the teacher fails on are
    collected; everything else is persisted before PseudoLabelJobError is raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(image_root) if image_root is not None else None
    loader = image_loader or (lambda p: load_image(root / p if root is not None else p))
    wanted = {Split(s) for s in splits}
    todo = [s for s in manifest.samples if s.split in wanted]
    lock = None if teacher.share_safe else threading.Lock()

    def work(sample) -> tuple[str, Path | None, str | None]:
        path = out_dir / mask_filename(sample.id)
        dims = (sample.width, sample.height)
        if _existing_valid(path, dims):
            return sample.id, path, None
        try:
            if sample.boxes:
                image = loader(sample.image_path)
                if image.shape[:2] != (sample.height, sample.width):
                    raise TeacherError(
                        f"image is {image.shape[1]}x{image.shape[0]}, manifest says "
                        f"{sample.width}x{sample.height}", sample.id)
            else:
                image = np.zeros((sample.height, sample.width, 3), dtype=np.uint8)
            if lock is None:
                mask = generate_pseudo_label(image, sample.boxes, teacher, score_threshold,
                                             clip_to_boxes, sample.id)
            else:
                with lock:
                    mask = generate_pseudo_label(image, sample.boxes, teacher, score_threshold,
                                                 clip_to_boxes, sample.id)
            write_mask(mask, path)
        except Exception as exc:  # isolate per-sample failures
            log.warning("pseudo-label failed for %s: %s", sample.id, exc)
            return sample.id, None, str(exc)
        return sample.id, path, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(s) for s in todo]

    done = {sid: path for sid, path, _ in results if path is not None}
    failures = {sid: err for sid, _, err in results if err is not None}
    labels = PseudoLabelSet(done, teacher.descriptor, score_threshold)
    labels.save(out_dir / INDEX_NAME)
    if failures:
        raise PseudoLabelJobError(failures, labels)
    return labels
