"""Dataset records, manifest I/O and binary mask storage."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

MANIFEST_VERSION = "1"


class ManifestError(ValueError):
    """Raised for malformed or invalid manifest content."""


class MaskFormatError(ValueError):
    """Raised when a mask file does not decode to a valid binary mask."""


class Source(str, enum.Enum):
    UAV = "UAV"
    FIXED_CAMERA = "FIXED_CAMERA"
    OTHER = "OTHER"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"
    UNASSIGNED = "UNASSIGNED"


@dataclass(frozen=True, slots=True)
class BoxAnnotation:
    """Axis-aligned box, half-open: covers [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {value!r}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box origin in {self}")
        if self.x_max <= self.x_min:
            raise ValueError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if self.y_max <= self.y_min:
            raise ValueError(f"y_max ({self.y_max}) must exceed y_min ({self.y_min})")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def fits(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def as_list(self) -> list[int]:
        return [int(self.x_min), int(self.y_min), int(self.x_max), int(self.y_max)]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "BoxAnnotation":
        if len(values) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*values)


@dataclass(frozen=True, slots=True)
class ImageSample:
    id: str
    image_path: str
    width: int
    height: int
    boxes: tuple[BoxAnnotation, ...] = ()
    source: Source = Source.OTHER
    group_key: str = ""
    timestamp: float | None = None
    split: Split = Split.UNASSIGNED

    def __post_init__(self) -> None:
        # tuple() so callers may pass lists without breaking immutability
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "split", Split(self.split))
        if not self.id:
            raise ValueError("sample id must not be empty")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sample {self.id}: non-positive image size {self.width}x{self.height}")

    def with_split(self, split: Split) -> "ImageSample":
        return replace(self, split=Split(split))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "width": self.width,
            "height": self.height,
            "boxes": [b.as_list() for b in self.boxes],
            "source": self.source.value,
            "group_key": self.group_key,
            "timestamp": self.timestamp,
            "split": self.split.value,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "ImageSample":
        missing = {"id", "image_path", "width", "height"} - set(record)
        if missing:
            raise ValueError(f"missing fields {sorted(missing)}")
        ts = record.get("timestamp")
        return cls(
            id=str(record["id"]),
            image_path=str(record["image_path"]),
            width=int(record["width"]),
            height=int(record["height"]),
            boxes=tuple(BoxAnnotation.from_list(b) for b in record.get("boxes") or ()),
            source=Source(record.get("source", Source.OTHER.value)),
            group_key=str(record.get("group_key") or ""),
            timestamp=None if ts is None else float(ts),
            split=Split(record.get("split", Split.UNASSIGNED.value)),
        )


@dataclass(frozen=True)
class SegMask:
    """Binary mask, stored as an (height, width) uint8 array of {0, 1}."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be in {0, 1}")
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def positives(self) -> int:
        return int(self.data.sum())

    @classmethod
    def zeros(cls, width: int, height: int) -> "SegMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def from_boxes(cls, boxes: Iterable[BoxAnnotation], width: int, height: int) -> "SegMask":
        arr = np.zeros((height, width), dtype=np.uint8)
        for b in boxes:
            arr[b.y_min:b.y_max, b.x_min:b.x_max] = 1
        return cls(arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SegMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[ImageSample, ...]
    version: str = MANIFEST_VERSION
    declared_totals: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        dupes = [k for k, n in Counter(s.id for s in self.samples).items() if n > 1]
        if dupes:
            raise ManifestError(f"duplicate sample ids: {sorted(dupes)[:10]}")
        if self.declared_totals:
            counts = self.split_counts()
            for split, expected in self.declared_totals.items():
                got = counts.get(Split(split), 0)
                if got != expected:
                    raise ManifestError(
                        f"split {split}: manifest declares {expected} samples, found {got}"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.samples}

    def split_counts(self) -> dict[Split, int]:
        counts = Counter(s.split for s in self.samples)
        return {split: counts.get(split, 0) for split in Split}

    def select(self, *splits: Split) -> list[ImageSample]:
        wanted = {Split(s) for s in splits}
        return [s for s in self.samples if s.split in wanted]

    def with_splits(self, assignment: Mapping[str, Split]) -> "DatasetManifest":
        samples = tuple(
            s.with_split(assignment[s.id]) if s.id in assignment else s for s in self.samples
        )
        return DatasetManifest(samples, version=self.version)


def validate_sample(sample: ImageSample, image_dims: tuple[int, int] | None = None) -> ImageSample:
    """Check a sample against its image size; returns it unchanged when valid.

    ``image_dims`` is ``(width, height)``; defaults to the sample's own fields.
    """
    width, height = image_dims if image_dims is not None else (sample.width, sample.height)
    if (width, height) != (sample.width, sample.height):
        raise ManifestError(
            f"sample {sample.id}: recorded size {sample.width}x{sample.height} "
            f"does not match image {width}x{height}"
        )
    for i, box in enumerate(sample.boxes):
        if not box.fits(width, height):
            raise ManifestError(
                f"sample {sample.id}: box {i} {box.as_list()} out of bounds for {width}x{height}"
            )
    if sample.source is Source.UAV and sample.timestamp is None:
        raise ManifestError(
            f"sample {sample.id}: timestamp required for temporal thinning (UAV source)"
        )
    return sample


def _header(version: str, declared_totals: Mapping[str, int]) -> dict:
    header: dict = {"manifest_version": version}
    if declared_totals:
        header["totals"] = dict(declared_totals)
    return header


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest, validating every record.

    An optional first line ``{"manifest_version": ..., "totals": {...}}`` sets
    the version and declared per-split totals.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    version = MANIFEST_VERSION
    totals: dict[str, int] = {}
    samples: list[ImageSample] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            if "manifest_version" in record:
                if samples:
                    raise ManifestError(f"{path}:{lineno}: header must be the first record")
                version = str(record["manifest_version"])
                totals = {Split(k).value: int(v) for k, v in (record.get("totals") or {}).items()}
                continue
            rid = record.get("id", "<no id>")
            try:
                sample = validate_sample(ImageSample.from_record(record))
            except (ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: record {rid}: {exc}") from None
            samples.append(sample)
    return DatasetManifest(tuple(samples), version=version, declared_totals=totals)


def save_manifest(manifest: DatasetManifest, path: str | Path, declare_totals: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    totals = dict(manifest.declared_totals)
    if declare_totals:
        totals = {k.value: v for k, v in manifest.split_counts().items() if v}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(manifest.version, totals)) + "\n")
        for s in manifest.samples:
            fh.write(json.dumps(s.to_record()) + "\n")
    return path


def write_mask(mask: SegMask, path: str | Path) -> Path:
    """Store a mask as a single-channel 8-bit PNG with values {0, 255}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)
    return path


def read_mask(path: str | Path, expected_dims: tuple[int, int] | None = None) -> SegMask:
    """Decode a {0, 255} single-channel mask file. ``expected_dims`` is (width, height)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "1", "P", "I", "I;16") or len(img.getbands()) != 1:
            raise MaskFormatError(f"{path}: not single-channel (mode {img.mode})")
        arr = np.asarray(img.convert("L") if img.mode in ("1", "P") else img)
    if img.mode == "1":
        arr = np.where(arr > 0, 255, 0)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise MaskFormatError(f"{path}: {int(bad.sum())} pixel(s) outside {{0, 255}}")
    if expected_dims is not None and (arr.shape[1], arr.shape[0]) != tuple(expected_dims):
        raise MaskFormatError(
            f"{path}: size {arr.shape[1]}x{arr.shape[0]} does not match expected "
            f"{expected_dims[0]}x{expected_dims[1]}"
        )
    return SegMask((arr == 255).astype(np.uint8))


def mask_io(mask: SegMask | None, path: str | Path, mode: str = "read",
            expected_dims: tuple[int, int] | None = None) -> SegMask | None:
    if mode == "write":
        if mask is None:
            raise ValueError("write mode requires a mask")
        write_mask(mask, path)
        return None
    if mode == "read":
        return read_mask(path, expected_dims)
    raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")


def load_image(path: str | Path) -> np.ndarray:
    """RGB image as an (H, W, 3) uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB")).copy()


def save_image(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
    return path
