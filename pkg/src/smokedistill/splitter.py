"""Temporal thinning of video frames and group-disjoint train/val/test splits."""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import DatasetManifest, ImageSample, Source, Split

DEFAULT_MIN_GAP_S = 120.0
# reference wildfire dataset proportions (3252 / 701 / 80 of 4033)
REFERENCE_RATIOS = (0.806, 0.174, 0.020)
_SPLITS = (Split.TRAIN, Split.VAL, Split.TEST)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, Split]
    seed: int | None
    ratios: tuple[float, float, float]

    def counts(self) -> dict[Split, int]:
        out = {s: 0 for s in _SPLITS}
        for split in self.assignment.values():
            out[split] += 1
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"seed": self.seed, "ratios": list(self.ratios)}) + "\n")
            for sid in sorted(self.assignment):
                fh.write(json.dumps({"id": sid, "split": self.assignment[sid].value}) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SplitAssignment":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        header = json.loads(lines[0])
        assignment = {}
        for ln in lines[1:]:
            rec = json.loads(ln)
            assignment[rec["id"]] = Split(rec["split"])
        return cls(assignment, header.get("seed"), tuple(header.get("ratios", REFERENCE_RATIOS)))


def temporal_thin(samples: Iterable[ImageSample], min_gap_s: float = DEFAULT_MIN_GAP_S) -> list[str]:
    """Keep frames at least ``min_gap_s`` apart within each recording (group_key).

    Greedy scan in time order: the first frame is kept, then every frame whose
    timestamp is >= last kept + min_gap_s. Returned ids keep the input order.
    """
    if min_gap_s <= 0:
        raise ValueError("min_gap_s must be positive")
    samples = list(samples)
    streams: dict[str, list[ImageSample]] = defaultdict(list)
    for s in samples:
        if s.timestamp is None:
            raise ValueError(f"sample {s.id} has no timestamp")
        streams[s.group_key].append(s)
    kept: set[str] = set()
    for stream in streams.values():
        last = None
        for s in sorted(stream, key=lambda x: (x.timestamp, x.id)):
            if last is None or s.timestamp >= last + min_gap_s:
                kept.add(s.id)
                last = s.timestamp
    return [s.id for s in samples if s.id in kept]


def _group_of(s: ImageSample) -> str:
    return s.group_key or f"__sample__{s.id}"


def _pack(groups: dict[str, list[str]], splits: Sequence[Split], ratios: Sequence[float],
          seed: int | None) -> dict[str, Split]:
    keys = sorted(groups)
    random.Random(seed).shuffle(keys)
    # largest groups first; the shuffle only decides among equal sizes
    keys.sort(key=lambda k: len(groups[k]), reverse=True)
    total = sum(len(v) for v in groups.values())
    targets = [r * total for r in ratios]
    filled = [0] * len(splits)
    out: dict[str, Split] = {}
    for k in keys:
        deficits = [t - f for t, f in zip(targets, filled)]
        i = max(range(len(splits)), key=lambda j: (deficits[j], -j))
        filled[i] += len(groups[k])
        for sid in groups[k]:
            out[sid] = splits[i]
    return out


def group_split(samples: Iterable[ImageSample], ratios: Sequence[float] = REFERENCE_RATIOS,
                seed: int | None = 0, pinned_test: Iterable[str] | None = None) -> SplitAssignment:
    """Assign whole groups to train/val/test, approximating ``ratios`` by sample count.

    Samples with an empty group_key form their own group. When ``pinned_test``
    is given, the groups of those ids go to TEST and the rest is divided
    between TRAIN and VAL using the first two ratios.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    groups: dict[str, list[str]] = defaultdict(list)
    for s in samples:
        groups[_group_of(s)].append(s.id)

    assignment: dict[str, Split] = {}
    if pinned_test is not None:
        pinned = set(pinned_test)
        test_groups = {g for g, ids in groups.items() if pinned.intersection(ids)}
        unknown = pinned - {sid for ids in groups.values() for sid in ids}
        if unknown:
            raise ValueError(f"pinned test ids not in samples: {sorted(unknown)[:10]}")
        for g in test_groups:
            for sid in groups.pop(g):
                assignment[sid] = Split.TEST
        if len(groups) < 2:
            raise ValueError(f"need at least 2 non-test groups, got {len(groups)}")
        r_tr, r_va = ratios[0], ratios[1]
        assignment.update(_pack(groups, _SPLITS[:2], (r_tr / (r_tr + r_va), r_va / (r_tr + r_va)), seed))
    else:
        if len(groups) < len(_SPLITS):
            raise ValueError(f"need at least {len(_SPLITS)} groups, got {len(groups)}")
        assignment = _pack(groups, _SPLITS, ratios, seed)
    return SplitAssignment(assignment, seed, ratios)


@dataclass
class SplitVerification:
    findings: list[str] = field(default_factory=list)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.findings

    def totals(self) -> dict[str, int]:
        return {split: sum(row.values()) for split, row in self.counts.items()}

    def table(self) -> str:
        sources = sorted({src for row in self.counts.values() for src in row})
        grand = sum(self.totals().values()) or 1
        header = f"{'Split':<8}" + "".join(f"{s:>14}" for s in sources) + f"{'Total':>8}{'Portion':>9}"
        lines = [header, "-" * len(header)]
        col_totals = defaultdict(int)
        for split, row in self.counts.items():
            total = sum(row.values())
            for s in sources:
                col_totals[s] += row.get(s, 0)
            lines.append(f"{split:<8}" + "".join(f"{row.get(s, 0):>14}" for s in sources)
                         + f"{total:>8}{100.0 * total / grand:>8.1f}%")
        lines.append("-" * len(header))
        lines.append(f"{'Total':<8}" + "".join(f"{col_totals[s]:>14}" for s in sources)
                     + f"{sum(col_totals.values()):>8}{100.0:>8.1f}%")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "findings": self.findings, "counts": self.counts, "totals": self.totals()}


def verify_split(manifest: DatasetManifest, min_gap_s: float = DEFAULT_MIN_GAP_S) -> SplitVerification:
    """Check group disjointness and UAV frame spacing; tally samples per split and source."""
    report = SplitVerification()
    assigned = [s for s in manifest.samples if s.split in _SPLITS]
    report.counts = {sp.value: {} for sp in _SPLITS}
    for s in assigned:
        row = report.counts[s.split.value]
        row[s.source.value] = row.get(s.source.value, 0) + 1

    unassigned = sum(1 for s in manifest.samples if s.split is Split.UNASSIGNED)
    if unassigned:
        report.findings.append(f"{unassigned} sample(s) have no split")

    splits_of: dict[str, set[str]] = defaultdict(set)
    for s in assigned:
        if s.group_key:
            splits_of[s.group_key].add(s.split.value)
    for g in sorted(splits_of):
        if len(splits_of[g]) > 1:
            report.findings.append(f"group {g!r} spans splits {sorted(splits_of[g])}")

    streams: dict[tuple[str, str], list[ImageSample]] = defaultdict(list)
    for s in assigned:
        if s.source is Source.UAV:
            if s.timestamp is None:
                report.findings.append(f"UAV sample {s.id} has no timestamp")
                continue
            streams[(s.split.value, s.group_key)].append(s)
    for (split, g), frames in sorted(streams.items()):
        frames.sort(key=lambda x: x.timestamp)
        for a, b in zip(frames, frames[1:]):
            if b.timestamp - a.timestamp < min_gap_s:
                report.findings.append(
                    f"{split}/{g}: frames {a.id} and {b.id} only {b.timestamp - a.timestamp:g}s apart"
                )
    return report
