"""Command-line entry point.

    smokedistill [--config run.yaml] [--seed N] <command> [--out DIR] ...

Commands: import, split, pseudolabel, train, eval, fp-eval, bench, ablate,
plus synth (writes a synthetic demo dataset). Exit status is 0 on success,
1 on runtime failure and 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("smokedistill")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str | None:
    if not path.is_file():
        return None
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Run:
    """Collects inputs/outputs of one command for its reproducibility record."""

    def __init__(self, command: str, argv: Sequence[str], cfg: RunConfig, out: Path):
        self.command = command
        self.argv = list(argv)
        self.cfg = cfg
        self.out = out
        self.inputs: dict[str, str | None] = {}
        self.outputs: dict[str, str | None] = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def input(self, path: str | Path) -> Path:
        path = Path(path)
        self.inputs[str(path)] = _sha256(path)
        return path

    def output(self, path: Path) -> Path:
        self.outputs[str(path)] = _sha256(path)
        return path

    def finish(self) -> Path:
        record = {
            "command": self.command,
            "argv": self.argv,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "metadata": {
                "version": __version__,
                "started": self.started,
                "finished": datetime.now(timezone.utc).isoformat(),
            },
        }
        return _write_json(self.out / f"{self.command}.record.json", record)


def _image_root(cfg: RunConfig) -> Path:
    return Path(cfg.paths.image_root) if cfg.paths.image_root else Path(cfg.paths.manifest).parent


def _manifest(run: Run, path: str | Path | None = None):
    from .data import load_manifest

    return load_manifest(run.input(path or run.cfg.paths.manifest))


def _build_student(cfg: RunConfig):
    from .distill.student import reference_student

    return reference_student(cfg.model.widths, seed=cfg.seed)


def _load_trained(run: Run, checkpoint: str | None):
    from .distill.train import load_checkpoint

    cfg = run.cfg
    if checkpoint is None:
        best = Path(cfg.paths.checkpoints_dir) / "best.json"
        if not best.is_file():
            raise FileNotFoundError(f"no --checkpoint given and {best} does not exist (run train first)")
        checkpoint = json.loads(best.read_text())["path"]
    model = _build_student(cfg)
    load_checkpoint(model, run.input(checkpoint))
    model.input_size = tuple(cfg.train.resolution)
    return model.eval()


# ---------------------------------------------------------------- commands

def cmd_synth(run: Run, args) -> None:
    from .synthetic import make_blob_dataset

    split = tuple(args.split) if args.split else None
    manifest, _ = make_blob_dataset(run.out, n_samples=args.n, size=(args.height, args.width),
                                    seed=run.cfg.seed, split_counts=split, shape=args.shape,
                                    smokeless_fraction=args.smokeless_fraction)
    run.output(run.out / "manifest.jsonl")
    print(f"wrote {len(manifest)} synthetic samples to {run.out}")


def cmd_import(run: Run, args) -> None:
    from PIL import Image

    from .data import save_manifest, validate_sample

    manifest = _manifest(run, args.input)
    root = Path(args.image_root) if args.image_root else Path(args.input).parent
    if args.check_images:
        for s in manifest:
            with Image.open(root / s.image_path) as im:
                validate_sample(s, im.size)
    dest = run.output(save_manifest(manifest, run.out / "manifest.jsonl"))
    counts = {k.value: v for k, v in manifest.split_counts().items()}
    print(f"imported {len(manifest)} samples -> {dest} {counts}")


def cmd_split(run: Run, args) -> None:
    from .data import DatasetManifest, Source, save_manifest
    from .splitter import group_split, temporal_thin, verify_split

    cfg = run.cfg
    manifest = _manifest(run)
    uav = [s for s in manifest if s.source is Source.UAV]
    kept_uav = set(temporal_thin(uav, cfg.split.min_gap_s))
    samples = [s for s in manifest if s.source is not Source.UAV or s.id in kept_uav]
    pinned = None
    if cfg.split.pinned_test:
        pinned = [ln.strip() for ln in run.input(cfg.split.pinned_test).read_text().splitlines() if ln.strip()]
    assignment = group_split(samples, cfg.split.ratios, seed=cfg.seed, pinned_test=pinned)
    out_manifest = DatasetManifest(tuple(s.with_split(assignment.assignment[s.id]) for s in samples),
                                   version=manifest.version)
    run.output(save_manifest(out_manifest, run.out / "manifest.jsonl"))
    run.output(assignment.save(run.out / "splits.jsonl"))
    report = verify_split(out_manifest, cfg.split.min_gap_s)
    run.output(_write_json(run.out / "split_verification.json", report.to_dict()))
    print(f"thinned {len(uav) - len(kept_uav)} UAV frame(s); {len(samples)} samples split")
    print(report.table())
    for finding in report.findings:
        print(f"FINDING: {finding}")
    if not report.ok:
        raise RuntimeError("split verification failed")


def _teacher(cfg: RunConfig):
    from .pseudolabel import ExternalProcessTeacher, oracle_box_teacher

    t = cfg.teacher
    if t.kind == "oracle":
        return oracle_box_teacher(t.oracle_shape, cfg.seed, t.oracle_jitter_px)
    if t.kind == "external":
        command = cfg.teacher_command()
        if not command:
            raise ConfigError("teacher.kind=external needs teacher.command or $SMOKEDISTILL_TEACHER_CMD")
        return ExternalProcessTeacher(command, t.external_kind)
    raise ConfigError(f"teacher.kind must be 'oracle' or 'external', got {t.kind!r}")


def cmd_pseudolabel(run: Run, args) -> None:
    from .pseudolabel import INDEX_NAME, run_pseudolabel_job

    cfg = run.cfg
    manifest = _manifest(run)
    teacher = _teacher(cfg)
    try:
        labels = run_pseudolabel_job(manifest, teacher, run.out, cfg.teacher.score_threshold,
                                     image_root=_image_root(cfg), workers=cfg.teacher.workers,
                                     clip_to_boxes=cfg.teacher.clip_to_boxes)
    finally:
        close = getattr(teacher, "close", None)
        if close:
            close()
    run.output(run.out / INDEX_NAME)
    print(f"{len(labels)} pseudo-label(s) from {labels.teacher} in {run.out}")


def _train(cfg: RunConfig, run: Run, manifest, labels_dir: Path, ckpt_dir: Path, loss=None):
    from .distill.train import select_best_checkpoint, train_student
    from .pseudolabel import PseudoLabelSet

    labels = PseudoLabelSet.load(run.input(labels_dir / "index.jsonl"))
    model = _build_student(cfg)
    tcfg = cfg.train_config(loss)
    history = train_student(model, manifest, labels, tcfg, image_root=_image_root(cfg),
                            checkpoint_dir=ckpt_dir, log_path=ckpt_dir / "train_log.jsonl")
    best = select_best_checkpoint(history)
    _write_json(ckpt_dir / "best.json", best.to_dict())
    _write_json(ckpt_dir / "history.json", [r.to_dict() for r in history])
    return model, history, best


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    manifest = _manifest(run)
    labels_dir = Path(args.labels or cfg.paths.masks_dir)
    _, history, best = _train(cfg, run, manifest, labels_dir, run.out)
    for name in ("best.json", "history.json", "train_log.jsonl"):
        run.output(run.out / name)
    print(f"trained {len(history)} epoch(s); best epoch {best.epoch} "
          f"(val mIoU {history.records[best.epoch - 1].val_miou:.3f}) -> {best.path}")


def _test_set(cfg: RunConfig, run: Run, manifest):
    from .data import Split, load_image, read_mask
    from .pseudolabel import mask_filename

    root = _image_root(cfg)
    gt_dir = Path(cfg.paths.gt_dir)
    samples = manifest.select(Split.TEST)
    if not samples:
        raise ValueError("manifest has no TEST samples")
    out = []
    for s in samples:
        gt_path = gt_dir / mask_filename(s.id)
        if not gt_path.is_file():
            raise FileNotFoundError(f"missing ground-truth mask for test sample {s.id}: {gt_path}")
        out.append((s, load_image(root / s.image_path), read_mask(gt_path, (s.width, s.height))))
    return out


def _overlay(image: np.ndarray, mask) -> np.ndarray:
    out = image.astype(np.float64).copy()
    m = mask.data.astype(bool)
    out[m] = 0.55 * out[m] + 0.45 * np.array([255.0, 40.0, 40.0])
    return out.astype(np.uint8)


def cmd_eval(run: Run, args) -> None:
    from .data import read_mask, save_image
    from .metrics import binarize, evaluate_model, summarize
    from .pseudolabel import mask_filename

    cfg = run.cfg
    manifest = _manifest(run)
    test = _test_set(cfg, run, manifest)
    if args.predictions:
        # precomputed {0,255} masks named like the ground truth, e.g. from an external model
        pred_dir = Path(args.predictions)
        preds = {s.id: read_mask(run.input(pred_dir / mask_filename(s.id)), (s.width, s.height))
                 for s, _, _ in test}
        name = pred_dir.name
        report = summarize([(preds[s.id], gt) for s, _, gt in test], [s.source.value for s, _, _ in test])
    else:
        model = _load_trained(run, args.checkpoint)
        name = model.descriptor
        report = evaluate_model(model, [(s.source.value, img, gt) for s, img, gt in test], cfg.eval.threshold)
        preds = {s.id: binarize(model.predict_proba(img), cfg.eval.threshold) for s, img, _ in test} \
            if args.overlays else {}
    run.output(_write_json(run.out / "eval_report.json", report.to_dict()))
    table = report.table(name)
    (run.out / "eval_table.txt").write_text(table + "\n")
    run.output(run.out / "eval_table.txt")
    if args.overlays:
        for s, img, _ in test:
            save_image(_overlay(img, preds[s.id]), run.out / "overlays" / f"{s.id}.png")
    print(table)


def cmd_fp_eval(run: Run, args) -> None:
    from .data import load_image
    from .metrics import binarize, false_positive_rate

    cfg = run.cfg
    neg_path = args.negatives or cfg.paths.negatives_manifest
    if not neg_path:
        raise ConfigError("fp-eval needs --negatives or paths.negatives_manifest")
    negatives = _manifest(run, neg_path)
    root = Path(args.image_root) if args.image_root else Path(neg_path).parent
    with_boxes = [s.id for s in negatives if s.boxes]
    if with_boxes:
        raise ValueError(f"negatives manifest contains boxed (smoky) samples: {with_boxes[:5]}")
    model = _load_trained(run, args.checkpoint)
    preds = [binarize(model.predict_proba(load_image(root / s.image_path)), cfg.eval.threshold)
             for s in negatives]
    rate = false_positive_rate(preds, cfg.eval.fp_min_area)
    payload = {"fp_rate": rate, "images": len(preds), "flagged": round(rate * len(preds)),
               "min_area": cfg.eval.fp_min_area}
    run.output(_write_json(run.out / "fp_report.json", payload))
    print(f"FP rate {rate:.3f} ({payload['flagged']}/{len(preds)} images)")


def cmd_bench(run: Run, args) -> None:
    from .bench import TorchRunner, measure_fps

    cfg = run.cfg
    model = _load_trained(run, args.checkpoint) if args.checkpoint else _build_student(cfg)
    b = cfg.bench
    runner = TorchRunner(model, b.device, b.half)
    report = measure_fps(runner, b.input_dims, b.warmup, b.iters, device=b.device,
                         precision="fp16" if b.half else "fp32")
    run.output(report.save(run.out / "bench_report.json"))
    run.output(report.save_histogram(run.out / "bench_latency.png"))
    extra = f", compute-only {report.compute_fps:.2f} fps" if report.compute_fps else ""
    print(f"{model.descriptor} @ {tuple(b.input_dims)}: {report.fps:.2f} fps "
          f"(mean {report.mean_latency_ms:.2f} ms){extra}")


def _mark(on: bool) -> str:
    return "+" if on else "-"


def cmd_ablate(run: Run, args) -> None:
    from .distill.losses import ABLATION_GRID
    from .distill.train import load_checkpoint
    from .metrics import evaluate_model

    cfg = run.cfg
    manifest = _manifest(run)
    labels_dir = Path(args.labels or cfg.paths.masks_dir)
    test = _test_set(cfg, run, manifest)
    base = cfg.loss_config()
    rows = []
    for omitted in ABLATION_GRID:
        loss = base.without(*omitted)
        tag = "full" if not omitted else "no-" + "-".join(f"l{i}" for i in omitted)
        model, history, best = _train(cfg, run, manifest, labels_dir, run.out / tag, loss)
        load_checkpoint(model, best)
        report = evaluate_model(model, [(s.source.value, img, gt) for s, img, gt in test], cfg.eval.threshold)
        rows.append({
            "terms": list(loss.enabled),
            "omitted": list(omitted),
            "best_epoch": best.epoch,
            "val_miou": history.records[best.epoch - 1].val_miou,
            "test_miou": report.miou,
        })
    run.output(_write_json(run.out / "ablation.json", rows))
    lines = ["  l0 l1 l2 l3 |   val    test", "-" * 29]
    for r in rows:
        lines.append("  " + "  ".join(_mark(on) for on in r["terms"])
                     + f"  | {r['val_miou']:.3f}  {r['test_miou']:.3f}")
    (run.out / "ablation_table.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic blob dataset", lambda c: "data"),
    "import": (cmd_import, "validate a manifest and write it normalised", lambda c: str(Path(c.paths.manifest).parent)),
    "split": (cmd_split, "temporal thinning + group-disjoint split", lambda c: str(Path(c.paths.manifest).parent)),
    "pseudolabel": (cmd_pseudolabel, "generate teacher pseudo-labels", lambda c: c.paths.masks_dir),
    "train": (cmd_train, "train the student", lambda c: c.paths.checkpoints_dir),
    "eval": (cmd_eval, "test-set metrics against ground truth", lambda c: c.paths.reports_dir),
    "fp-eval": (cmd_fp_eval, "false-positive rate on smokeless images", lambda c: c.paths.reports_dir),
    "bench": (cmd_bench, "frame-rate benchmark", lambda c: c.paths.reports_dir),
    "ablate": (cmd_ablate, "loss-term ablation grid", lambda c: str(Path(c.paths.reports_dir) / "ablation")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smokedistill", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help="output directory for this command")
        if name == "synth":
            p.add_argument("--n", type=int, default=50)
            p.add_argument("--height", type=int, default=96)
            p.add_argument("--width", type=int, default=96)
            p.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
            p.add_argument("--shape", choices=("soft_box", "gaussian"), default="soft_box")
            p.add_argument("--smokeless-fraction", type=float, default=0.06,
                           help="share of images without smoke (1.0 for a negatives set)")
        if name == "import":
            p.add_argument("--input", required=True, help="manifest to import")
            p.add_argument("--image-root")
            p.add_argument("--check-images", action="store_true", help="verify image sizes on disk")
        if name in ("train", "ablate"):
            p.add_argument("--labels", help="pseudo-label directory (default: paths.masks_dir)")
        if name in ("eval", "fp-eval", "bench"):
            p.add_argument("--checkpoint", help="checkpoint file (default: best of last training run)")
        if name == "eval":
            p.add_argument("--overlays", action="store_true", help="write prediction overlay images")
            p.add_argument("--predictions", help="directory of precomputed prediction masks (<id>.png)")
        if name == "fp-eval":
            p.add_argument("--negatives", help="manifest of smokeless images")
            p.add_argument("--image-root")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        fn, _, default_out = COMMANDS[args.command]
        out = Path(args.out or default_out(cfg))
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, argv, cfg, out)
        if args.config:
            run.input(args.config)
        fn(run, args)
        run.finish()
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
