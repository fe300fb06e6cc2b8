import itertools
import math
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smokedistill.data import BoxAnnotation, DatasetManifest, ImageSample, SegMask, Split, save_image
from smokedistill.pseudolabel import (ExternalProcessTeacher, OracleBoxTeacher, OracleShape, PseudoLabelJobError,
                                      PseudoLabelSet, TeacherAdapter, TeacherError, TeacherKind, TeacherOutput,
                                      generate_pseudo_label, mask_filename, oracle_box_teacher,
                                      run_pseudolabel_job)

FILL = oracle_box_teacher(OracleShape.FILL_BOX)


def _image(h=8, w=8):
    return np.zeros((h, w, 3), np.uint8)


def test_zero_boxes_gives_empty_mask():
    class Exploding(TeacherAdapter):
        kind = TeacherKind.BOX_PROMPTED

        def segment(self, image, boxes):
            raise AssertionError("teacher must not be called for smokeless images")

    m = generate_pseudo_label(_image(), [], Exploding())
    assert m == SegMask.zeros(8, 8)


def test_fill_box_single_box_is_rectangle():
    box = BoxAnnotation(1, 2, 5, 5)
    m = generate_pseudo_label(_image(), [box], FILL)
    assert m == SegMask.from_boxes([box], 8, 8)
    assert m.positives == 12


def test_overlapping_boxes_union_has_20_positives():
    a, b = BoxAnnotation(0, 0, 4, 3), BoxAnnotation(2, 1, 6, 4)
    assert a.area == b.area == 12
    m = generate_pseudo_label(_image(), [a, b], FILL)
    brute = sum(1 for y in range(8) for x in range(8)
                if any(bx.x_min <= x < bx.x_max and bx.y_min <= y < bx.y_max for bx in (a, b)))
    assert m.positives == brute == 20


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60))
def test_inscribed_ellipse_pixel_count(w, h):
    box = BoxAnnotation(2, 3, 2 + w, 3 + h)
    m = oracle_box_teacher(OracleShape.INSCRIBED_ELLIPSE).segment(_image(64, 64), [box]).masks[0]
    expected = math.ceil(math.pi * (w / 2) * (h / 2))
    assert abs(int(m.sum()) - expected) <= 2
    assert not (m & ~SegMask.from_boxes([box], 64, 64).data.astype(bool)).any()


def test_oracle_is_deterministic_for_seed():
    boxes = [BoxAnnotation(1, 1, 9, 7), BoxAnnotation(4, 2, 12, 12)]
    t1 = OracleBoxTeacher(OracleShape.INSCRIBED_ELLIPSE, noise_seed=3, jitter_px=2)
    t2 = OracleBoxTeacher(OracleShape.INSCRIBED_ELLIPSE, noise_seed=3, jitter_px=2)
    a, b = t1.segment(_image(16, 16), boxes), t2.segment(_image(16, 16), boxes)
    for x, y in zip(a.masks, b.masks):
        np.testing.assert_array_equal(x, y)
    assert t1.kind is TeacherKind.SYNTHETIC_ORACLE


boxes_st = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(1, 8), st.integers(1, 8))
    .filter(lambda b: b[0] < b[2] and b[1] < b[3])
    .map(lambda b: BoxAnnotation(*b)),
    min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(boxes_st, st.integers(0, 3))
def test_fill_box_union_properties(boxes, seed):
    teacher = OracleBoxTeacher(OracleShape.FILL_BOX, noise_seed=seed)
    m = generate_pseudo_label(_image(), boxes, teacher)
    union = SegMask.from_boxes(boxes, 8, 8)
    assert not (m.data & ~union.data.astype(bool)).any()
    separate = np.zeros((8, 8), bool)
    for b in boxes:
        separate |= generate_pseudo_label(_image(), [b], teacher).data.astype(bool)
    np.testing.assert_array_equal(m.data, separate)
    for perm in itertools.islice(itertools.permutations(boxes), 6):
        assert generate_pseudo_label(_image(), list(perm), teacher) == m


@settings(max_examples=40, deadline=None)
@given(boxes_st, st.integers(0, 100))
def test_jittered_oracle_is_order_invariant(boxes, seed):
    teacher = OracleBoxTeacher(OracleShape.FILL_BOX, noise_seed=seed, jitter_px=2)
    m = generate_pseudo_label(_image(), boxes, teacher)
    assert generate_pseudo_label(_image(), boxes[::-1], teacher) == m


class ScoredTeacher(TeacherAdapter):
    kind = TeacherKind.BOX_TRAINED_INSTANCE

    def __init__(self, scores):
        self.scores = scores

    def segment(self, image, boxes):
        h, w = image.shape[:2]
        masks = []
        for i in range(len(self.scores)):
            m = np.zeros((h, w), bool)
            m[i, :] = True
            masks.append(m)
        return TeacherOutput(tuple(masks), tuple(self.scores))


def test_instance_teacher_score_threshold():
    m = generate_pseudo_label(_image(), [BoxAnnotation(0, 0, 8, 8)], ScoredTeacher([0.9, 0.5, 0.2]), 0.5)
    assert m.data[:, 0].tolist() == [1, 1, 0, 0, 0, 0, 0, 0]


def test_box_prompted_mask_count_enforced():
    class Short(TeacherAdapter):
        kind = TeacherKind.BOX_PROMPTED

        def segment(self, image, boxes):
            return TeacherOutput((), ())

    with pytest.raises(TeacherError, match="returned 0 masks"):
        generate_pseudo_label(_image(), [BoxAnnotation(0, 0, 2, 2)], Short(), sample_id="s1")


def test_teacher_mask_dimension_mismatch():
    class Wrong(TeacherAdapter):
        kind = TeacherKind.BOX_PROMPTED

        def segment(self, image, boxes):
            return TeacherOutput((np.ones((3, 3), bool),), (1.0,))

    with pytest.raises(TeacherError, match="shape"):
        generate_pseudo_label(_image(), [BoxAnnotation(0, 0, 2, 2)], Wrong())


def test_teacher_failure_carries_sample_id():
    class Broken(TeacherAdapter):
        kind = TeacherKind.BOX_PROMPTED

        def segment(self, image, boxes):
            raise RuntimeError("gpu on fire")

    with pytest.raises(TeacherError, match="sample img-9") as info:
        generate_pseudo_label(_image(), [BoxAnnotation(0, 0, 2, 2)], Broken(), sample_id="img-9")
    assert info.value.sample_id == "img-9"


def test_clip_to_boxes():
    class Spill(TeacherAdapter):
        kind = TeacherKind.BOX_PROMPTED

        def segment(self, image, boxes):
            return TeacherOutput((np.ones(image.shape[:2], bool),), (1.0,))

    box = BoxAnnotation(2, 2, 4, 4)
    assert generate_pseudo_label(_image(), [box], Spill(), clip_to_boxes=True).positives == 4
    assert generate_pseudo_label(_image(), [box], Spill()).positives == 64


# ---------------------------------------------------------------- jobs

def _manifest(tmp_path, n=3):
    samples = []
    for i in range(n):
        save_image(_image(), tmp_path / "img" / f"s{i}.png")
        samples.append(ImageSample(f"s{i}", f"img/s{i}.png", 8, 8, (BoxAnnotation(i, 0, i + 3, 4),),
                                   split=Split.TRAIN if i else Split.VAL))
    return DatasetManifest(tuple(samples))


class CountingTeacher(OracleBoxTeacher):
    def __init__(self, fail_on=None):
        super().__init__(OracleShape.FILL_BOX)
        self.calls = 0
        self.fail_on = fail_on

    def segment(self, image, boxes):
        self.calls += 1
        if self.fail_on is not None and boxes[0].x_min == self.fail_on:
            raise TeacherError("refused")
        return super().segment(image, boxes)


def test_job_writes_all_masks(tmp_path):
    m = _manifest(tmp_path)
    labels = run_pseudolabel_job(m, FILL, tmp_path / "out", image_root=tmp_path)
    assert sorted(labels.masks) == ["s0", "s1", "s2"]
    assert sorted(p.name for p in (tmp_path / "out").glob("*.png")) == ["s0.png", "s1.png", "s2.png"]
    for s in m:
        assert labels.read(s.id, (8, 8)) == SegMask.from_boxes(s.boxes, 8, 8)
    reloaded = PseudoLabelSet.load(tmp_path / "out")
    assert reloaded.masks == labels.masks
    assert reloaded.teacher == FILL.descriptor


def test_job_resumes_only_missing(tmp_path):
    m = _manifest(tmp_path)
    run_pseudolabel_job(m, FILL, tmp_path / "out", image_root=tmp_path)
    (tmp_path / "out" / "s1.png").unlink()
    teacher = CountingTeacher()
    labels = run_pseudolabel_job(m, teacher, tmp_path / "out", image_root=tmp_path)
    assert teacher.calls == 1
    assert len(labels) == 3


def test_job_regenerates_corrupt_mask(tmp_path):
    m = _manifest(tmp_path)
    run_pseudolabel_job(m, FILL, tmp_path / "out", image_root=tmp_path)
    (tmp_path / "out" / "s2.png").write_bytes(b"garbage")
    teacher = CountingTeacher()
    run_pseudolabel_job(m, teacher, tmp_path / "out", image_root=tmp_path)
    assert teacher.calls == 1


def test_job_failure_isolation(tmp_path):
    m = _manifest(tmp_path)
    with pytest.raises(PseudoLabelJobError) as info:
        run_pseudolabel_job(m, CountingTeacher(fail_on=1), tmp_path / "out", image_root=tmp_path)
    err = info.value
    assert list(err.failures) == ["s1"]
    assert "s1" in str(err)
    assert sorted(err.partial.masks) == ["s0", "s2"]
    assert (tmp_path / "out" / "s0.png").is_file() and (tmp_path / "out" / "s2.png").is_file()
    assert not (tmp_path / "out" / "s1.png").exists()


def test_job_threaded_matches_serial(tmp_path):
    m = _manifest(tmp_path, n=6)
    a = run_pseudolabel_job(m, FILL, tmp_path / "a", image_root=tmp_path)
    b = run_pseudolabel_job(m, CountingTeacher(), tmp_path / "b", image_root=tmp_path, workers=3)
    for sid in a.masks:
        assert a.read(sid) == b.read(sid)


def test_job_skips_test_split_by_default(tmp_path):
    m = _manifest(tmp_path)
    m = DatasetManifest(tuple(s.with_split(Split.TEST) if s.id == "s2" else s for s in m))
    labels = run_pseudolabel_job(m, FILL, tmp_path / "out", image_root=tmp_path)
    assert "s2" not in labels


def test_index_paths_are_relative(tmp_path, monkeypatch):
    m = _manifest(tmp_path)
    monkeypatch.chdir(tmp_path)
    run_pseudolabel_job(m, FILL, "work/labels", image_root=".")
    labels = PseudoLabelSet.load("work/labels/index.jsonl")
    assert labels.read("s0", (8, 8)).positives == 12


def test_mask_filename_sanitises():
    assert mask_filename("a/b c") == "a_b_c.png"


TEACHER_SCRIPT = textwrap.dedent("""
    import json, sys
    import numpy as np
    from PIL import Image
    for line in sys.stdin:
        req = json.loads(line)
        if not req["boxes"]:
            print(json.dumps({"error": "no boxes"}), flush=True)
            continue
        w, h = Image.open(req["image_path"]).size
        masks = []
        for i, (x0, y0, x1, y1) in enumerate(req["boxes"]):
            m = np.zeros((h, w), np.uint8)
            m[y0:y1, x0:x1] = 255
            path = req["image_path"] + f".{i}.png"
            Image.fromarray(m).save(path)
            masks.append({"path": path, "score": 0.9})
        print(json.dumps({"masks": masks}), flush=True)
""")


def test_external_process_teacher(tmp_path):
    script = tmp_path / "teacher.py"
    script.write_text(TEACHER_SCRIPT)
    teacher = ExternalProcessTeacher([sys.executable, str(script)], TeacherKind.BOX_PROMPTED)
    try:
        boxes = [BoxAnnotation(0, 0, 4, 3), BoxAnnotation(2, 1, 6, 4)]
        m = generate_pseudo_label(_image(), boxes, teacher)
        assert m.positives == 20
        with pytest.raises(TeacherError, match="no boxes"):
            teacher.request(tmp_path / "x.png", [])
        assert teacher.descriptor.startswith("BOX_PROMPTED:external:")
    finally:
        teacher.close()
