import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osteoscreen.data import (
    LandmarkAnnotation, PhantomSpec, augment, build_sample, extract_rois, generate_phantoms, hflip,
    load_annotations, load_dataset, parse_annotations, read_pgm, resize_patch, stretch, write_dataset, write_pgm,
)
from osteoscreen.data.pgm import decode_pgm, encode_pgm
from osteoscreen.errors import InputError, ParseError
from osteoscreen.network import NORMAL, OSTEOPOROSIS

PTS = " ".join(f"{10 + i},{20 + i}" for i in range(8))


def ann_at(points, image_id="img"):
    return LandmarkAnnotation(image_id, "img.pgm", NORMAL, tuple(points))


# ---------------------------------------------------------------- annotations


def test_load_two_records(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text(f"# header\na1 images/a1.pgm OSTEOPOROSIS {PTS}\n\na2 images/a2.pgm NORMAL {PTS}\n")
    recs = load_annotations(f)
    assert [r.image_id for r in recs] == ["a1", "a2"]
    assert recs[0].label == OSTEOPOROSIS and recs[1].label == NORMAL
    assert recs[0].landmarks[3] == (13.0, 23.0)


def test_seven_landmarks_names_record():
    seven = " ".join(PTS.split()[:7])
    with pytest.raises(ParseError, match="bad7"):
        parse_annotations(f"bad7 x.pgm NORMAL {seven}")


def test_empty_file_is_empty_list(tmp_path):
    f = tmp_path / "empty.txt"
    f.write_text("")
    assert load_annotations(f) == []


@pytest.mark.parametrize("line", [
    f"a x.pgm SICK {PTS}",
    "a x.pgm NORMAL",
    "a",
    f"a x.pgm NORMAL {PTS.replace('10,20', '-1,20')}",
    f"a x.pgm NORMAL {PTS.replace('10,20', 'nan,20')}",
    f"a x.pgm NORMAL {PTS.replace('10,20', '10;20')}",
])
def test_bad_records(line):
    with pytest.raises(ParseError):
        parse_annotations(line)


def test_duplicate_id():
    with pytest.raises(ParseError, match="duplicate"):
        parse_annotations(f"a x.pgm NORMAL {PTS}\na y.pgm NORMAL {PTS}")


def test_annotation_roundtrip():
    recs = parse_annotations(f"a1 images/a1.pgm OSTEOPOROSIS {PTS}")
    assert parse_annotations(recs[0].to_line()) == recs


# ---------------------------------------------------------------- pgm


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_roundtrip(tmp_path, maxval):
    img = np.random.default_rng(0).integers(0, maxval + 1, size=(5, 7)) / maxval
    write_pgm(tmp_path / "x.pgm", img, maxval)
    np.testing.assert_allclose(read_pgm(tmp_path / "x.pgm"), img, atol=1e-12)


def test_pgm_header_with_comment():
    buf = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
    np.testing.assert_array_equal(decode_pgm(buf), [[0.0, 1.0]])


def test_pgm_16bit_is_big_endian():
    assert encode_pgm(np.array([[1.0]]), 65535).endswith(b"\xff\xff")
    np.testing.assert_allclose(decode_pgm(b"P5 1 1 65535\n\x01\x00"), [[256 / 65535]])


def test_pgm_rejects_bad_input():
    with pytest.raises(ParseError):
        decode_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(ParseError):
        decode_pgm(b"P5\n2 2\n255\n\x00")


# ---------------------------------------------------------------- extract_rois


def test_interior_crop_is_direct_slice():
    img = np.random.default_rng(1).uniform(size=(300, 300))
    patches = extract_rois(img, ann_at([(150, 150)] * 8), 100)
    np.testing.assert_array_equal(patches[0], img[100:200, 100:200])


def test_corner_crop_matches_pad_then_slice_oracle():
    img = np.random.default_rng(2).uniform(size=(40, 50))
    side = 10
    padded = np.pad(img, side, mode="edge")
    for x, y in [(0, 0), (49, 0), (0, 39), (49, 39), (3, 2)]:
        got = extract_rois(img, ann_at([(x, y)] * 8), side)[0]
        top, left = y - side // 2 + side, x - side // 2 + side
        np.testing.assert_array_equal(got, padded[top:top + side, left:left + side])
    tl = extract_rois(img, ann_at([(0, 0)] * 8), side)[0]
    np.testing.assert_array_equal(tl[:5, :5], np.full((5, 5), img[0, 0]))


def test_constant_image_constant_patches():
    patches = extract_rois(np.full((60, 60), 0.3), ann_at([(i * 7, i * 5) for i in range(8)]), 20)
    assert len(patches) == 8 and all(np.all(p == 0.3) for p in patches)


def test_patch_order_follows_landmarks():
    img = np.arange(100.0 * 100).reshape(100, 100)
    pts = [(10 + 10 * i, 50) for i in range(8)]
    patches = extract_rois(img, ann_at(pts), 5)
    assert [p[2, 2] for p in patches] == [img[50, x] for x, _ in pts]


def test_landmark_outside_image():
    with pytest.raises(InputError, match="img"):
        extract_rois(np.zeros((10, 10)), ann_at([(12, 3)] * 8), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(-15, 15), st.integers(-15, 15))
def test_crop_translation_consistent(dx, dy):
    img = np.random.default_rng(3).uniform(size=(80, 80))
    shifted = np.roll(img, (dy, dx), axis=(0, 1))
    a = extract_rois(img, ann_at([(40, 40)] * 8), 20)[0]
    b = extract_rois(shifted, ann_at([(40 + dx, 40 + dy)] * 8), 20)[0]
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- resize


def test_resize_identity_and_constant():
    p = np.random.default_rng(4).uniform(size=(9, 9))
    np.testing.assert_array_equal(resize_patch(p, 9), p)
    np.testing.assert_allclose(resize_patch(np.full((9, 9), 0.7), 20), 0.7)


def test_resize_checkerboard_center():
    out = resize_patch(np.array([[0.0, 1.0], [1.0, 0.0]]), 3)
    # corner-aligned grid: output pixel i samples input coordinate i * (2 - 1) / (3 - 1) = i / 2
    expected = np.array([[0.0, 0.5, 1.0], [0.5, 0.5, 0.5], [1.0, 0.5, 0.0]])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_resize_corners_preserved_and_range():
    p = np.random.default_rng(5).uniform(size=(100, 100))
    out = resize_patch(p, 224)
    assert out.shape == (224, 224)
    assert out[0, 0] == pytest.approx(p[0, 0]) and out[-1, -1] == pytest.approx(p[-1, -1])
    assert p.min() <= out.min() and out.max() <= p.max()


def test_resize_rejects_bad_side():
    with pytest.raises(InputError):
        resize_patch(np.zeros((4, 4)), 0)
    with pytest.raises(InputError):
        resize_patch(np.zeros((4, 5)), 3)


# ---------------------------------------------------------------- augment


class ForcedRng:
    def __init__(self, sx, sy, flip):
        self.vals, self.flip = (sx, sy), flip

    def uniform(self, lo, hi, size):
        return np.array(self.vals)

    def random(self):
        return 0.0 if self.flip else 0.9


def test_augment_identity_when_forced():
    p = np.random.default_rng(6).uniform(size=(16, 16))
    np.testing.assert_allclose(augment(p, ForcedRng(1.0, 1.0, False)), p, atol=1e-6)
    np.testing.assert_array_equal(augment(p, ForcedRng(1.0, 1.0, True)), p[:, ::-1])


def test_double_flip_identity():
    p = np.random.default_rng(7).uniform(size=(16, 16))
    np.testing.assert_array_equal(hflip(hflip(p)), p)


def test_stretch_moves_vertical_edge():
    side, e = 33, 10
    img = np.zeros((side, side))
    img[:, e:] = 1.0
    out = stretch(img, 1.1, 1.0)
    c = (side - 1) / 2
    src = c + (np.arange(side) - c) / 1.1
    # the input profile ramps linearly from 0 at column e-1 to 1 at column e
    np.testing.assert_allclose(out[5], np.clip(src - (e - 1), 0, 1), atol=1e-12)
    # 0.5 crossing: input e - 0.5 maps to output c + 1.1 * (e - 0.5 - c)
    crossing = c + 1.1 * (e - 0.5 - c)
    j = np.searchsorted(out[5], 0.5)
    assert j - 1 < crossing <= j
    assert crossing < e - 0.5  # edge left of centre moves outward


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_keeps_range(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(size=(12, 12))
    out = augment(p, r)
    assert out.shape == p.shape and 0 <= out.min() and out.max() <= 1
    assert p.min() - 1e-12 <= out.min() and out.max() <= p.max() + 1e-12



# ---------------------------------------------------------------- phantoms


def test_phantoms_deterministic():
    a = generate_phantoms(PhantomSpec(seed=5), 2)
    b = generate_phantoms(PhantomSpec(seed=5), 2)
    assert all(np.array_equal(x[0], y[0]) and x[1] == y[1] for x, y in zip(a, b))
    c = generate_phantoms(PhantomSpec(seed=6), 2)
    assert not np.array_equal(a[0][0], c[0][0])


def test_phantom_counts_and_labels():
    items = generate_phantoms(PhantomSpec(seed=0, height=64, width=128), 3)
    labels = [a.label for _, a in items]
    assert labels.count(OSTEOPOROSIS) == 3 and labels.count(NORMAL) == 3
    assert all(len(a.landmarks) == 8 for _, a in items)
    assert all(0 <= img.min() and img.max() <= 1 for img, _ in items)


def test_delta_zero_classes_share_distribution():
    spec = PhantomSpec(seed=0, delta=0.0)
    assert spec.class_params(OSTEOPOROSIS) == spec.class_params(NORMAL)


def test_delta_validation():
    with pytest.raises(ValueError):
        PhantomSpec(delta=1.5)
    with pytest.raises(ValueError):
        generate_phantoms(PhantomSpec(), 0)


def test_delta_one_separates_mean_intensity():
    items = generate_phantoms(PhantomSpec(seed=0, delta=1.0), 20)
    samples = [build_sample(img, a, 32, 16) for img, a in items]
    m = np.array([s.patches.mean() for s in samples])
    lab = np.array([s.label for s in samples])
    op, no = m[lab == OSTEOPOROSIS], m[lab == NORMAL]
    pooled = np.sqrt((op.var() + no.var()) / 2)
    assert (no.mean() - op.mean()) / pooled > 1.0


def test_samples_are_finite_unit_range():
    items = generate_phantoms(PhantomSpec(seed=1, delta=0.5), 2)
    for img, a in items:
        s = build_sample(img, a, 32, 16)
        assert s.patches.shape == (8, 16, 16)
        assert np.all(np.isfinite(s.patches)) and s.patches.min() >= 0 and s.patches.max() <= 1


def test_dataset_disk_roundtrip(tmp_path):
    items = generate_phantoms(PhantomSpec(seed=2, height=64, width=128), 2)
    ann_path = write_dataset(tmp_path, items)
    loaded = load_dataset(ann_path, crop_side=16, side=8)
    assert [s.image_id for s in loaded] == [a.image_id for _, a in items]
    direct = [build_sample(img, a, 16, 8) for img, a in items]
    for x, y in zip(loaded, direct):
        np.testing.assert_allclose(x.patches, y.patches, atol=1e-4)


def test_dataset_missing_image_names_id(tmp_path):
    (tmp_path / "annotations.txt").write_text(f"ghost images/ghost.pgm NORMAL {PTS}\n")
    with pytest.raises(FileNotFoundError, match="ghost"):
        load_dataset(tmp_path)
