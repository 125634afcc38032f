import numpy as np
import pytest

from cspdet.boxes import Box, iou
from cspdet.data import (AUGMENT_OPS, INVERSE_OP, DatasetRecord, augment,
                         letterbox, load_dataset, load_split, split,
                         synth_dataset, write_split_manifests)
from cspdet.errors import DataError
from cspdet.imageio import read_image, write_image


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_dataset(12, root, seed=3, size=128, overlap_ratio=0.5)
    return root


def make_record(w=100, h=80, boxes=(), tags=()):
    img = np.arange(h * w * 3, dtype=np.uint8).reshape(h, w, 3)
    return DatasetRecord("rec", img, tuple(boxes), tuple(tags))


class TestLoad:
    def test_label_scaling(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        write_image(tmp_path / "images" / "a.ppm",
                    np.zeros((400, 400, 3), dtype=np.uint8))
        (tmp_path / "labels" / "a.txt").write_text("0 0.5 0.5 0.25 0.25\n")
        rec = load_dataset(tmp_path)[0]
        assert rec.boxes[0] == Box(200.0, 200.0, 100.0, 100.0, cls=0)

    def test_empty_label_file(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        write_image(tmp_path / "images" / "a.ppm",
                    np.zeros((16, 16, 3), dtype=np.uint8))
        (tmp_path / "labels" / "a.txt").write_text("")
        assert load_dataset(tmp_path)[0].boxes == ()

    def test_out_of_range_coordinate_is_error(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        write_image(tmp_path / "images" / "a.ppm",
                    np.zeros((16, 16, 3), dtype=np.uint8))
        (tmp_path / "labels" / "a.txt").write_text("0 1.2 0.5 0.2 0.2\n")
        with pytest.raises(DataError, match=r"a\.txt:1"):
            load_dataset(tmp_path)

    def test_missing_label_file_warns(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        write_image(tmp_path / "images" / "a.ppm",
                    np.zeros((16, 16, 3), dtype=np.uint8))
        with pytest.warns(UserWarning, match="no label file"):
            recs = load_dataset(tmp_path)
        assert recs[0].boxes == ()

    def test_unknown_tag_is_error(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        (tmp_path / "tags").mkdir()
        write_image(tmp_path / "images" / "a.ppm",
                    np.zeros((16, 16, 3), dtype=np.uint8))
        (tmp_path / "labels" / "a.txt").write_text("")
        (tmp_path / "tags" / "a.txt").write_text("sideways_light\n")
        with pytest.raises(DataError, match="sideways_light"):
            load_dataset(tmp_path)

    def test_loaded_boxes_inside_bounds(self, synth_root):
        for rec in load_dataset(synth_root):
            for b in rec.boxes:
                x1, y1, x2, y2 = b.corners()
                assert 0 <= x1 < x2 <= rec.width
                assert 0 <= y1 < y2 <= rec.height


class TestSplit:
    def _records(self, n):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        return [DatasetRecord(f"r{i}", img, ()) for i in range(n)]

    def test_1000_gives_600_300_100(self):
        parts = split(self._records(1000), (6, 3, 1), seed=0)
        assert [len(p) for p in parts] == [600, 300, 100]

    def test_10_gives_6_3_1(self):
        parts = split(self._records(10), (6, 3, 1), seed=0)
        assert [len(p) for p in parts] == [6, 3, 1]

    def test_deterministic(self):
        recs = self._records(50)
        a = split(recs, (6, 3, 1), seed=9)
        b = split(recs, (6, 3, 1), seed=9)
        assert [[r.image_id for r in p] for p in a] == \
            [[r.image_id for r in p] for p in b]

    def test_disjoint_exhaustive(self):
        recs = self._records(97)
        parts = split(recs, (6, 3, 1), seed=4)
        ids = [r.image_id for p in parts for r in p]
        assert len(ids) == 97 and len(set(ids)) == 97

    def test_too_few_records(self):
        with pytest.raises(DataError):
            split(self._records(2), (6, 3, 1))

    def test_manifest_roundtrip(self, tmp_path):
        recs = self._records(20)
        parts = split(recs, (6, 3, 1), seed=1)
        write_split_manifests(tmp_path, parts)
        back = load_split(tmp_path, recs, "val")
        assert [r.image_id for r in back] == [r.image_id for r in parts[1]]


class TestAugment:
    BOXES = (Box(10.0, 20.0, 4.0, 6.0, cls=0), Box(77.5, 33.5, 9.0, 3.0, cls=0))

    def test_hflip_box_math(self):
        rec = make_record(w=100, boxes=[Box(10, 20, 4, 6, cls=0)])
        out = augment(rec, "hflip")
        assert out.boxes[0] == Box(90.0, 20.0, 4.0, 6.0, cls=0)

    @pytest.mark.parametrize("op", AUGMENT_OPS)
    def test_inverse_restores_bit_exactly(self, op):
        rec = make_record(boxes=self.BOXES)
        back = augment(augment(rec, op), INVERSE_OP[op])
        np.testing.assert_array_equal(back.image, rec.image)
        assert back.boxes == rec.boxes

    def test_rot90_four_times_identity(self):
        rec = make_record(boxes=self.BOXES)
        out = rec
        for _ in range(4):
            out = augment(out, "rot90")
        np.testing.assert_array_equal(out.image, rec.image)
        assert out.boxes == rec.boxes

    def test_rot90_pixels_and_box_consistent(self):
        # single marked pixel: box center must follow it
        img = np.zeros((6, 8, 3), dtype=np.uint8)
        img[1, 2] = 255
        rec = DatasetRecord("r", img, (Box(2.5, 1.5, 1.0, 1.0, cls=0),))
        out = augment(rec, "rot90")
        r, c = np.argwhere(out.image[:, :, 0] == 255)[0]
        b = out.boxes[0]
        assert (b.cx, b.cy) == (c + 0.5, r + 0.5)

    def test_boxes_stay_inside(self):
        rng = np.random.default_rng(5)
        for op in AUGMENT_OPS:
            for _ in range(20):
                w, h = int(rng.integers(20, 60)), int(rng.integers(20, 60))
                bw, bh = rng.uniform(1, 10, 2)
                cx = rng.uniform(bw / 2, w - bw / 2)
                cy = rng.uniform(bh / 2, h - bh / 2)
                rec = DatasetRecord("r", np.zeros((h, w, 3), np.uint8),
                                    (Box(cx, cy, bw, bh, cls=0),))
                out = augment(rec, op)
                x1, y1, x2, y2 = out.boxes[0].corners()
                assert -1e-9 <= x1 < x2 <= out.width + 1e-9
                assert -1e-9 <= y1 < y2 <= out.height + 1e-9


class TestLetterbox:
    def test_identity_at_target(self):
        rec = make_record(w=416, h=416, boxes=[Box(100, 100, 10, 10, cls=0)])
        out, tf = letterbox(rec, 416)
        assert out.image is rec.image
        assert (tf.scale, tf.pad_x, tf.pad_y) == (1.0, 0.0, 0.0)

    def test_portrait_phone_frame(self):
        rec = DatasetRecord("r", np.zeros((1920, 1080, 3), np.uint8), ())
        out, tf = letterbox(rec, 416)
        assert out.image.shape == (416, 416, 3)
        assert tf.scale == pytest.approx(416 / 1920)
        # horizontal padding on both sides of the narrow dimension
        assert out.image[0, 0].tolist() == [114, 114, 114]
        assert tf.pad_x > 0 and tf.pad_y == 0

    def test_box_roundtrip_error_below_1e6(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            w, h = int(rng.integers(40, 800)), int(rng.integers(40, 800))
            rec = DatasetRecord("r", np.zeros((h, w, 3), np.uint8), ())
            _, tf = letterbox(rec, 416)
            b = Box(float(rng.uniform(5, w - 5)), float(rng.uniform(5, h - 5)),
                    float(rng.uniform(1, 10)), float(rng.uniform(1, 10)))
            back = tf.invert_box(tf.apply_box(b))
            assert abs(back.cx - b.cx) < 1e-6
            assert abs(back.cy - b.cy) < 1e-6
            assert abs(back.w - b.w) < 1e-6
            assert abs(back.h - b.h) < 1e-6

    def test_size_must_be_multiple_of_32(self):
        with pytest.raises(DataError):
            letterbox(make_record(), 100)


class TestSynth:
    def test_boxes_match_drawn_blobs(self, synth_root):
        recs = load_dataset(synth_root)
        assert len(recs) == 12
        assert all(len(r.boxes) >= 1 for r in recs)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synth_dataset(4, a, seed=11, size=64)
        synth_dataset(4, b, seed=11, size=64)
        for sub in ("images", "labels", "tags"):
            for fa in sorted((a / sub).iterdir()):
                fb = b / sub / fa.name
                assert fa.read_bytes() == fb.read_bytes(), fa.name

    def test_labels_reload_exactly(self, tmp_path):
        recs = synth_dataset(5, tmp_path, seed=2, size=128)
        loaded = {r.image_id: r for r in load_dataset(tmp_path)}
        for rec in recs:
            got = loaded[rec.image_id].boxes
            assert got == rec.boxes  # power-of-two size keeps labels exact

    def test_overlap_injection(self, tmp_path):
        recs = synth_dataset(30, tmp_path, seed=7, size=128, overlap_ratio=1.0)
        tagged = [r for r in recs if "high_overlap" in r.tags]
        assert tagged, "overlap injection produced no flagged images"
        for rec in tagged:
            best = max(iou(p, q) for i, p in enumerate(rec.boxes)
                       for q in rec.boxes[i + 1:])
            assert best >= 0.3

    def test_tag_families_present(self, synth_root):
        recs = load_dataset(synth_root)
        for rec in recs:
            assert len(rec.tags) == 3

    def test_augment_involution_on_loaded_synth(self, synth_root):
        # acceptance-facing: loaded synthetic boxes flip bit-exactly
        for rec in load_dataset(synth_root):
            for op in AUGMENT_OPS:
                back = augment(augment(rec, op), INVERSE_OP[op])
                assert back.boxes == rec.boxes
                np.testing.assert_array_equal(back.image, rec.image)


class TestImageIO:
    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
        write_image(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_image(tmp_path / "x.ppm"), img)

    def test_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(15, 25, 3), dtype=np.uint8)
        write_image(tmp_path / "x.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "x.png"), img)

    def test_pgm_grayscale(self, tmp_path):
        img = np.arange(64, dtype=np.uint8).reshape(8, 8)
        write_image(tmp_path / "g.pgm", img)
        back = read_image(tmp_path / "g.pgm")
        np.testing.assert_array_equal(back[:, :, 0], img)
