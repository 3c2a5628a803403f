import collections
import hashlib
import json

import numpy as np
import pytest

from s2neck.data import (BUCKETS, DatasetError, DatasetManifest, bucket_of, decode_ppm, encode_ppm,
                         generate_dataset, load_dataset, render_image)


def dir_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def template(cls, side, ss=8):
    """Binary-sampled mask on an ``ss``-times finer grid, box-averaged to pixels."""
    n = side * ss
    c = (np.arange(n) + 0.5) / n  # unit-box coordinates
    x, y = np.meshgrid(c, c)
    if cls == 0:
        m = (x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.25
    elif cls == 1:
        m = np.ones((n, n), bool)
    else:
        m = np.abs(x - 0.5) <= 0.5 * y
    return m.reshape(side, ss, side, ss).mean(axis=(1, 3))


def classify(patch):
    """Pick the template whose two-colour least-squares fit leaves the smallest residual.

    ``patch`` includes a one-pixel background ring around the box.
    """
    h = patch.shape[0] - 2
    best, best_err = None, np.inf
    for cls in range(3):
        m = np.pad(template(cls, h), 1).ravel()
        a = np.stack([1 - m, m], axis=1)
        err = 0.0
        for ch in range(3):
            v = patch[:, :, ch].ravel()
            coef, *_ = np.linalg.lstsq(a, v, rcond=None)
            err += float(((a @ coef - v) ** 2).sum())
        if err < best_err - 1e-9:
            best, best_err = cls, err
    return best


class TestGeneration:
    def test_bucket_proportions(self):
        m = DatasetManifest(n_train=1000, n_val=0)
        counts = collections.Counter()
        for i in range(1000):
            counts.update(bucket_of(o.area) for o in render_image(m, i)[1].objects)
        n = sum(counts.values())
        for b, want in m.scale_mix.items():
            assert abs(counts[b] / n - want) <= 0.03, (b, counts[b] / n)

    def test_all_small(self):
        m = DatasetManifest(n_train=50, n_val=0, scale_mix={"small": 1.0, "medium": 0.0, "large": 0.0})
        for i in range(50):
            assert all(bucket_of(o.area) == "small" for o in render_image(m, i)[1].objects)

    def test_objects_in_bounds(self):
        m = DatasetManifest()
        for i in range(200):
            _, gt = render_image(m, i)
            assert 1 <= len(gt.objects) <= 6
            for o in gt.objects:
                x, y, w, h = o.box
                assert x >= 0 and y >= 0 and x + w <= 128 and y + h <= 128 and min(w, h) >= 2
                assert o.area == w * h

    def test_byte_identical(self, tmp_path):
        m = DatasetManifest(n_train=6, n_val=2, seed=4)
        a, b = generate_dataset(m, tmp_path / "a"), generate_dataset(m, tmp_path / "b")
        assert dir_bytes(a) == dir_bytes(b)

    def test_seed_changes_output(self):
        a = render_image(DatasetManifest(seed=1), 0)[0]
        b = render_image(DatasetManifest(seed=2), 0)[0]
        assert not np.array_equal(a, b)

    def test_order_independent(self):
        m = DatasetManifest()
        late = render_image(m, 7)[0]
        for i in range(7):
            render_image(m, i)
        assert np.array_equal(render_image(m, 7)[0], late)

    def test_classes_recoverable_by_template_match(self):
        m = DatasetManifest(n_train=400, n_val=0)
        hits = total = 0
        for i in range(400):
            pixels, gt = render_image(m, i)
            for o in gt.objects:
                x, y, w, h = o.box
                if w < 9 or min(x, y) < 1 or max(x + w, y + h) > 127:
                    continue
                total += 1
                hits += classify(pixels[y - 1:y + h + 1, x - 1:x + w + 1].astype(float) / 255.0) == o.cls
        assert total > 300
        assert hits / total > 0.99

    @pytest.mark.parametrize("bad", [
        {"scale_mix": {"small": 0.5, "medium": 0.3, "large": 0.3}},
        {"scale_mix": {"tiny": 1.0}},
        {"objects_per_image": (3, 1)},
        {"side_ranges": {"small": [1, 7], "medium": [8, 15], "large": [16, 40]}},
    ])
    def test_manifest_validation(self, bad):
        with pytest.raises(ValueError):
            DatasetManifest(**bad)

    def test_buckets(self):
        assert [bucket_of(a) for a in (63, 64, 255, 256)] == ["small", "medium", "medium", "large"]
        assert BUCKETS == ("small", "medium", "large")


class TestLoad:
    def test_round_trip(self, tmp_path):
        m = DatasetManifest(n_train=5, n_val=3, seed=2)
        generate_dataset(m, tmp_path)
        ds = load_dataset(tmp_path)
        assert len(ds) == 8 and ds.manifest == m
        for k in range(8):
            pixels, gt = render_image(m, k)
            assert np.array_equal(ds.pixels[k], pixels)
            assert ds.gts[k] == gt
        img = ds.image(0)
        assert img.shape == (3, 128, 128) and 0.0 <= img.data.min() and img.data.max() <= 1.0

    def test_splits(self, tiny_data_dir):
        assert load_dataset(tiny_data_dir, "train").ids == list(range(24))
        assert load_dataset(tiny_data_dir, "val").ids == list(range(24, 32))

    def test_corrupted_image_named(self, tmp_path):
        generate_dataset(DatasetManifest(n_train=3, n_val=0), tmp_path)
        f = tmp_path / "images" / "1.ppm"
        blob = bytearray(f.read_bytes())
        blob[-1] ^= 0xFF
        f.write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="1.ppm"):
            load_dataset(tmp_path)

    def test_out_of_bounds_box(self, tmp_path):
        generate_dataset(DatasetManifest(n_train=2, n_val=0), tmp_path)
        ann = tmp_path / "annotations.jsonl"
        rec = json.loads(ann.read_text().splitlines()[0])
        rec["x"] = 127
        ann.write_text(json.dumps(rec, sort_keys=True) + "\n")
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["annotations_sha256"] = hashlib.sha256(ann.read_bytes()).hexdigest()
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="out of bounds"):
            load_dataset(tmp_path)

    def test_empty_annotations(self, tmp_path):
        m = DatasetManifest(n_train=3, n_val=0, objects_per_image=(0, 0))
        generate_dataset(m, tmp_path)
        ds = load_dataset(tmp_path)
        assert all(gt.objects == [] for gt in ds.gts)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)

    def test_ppm_round_trip_and_errors(self):
        px = np.random.default_rng(0).integers(0, 256, size=(4, 5, 3), dtype=np.uint8)
        assert np.array_equal(decode_ppm(encode_ppm(px)), px)
        with pytest.raises(DatasetError, match="x.ppm"):
            decode_ppm(b"P5\n1 1\n255\n\x00", "x.ppm")
