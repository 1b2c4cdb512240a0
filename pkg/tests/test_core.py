import json

import numpy as np
import pytest
from PIL import Image

from taskforge.core import (
    DatasetRecord,
    ImageRaster,
    SegMap,
    generate_fixture,
    load_dataset,
    save_dataset,
)
from taskforge.errors import FixtureError, IngestError, ValidationError
from taskforge.rng import RngState

from conftest import flood_fill_components


def _write_dataset(tmp_path, n=2, side=64, classes=(1, 2)):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    gen = np.random.default_rng(0)
    entries = []
    for i in range(n):
        img = gen.integers(0, 256, (side, side, 3)).astype(np.uint8)
        msk = np.zeros((side, side), np.uint8)
        msk[8:20, 8:20] = classes[0]
        if len(classes) > 1:
            msk[30:40, 30:40] = classes[1]
        Image.fromarray(img).save(tmp_path / f"images/r{i}.png")
        Image.fromarray(msk, "L").save(tmp_path / f"masks/r{i}.png")
        entries.append({"id": f"r{i}", "image": f"images/r{i}.png", "mask": f"masks/r{i}.png"})
    manifest = {
        "dataset_id": "toy",
        "classes": [{"id": c, "name": f"c{c}"} for c in classes],
        "records": entries,
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def test_load_resizes_to_canonical(tmp_path):
    manifest = _write_dataset(tmp_path, n=2, side=64)
    records = load_dataset(manifest, canonical_side=200)
    assert len(records) == 2
    for rec in records:
        assert rec.image.width == rec.image.height == 200
        assert rec.mask.width == rec.mask.height == 200
        assert rec.mask.present  # classes survive nearest-neighbor resize


def test_load_missing_mask_is_ingest_error(tmp_path):
    manifest = _write_dataset(tmp_path)
    (tmp_path / "masks/r1.png").unlink()
    with pytest.raises(IngestError, match="r1"):
        load_dataset(manifest)


def test_undeclared_class_id_is_validation_error(tmp_path):
    manifest = _write_dataset(tmp_path, classes=(1, 2))
    msk = np.zeros((64, 64), np.uint8)
    msk[1:5, 1:5] = 7
    Image.fromarray(msk, "L").save(tmp_path / "masks/r0.png")
    with pytest.raises(ValidationError, match="7"):
        load_dataset(manifest)


def test_dimension_mismatch_names_record(tmp_path):
    manifest = _write_dataset(tmp_path)
    Image.fromarray(np.zeros((32, 32), np.uint8), "L").save(tmp_path / "masks/r0.png")
    with pytest.raises(ValidationError, match="r0"):
        load_dataset(manifest)


def test_ingestion_idempotent(tmp_path):
    manifest = _write_dataset(tmp_path, n=2, side=64)
    first = load_dataset(manifest, canonical_side=96)
    save_dataset(first, tmp_path / "copy")
    second = load_dataset(tmp_path / "copy/manifest.json", canonical_side=96)
    for a, b in zip(first, second):
        assert a.image.same_pixels(b.image)
        assert np.array_equal(a.mask.classes, b.mask.classes)
        assert a.mask.present == b.mask.present


def test_present_matches_brute_force_scan(fixture_records):
    for rec in fixture_records:
        found = set()
        arr = rec.mask.classes
        for r in range(arr.shape[0]):
            for c in range(arr.shape[1]):
                if arr[r, c] != 0:
                    found.add(int(arr[r, c]))
        assert rec.mask.present == found


def test_record_dimension_mismatch_rejected():
    img = ImageRaster(np.zeros((8, 8, 3), np.uint8))
    msk = SegMap(np.zeros((9, 9), np.uint8))
    with pytest.raises(ValidationError):
        DatasetRecord("x", img, msk, "d")


class TestFixtureGenerator:
    def test_bit_identical_across_runs(self):
        a = generate_fixture(1, 1, side=64, rng=RngState(0))
        b = generate_fixture(1, 1, side=64, rng=RngState(0))
        assert a[0].image.same_pixels(b[0].image)
        assert np.array_equal(a[0].mask.classes, b[0].mask.classes)

    def test_present_within_declared_classes(self):
        for rec in generate_fixture(4, 3, side=64, rng=RngState(1)):
            assert rec.mask.present <= {1, 2, 3}

    def test_single_class_gives_one_component(self):
        rec = generate_fixture(1, 1, side=64, rng=RngState(2))[0]
        components = flood_fill_components(rec.mask.classes == 1)
        assert len(components) == 1

    def test_image_correlates_with_mask(self):
        rec = generate_fixture(1, 2, side=64, rng=RngState(3))[0]
        inside = rec.image.pixels[rec.mask.classes == 1].mean()
        outside = rec.image.pixels[rec.mask.classes == 0].mean()
        assert abs(inside - outside) > 5.0

    def test_impossible_packing_raises(self):
        with pytest.raises(FixtureError):
            generate_fixture(1, 40, side=16, rng=RngState(0), min_frac=0.3, max_frac=0.4)

    def test_rasters_are_read_only(self, fixture_records):
        rec = fixture_records[0]
        with pytest.raises(ValueError):
            rec.image.pixels[0, 0, 0] = 1
        with pytest.raises(ValueError):
            rec.mask.classes[0, 0] = 1
