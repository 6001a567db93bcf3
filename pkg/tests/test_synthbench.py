import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rscn.synthbench import (DatasetIntegrityError, Scene, SceneSpec, SpecError, generate_dataset,
                             generate_proposals, load_dataset, render_scene, scene_filename)

SMALL = SceneSpec(height=16, width=16, size_min=4, size_max=7, objects_max=2)


def test_split_counts(tmp_path):
    ds = generate_dataset(SMALL, (10, 10, 5), seed=3, out_dir=tmp_path)
    assert ds.manifest.sizes == {"source_train": 10, "target_train": 10, "target_val": 5}
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["sizes"] == {"source_train": 10, "target_train": 10, "target_val": 5}


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_target_train_is_instance_free(seed):
    ds = generate_dataset(SMALL, (2, 4, 1), seed=seed)
    assert sum(ds.manifest.class_counts["target_train"]) == 0
    assert all(s.n_objects == 0 for s in ds.split("target_train"))
    assert all(s.n_objects >= 1 for s in ds.split("source_train") + ds.split("target_val"))


def test_determinism_byte_identical(tmp_path):
    generate_dataset(SMALL, (3, 3, 2), seed=11, out_dir=tmp_path / "a")
    generate_dataset(SMALL, (3, 3, 2), seed=11, out_dir=tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generation_order_does_not_change_content():
    ds = generate_dataset(SMALL, (3, 3, 2), seed=5)
    again = render_scene(SMALL, 5, 4, "target_train")
    assert again == ds.scenes[4]


def test_pixels_and_boxes_in_range():
    ds = generate_dataset(SceneSpec(), (8, 4, 8), seed=0)
    for s in ds:
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
        assert s.pixels.dtype == np.float32
        for x1, y1, x2, y2 in s.boxes:
            assert 0 <= x1 < x2 <= 32 and 0 <= y1 < y2 <= 32


def test_shift_identity():
    spec = SceneSpec(shift_scale=(1, 1, 1), shift_offset=(0, 0, 0), shift_noise=0.0)
    for sid in range(5):
        shifted = render_scene(spec, 9, sid, "target_val")
        plain = render_scene(spec, 9, sid, "target_val", apply_domain_shift=False)
        np.testing.assert_array_equal(shifted.pixels, plain.pixels)


def test_class_geometry_shared_across_domains():
    spec = SceneSpec()
    a = render_scene(spec, 2, 7, "target_val")
    b = render_scene(spec, 2, 7, "target_val", apply_domain_shift=False)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.pixels, b.pixels)


@pytest.mark.parametrize("kwargs", [dict(height=6), dict(size_max=40), dict(n_classes=0),
                                    dict(objects_min=3, objects_max=2),
                                    dict(shift_scale=(1.0, 1.0))])
def test_spec_validation(kwargs):
    with pytest.raises(SpecError):
        SceneSpec(**kwargs)


def test_sizes_must_be_positive():
    with pytest.raises(SpecError):
        generate_dataset(SMALL, (1, 0, 1), seed=0)


# ---------------------------------------------------------------- proposals


def _scene(boxes, labels):
    return Scene(0, "source", np.zeros((32, 32, 3), np.float32),
                 np.array(boxes, dtype=np.int64).reshape(-1, 4), np.array(labels, dtype=np.int64))


def test_proposal_counts():
    s = _scene([[1, 1, 9, 9], [15, 15, 25, 27]], [0, 1])
    assert generate_proposals(s, 4, 1.5, seed=0).shape == (10, 4)
    assert generate_proposals(_scene([], []), 4, 1.5, seed=0).shape == (4, 4)


def test_zero_jitter_reproduces_gt():
    s = _scene([[1, 1, 9, 9], [15, 15, 25, 27]], [0, 1])
    boxes = generate_proposals(s, 3, 0.0, seed=1)
    np.testing.assert_array_equal(boxes[:6], np.repeat(s.boxes, 3, axis=0))


def test_proposals_deterministic_and_in_grid():
    s = _scene([[0, 0, 8, 8]], [2])
    a = generate_proposals(s, 6, 3.0, seed=4)
    b = generate_proposals(s, 6, 3.0, seed=4)
    np.testing.assert_array_equal(a, b)
    assert np.all(a >= 0) and np.all(a <= 32)
    assert np.all(a[:, 2] > a[:, 0]) and np.all(a[:, 3] > a[:, 1])


# ---------------------------------------------------------------- serialization


def test_round_trip(tmp_path):
    ds = generate_dataset(SMALL, (4, 3, 2), seed=8, out_dir=tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.manifest.splits == ds.manifest.splits
    assert loaded.manifest.spec == ds.manifest.spec
    for sid, scene in ds.scenes.items():
        assert loaded.scenes[sid] == scene


def test_header_layout(tmp_path):
    generate_dataset(SMALL, (1, 1, 1), seed=0, out_dir=tmp_path)
    blob = (tmp_path / "scenes" / scene_filename(0)).read_bytes()
    assert blob[:4] == b"IFDS"
    H, W, C, n_gt = np.frombuffer(blob[6:14], dtype="<u2")
    assert (H, W, C) == (16, 16, 3)
    assert len(blob) == 16 + 4 * H * W * C + 10 * n_gt


def test_corrupted_byte_names_scene(tmp_path):
    generate_dataset(SMALL, (2, 2, 1), seed=0, out_dir=tmp_path)
    path = tmp_path / "scenes" / scene_filename(1)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetIntegrityError, match="scene 1: checksum"):
        load_dataset(tmp_path)


def test_missing_scene_file(tmp_path):
    generate_dataset(SMALL, (2, 2, 1), seed=0, out_dir=tmp_path)
    (tmp_path / "scenes" / scene_filename(3)).unlink()
    with pytest.raises(DatasetIntegrityError, match="scene 3: missing"):
        load_dataset(tmp_path)


def test_spec_hash_mismatch(tmp_path):
    generate_dataset(SMALL, (1, 1, 1), seed=0, out_dir=tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["spec"]["bg_std"] = 0.5
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetIntegrityError, match="spec hash"):
        load_dataset(tmp_path)
