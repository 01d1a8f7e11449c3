"""Toy world generators: enumeration counts, intrinsics invariants, determinism."""

import numpy as np
import pytest

from previewlab import blob, worlds
from previewlab.metrics import count_dots
from previewlab.worlds import DotSpec, IntrinsicsBundle, ShapesConfig


# -- dot datasets -----------------------------------------------------------------


def test_motion_only_three_videos_four_dots():
    videos = worlds.gen_dot_dataset(DotSpec(variant="motion_only"))
    assert len(videos) == 3
    for v in videos:
        assert count_dots(v) == 4


def test_motion_position_nine_videos_two_offframe():
    videos = worlds.gen_dot_dataset(DotSpec(variant="motion_position"))
    assert len(videos) == 9
    off_frame = [v for v in videos if v[-1].sum() == 0]
    assert len(off_frame) == 2


def test_motion_position_gt_mean_is_34_over_9():
    videos = worlds.gen_dot_dataset(DotSpec(variant="motion_position"))
    counts = [count_dots(v) for v in videos]
    assert sum(counts) == 34
    assert abs(np.mean(counts) - 34 / 9) < 1e-12


def test_dot_videos_are_binary_single_pixel():
    for variant in ("motion_only", "motion_position"):
        for v in worlds.gen_dot_dataset(DotSpec(variant=variant)):
            assert set(np.unique(v)) <= {0.0, 1.0}
            for frame in v:
                assert frame.sum() in (0.0, 1.0)  # at most one lit pixel


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        worlds.gen_dot_dataset(DotSpec(variant="wiggle"))


# -- shapes world ------------------------------------------------------------------


SMALL = ShapesConfig(grid=12, frames=4, min_shapes=1, max_shapes=2)


def test_zero_shapes_background_only():
    cfg = ShapesConfig(grid=8, frames=2, min_shapes=0, max_shapes=0)
    rgb, bundle = worlds.gen_shapes_scene(0, cfg)
    assert np.ptp(bundle.depth) == 0.0
    np.testing.assert_allclose(bundle.normals[..., 2], 1.0)
    lambert = float(worlds.LIGHT_DIR[2])
    expect = np.broadcast_to(worlds.BACKGROUND_COLOR * lambert, rgb.shape)
    np.testing.assert_allclose(rgb, expect, atol=1e-6)


def test_static_scene_constant_across_frames():
    # scan seeds for a static single-shape scene (velocity 0)
    cfg = ShapesConfig(grid=10, frames=4, min_shapes=1, max_shapes=1)
    for seed in range(200):
        rgb, bundle = worlds.gen_shapes_scene(seed, cfg)
        if np.array_equal(bundle.stack()[0], bundle.stack()[1]):
            for f in range(1, cfg.frames):
                np.testing.assert_array_equal(bundle.stack()[f], bundle.stack()[0])
            return
    pytest.fail("no static scene found in 200 seeds")


def test_sphere_cap_normal_formula():
    center = worlds.sphere_cap_normal(np.array(0.0), np.array(0.0))
    np.testing.assert_allclose(center, [0.0, 0.0, 1.0])
    rim = worlds.sphere_cap_normal(np.array(0.95), np.array(0.0))
    assert rim[2] < 0.5
    assert abs(np.linalg.norm(rim) - 1.0) < 1e-6


def test_normals_unit_norm_everywhere():
    for seed in range(5):
        _, bundle = worlds.gen_shapes_scene(seed, SMALL)
        norms = np.linalg.norm(bundle.normals, axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-4


def test_channel_ranges():
    for seed in range(5):
        rgb, bundle = worlds.gen_shapes_scene(seed, SMALL)
        for name in ("base_color", "depth", "roughness", "metallicity", "rgb"):
            arr = bundle.get(name)
            assert arr.min() >= 0.0 and arr.max() <= 1.0
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0


def test_regeneration_is_byte_identical():
    a = worlds.gen_shapes_scene(42, SMALL, scene_index=3)[1].stack()
    b = worlds.gen_shapes_scene(42, SMALL, scene_index=3)[1].stack()
    assert a.tobytes() == b.tobytes()


def test_bundle_stack_roundtrip():
    _, bundle = worlds.gen_shapes_scene(1, SMALL)
    again = IntrinsicsBundle.from_stack(bundle.stack())
    for name, _ in worlds.CHANNELS:
        np.testing.assert_array_equal(again.get(name), bundle.get(name))


# -- split -------------------------------------------------------------------------


def test_split_8_2():
    scenes = list(range(10))
    train, val = worlds.split_dataset(scenes, (0.8, 0.2), seed=0)
    assert len(train) == 8 and len(val) == 2
    assert set(train) | set(val) == set(scenes)
    train2, val2 = worlds.split_dataset(scenes, (0.8, 0.2), seed=0)
    assert train == train2 and val == val2


def test_split_all_train():
    train, val = worlds.split_dataset(list(range(5)), (1.0, 0.0), seed=1)
    assert len(train) == 5 and val == []


def test_split_seeds_differ():
    scenes = list(range(512))
    a = worlds.split_dataset(scenes, (0.5, 0.5), seed=1)[0]
    b = worlds.split_dataset(scenes, (0.5, 0.5), seed=2)[0]
    assert set(a) != set(b)


def test_split_empty_rejected():
    with pytest.raises(ValueError):
        worlds.split_dataset([], (0.5, 0.5), seed=0)
    with pytest.raises(ValueError):
        worlds.split_dataset([1, 2], (0.9, 0.1), seed=0)  # val slot gets 0 scenes


# -- dataset directories --------------------------------------------------------------


def test_shapes_dataset_roundtrip(tmp_path):
    bundles = [worlds.gen_shapes_scene(0, SMALL, i)[1] for i in range(3)]
    worlds.save_shapes_dataset(tmp_path / "ds", bundles, SMALL, seed=0)
    loaded, manifest = worlds.load_shapes_dataset(tmp_path / "ds")
    assert manifest["count"] == 3
    for a, b in zip(bundles, loaded):
        np.testing.assert_array_equal(a.stack(), b.stack())


def test_dot_dataset_roundtrip(tmp_path):
    spec = DotSpec(variant="motion_position")
    videos = worlds.gen_dot_dataset(spec)
    worlds.save_dot_dataset(tmp_path / "ds", videos, spec)
    loaded, manifest = worlds.load_dot_dataset(tmp_path / "ds")
    assert manifest["count"] == 9
    np.testing.assert_array_equal(np.stack(videos), np.stack(loaded))


def test_dbtn_roundtrip_and_errors(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    data = blob.dumps(arr)
    assert data[:4] == b"DBTN"
    np.testing.assert_array_equal(blob.loads(data), arr)
    with pytest.raises(blob.BlobFormatError):
        blob.loads(b"XXXX" + data[4:])
    with pytest.raises(blob.BlobFormatError):
        blob.loads(data[:-4])
