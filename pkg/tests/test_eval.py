import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from restorender import degrade
from restorender.dataset import Camera, save_scene
from restorender.evaluation import (
    BenchmarkCase, consistency, load_case, psnr, report_markdown, run_benchmark, ssim, warp_pair,
)
from restorender.model import PRESETS, Restorer


def test_psnr_hand_values():
    a = np.zeros((8, 8, 3))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    assert psnr(a, a) == 99.0
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)[..., None].repeat(3, -1)
    assert psnr(checker, 1 - checker) == 0.0
    b = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((8, 9, 3)))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(24, 24, 3)), rng.uniform(size=(24, 24, 3))
    assert abs(ssim(a, a) - 1) < 1e-12
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert -1 <= ssim(a, b) <= 1


def test_ssim_constant_patches_closed_form():
    # mu_a = 0, mu_b = 1, all variances 0: (C1 * C2) / ((1 + C1) * C2)
    c1 = 0.01 ** 2
    assert abs(ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) - c1 / (1 + c1)) < 1e-12


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_consistency_identity_pose():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(16, 16, 3))
    cam = Camera(20, 20, 7.5, 7.5, 16, 16, np.eye(4), 0.5, 10.0)
    depth = np.full((16, 16), 3.0)
    rmse, _ = consistency([img, img], [depth, depth], [cam, cam], 1)
    assert rmse == 0.0


def test_consistency_on_ground_truth(plane_scene, small_scene):
    for scene in (plane_scene, small_scene):
        for k in (1, 5):
            rmse, _ = consistency(scene.images, scene.depths, scene.cameras, k)
            assert rmse < 0.02


def test_consistency_k_too_large(small_scene):
    with pytest.raises(ValueError):
        consistency(small_scene.images[:3], small_scene.depths[:3], small_scene.cameras[:3], 3)
    with pytest.raises(ValueError):
        consistency(small_scene.images[:3], small_scene.depths[:3], small_scene.cameras[:3], 0)


def test_consistency_empty_mask_raises():
    img = np.zeros((16, 16, 3))
    a = Camera(20, 20, 7.5, 7.5, 16, 16, np.eye(4), 0.5, 10.0)
    pose = np.eye(4)
    pose[:3, :3] = Rotation.from_euler("y", 180, degrees=True).as_matrix()
    b = Camera(20, 20, 7.5, 7.5, 16, 16, pose, 0.5, 10.0)
    with pytest.raises(ValueError):
        consistency([img, img], [np.full((16, 16), 3.0)] * 2, [a, b], 1)


def test_consistency_invariant_to_rigid_transform(plane_scene):
    rng = np.random.default_rng(3)
    imgs = [im + rng.normal(0, 0.05, im.shape) for im in plane_scene.images[:4]]
    g = np.eye(4)
    g[:3, :3] = Rotation.from_rotvec([0.3, -0.7, 0.2]).as_matrix()
    g[:3, 3] = [1.5, -2.0, 0.25]
    moved = [Camera(c.fx, c.fy, c.cx, c.cy, c.width, c.height, g @ c.camera_to_world, c.near, c.far)
             for c in plane_scene.cameras[:4]]
    a, _ = consistency(imgs, plane_scene.depths[:4], plane_scene.cameras[:4], 1)
    b, _ = consistency(imgs, plane_scene.depths[:4], moved, 1)
    assert abs(a - b) < 1e-9


def test_warp_mask_excludes_occluded(small_scene):
    s = small_scene
    # a destination depth map pushed far away marks every pixel occluded
    _, _, mask = warp_pair(s.images[0], s.depths[0], s.cameras[0], s.images[1], s.depths[1] * 2, s.cameras[1])
    assert not mask.any()


@pytest.fixture(scope="module")
def case(small_scene):
    imgs, _ = degrade.degrade_views(small_scene.images, small_scene.depths, "lowlight", 4)
    return BenchmarkCase(small_scene.with_images(imgs), small_scene, "lowlight")


def test_run_benchmark_report(tmp_path, case):
    model = Restorer(PRESETS["micro"], kinds=["lowlight", "rain"])
    report = run_benchmark(model, [case], ["lowlight"], views=4, out_dir=tmp_path)
    assert set(report) == {"lowlight"}
    assert set(report["lowlight"]) == {"psnr", "ssim", "perceptual", "n_views"}
    assert report["lowlight"]["n_views"] == 2
    assert json.loads((tmp_path / "report.json").read_text()) == report
    assert (tmp_path / "report.md").read_text() == report_markdown(report)
    assert run_benchmark(model, [case], ["lowlight"], views=4) == report
    with pytest.raises(ValueError):
        run_benchmark(model, [case], ["rain"], views=4)


def test_load_case_needs_ground_truth(tmp_path, case):
    save_scene(case.degraded, tmp_path / "bad")
    with pytest.raises(FileNotFoundError):
        load_case(tmp_path / "bad")
    (tmp_path / "bad" / "degradation.json").write_text(json.dumps({"source": "../missing", "kind": "lowlight"}))
    with pytest.raises(FileNotFoundError):
        load_case(tmp_path / "bad")
    save_scene(case.clean, tmp_path / "clean")
    (tmp_path / "bad" / "degradation.json").write_text(json.dumps({"source": "../clean", "kind": "lowlight"}))
    loaded = load_case(tmp_path / "bad")
    assert loaded.kind == "lowlight" and len(loaded.clean) == len(case.clean)
