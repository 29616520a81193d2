import numpy as np
import pytest
import torch

from restorender import geometry
from restorender.dataset import Camera


def _cam(pose=None, f=100.0, c=32.0, size=65, near=0.5, far=20.0):
    return Camera(f, f, c, c, size, size, np.eye(4) if pose is None else pose, near, far)


def _rot(axis, deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    if axis == "y":
        r = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    else:
        r = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = np.eye(4)
    m[:3, :3] = r
    return m


def _random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = rng.normal(size=3)
    return m


def test_principal_ray_is_optical_axis():
    cam = _cam(_rot("y", 25))
    rays = geometry.rays_for_view(cam, [[32, 32]], dtype=torch.float64)
    assert np.allclose(rays.directions[0].numpy(), cam.optical_axis, atol=1e-12)


def test_ray_direction_hand_value():
    rays = geometry.rays_for_view(_cam(), [[52, 32]], dtype=torch.float64)
    expected = np.array([0.2, 0.0, -1.0]) / np.linalg.norm([0.2, 0.0, -1.0])
    assert np.allclose(rays.directions[0].numpy(), expected, atol=1e-12)


def test_rays_deterministic_and_bounds_checked():
    cam = _cam()
    a = geometry.rays_for_view(cam, [[1, 2], [3, 4]])
    b = geometry.rays_for_view(cam, [[1, 2], [3, 4]])
    assert torch.equal(a.directions, b.directions)
    with pytest.raises(ValueError):
        geometry.rays_for_view(cam, [[65, 0]])
    with pytest.raises(ValueError):
        geometry.rays_for_view(cam, [[0, -1]])


def test_stratified_midpoints_and_jitter():
    cam = Camera(100, 100, 32, 32, 65, 65, np.eye(4), 1.0, 5.0)
    rays = geometry.rays_for_view(cam, [[10, 10], [20, 30]], dtype=torch.float64)
    s = geometry.stratified_samples(rays, 4)
    assert torch.allclose(s.depths, torch.tensor([1.5, 2.5, 3.5, 4.5], dtype=torch.float64).expand(2, 4))
    j1 = geometry.stratified_samples(rays, 4, jitter_seed=3)
    j2 = geometry.stratified_samples(rays, 4, jitter_seed=3)
    assert torch.equal(j1.depths, j2.depths)
    lo = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64)
    assert torch.all(j1.depths >= lo) and torch.all(j1.depths <= lo + 1)
    assert torch.all(j1.depths[:, 1:] > j1.depths[:, :-1])
    with pytest.raises(ValueError):
        geometry.stratified_samples(rays, 1)


def test_projection_hand_values():
    cam = _cam()
    pts = torch.tensor([[0.0, 0.0, -5.0], [1.0, 0.0, -5.0], [1.0, 0.0, 5.0]], dtype=torch.float64)
    pix, z, valid = geometry.project(pts, cam)
    assert torch.allclose(pix[0], torch.tensor([32.0, 32.0], dtype=torch.float64)) and z[0] == 5
    assert torch.allclose(pix[1], torch.tensor([52.0, 32.0], dtype=torch.float64))
    assert valid.tolist() == [True, True, False]


def test_projection_round_trip_random_rays():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        cam = Camera(80.0, 90.0, 31.5, 30.0, 64, 60, _random_pose(rng), 0.5, 30.0)
        pix = np.stack([rng.uniform(0, 63, 1000), rng.uniform(0, 59, 1000)], -1)
        rays = geometry.rays_for_view(cam, pix, dtype=torch.float64)
        t = torch.as_tensor(rng.uniform(0.5, 30.0, 1000))
        pts = rays.origins + t[:, None] * rays.directions
        back, z, valid = geometry.project(pts, cam)
        worst = max(worst, float((back - torch.as_tensor(pix)).abs().max()))
        assert valid.all()
        cos = rays.directions @ torch.as_tensor(cam.optical_axis)
        assert torch.allclose(z, t * cos, atol=1e-9)
    assert worst < 1e-4


def _brute_bilinear(fm, x, y):
    c, h, w = fm.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(c)
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wgt = (1 - abs(x - xi)) * (1 - abs(y - yi))
            if 0 <= xi < w and 0 <= yi < h and wgt > 0:
                out += wgt * fm[:, yi, xi]
    return out


def test_bilinear_matches_brute_force():
    rng = np.random.default_rng(1)
    fm = rng.normal(size=(5, 8, 8))
    pts = np.stack([rng.uniform(0, 7, 500), rng.uniform(0, 7, 500)], -1)
    got = geometry.bilinear_sample(torch.as_tensor(fm), torch.as_tensor(pts)).numpy()
    want = np.stack([_brute_bilinear(fm, x, y) for x, y in pts])
    assert np.abs(got - want).max() < 1e-6


def test_gather_matches_oracle_and_masks_invalid():
    rng = np.random.default_rng(2)
    cams = [_cam(_rot("y", a), f=8.0, c=3.5, size=8) for a in (0.0, 10.0, -15.0)]
    fms = torch.as_tensor(rng.normal(size=(3, 4, 8, 8)))
    rays = geometry.rays_for_view(cams[0], rng.uniform(0, 7, (20, 2)), dtype=torch.float64)
    samples = geometry.stratified_samples(rays, 6, jitter_seed=0)
    g = geometry.gather(fms, cams, samples)
    assert g.features.shape == (20, 6, 3, 4)
    for i, cam in enumerate(cams):
        uv, z = cam.project(samples.points.numpy())
        for r in range(20):
            for k in range(6):
                x, y = uv[r, k]
                ok = z[r, k] > 0 and 0 <= x <= 7 and 0 <= y <= 7
                assert bool(g.valid[r, k, i]) == ok
                if ok:
                    want = _brute_bilinear(fms[i].numpy(), x, y)
                    assert np.abs(g.features[r, k, i].numpy() - want).max() < 1e-6
                else:
                    assert torch.all(g.features[r, k, i] == 0)


def test_gather_constant_map_and_pixel_centres():
    cam = _cam(f=8.0, c=3.5, size=8)
    fm = torch.full((1, 2, 8, 8), 0.7, dtype=torch.float64)
    rays = geometry.rays_for_view(cam, [[1, 1], [5, 2]], dtype=torch.float64)
    g = geometry.gather(fm, [cam], geometry.stratified_samples(rays, 4))
    assert torch.allclose(g.features[g.valid], torch.tensor(0.7, dtype=torch.float64))
    ramp = torch.arange(64, dtype=torch.float64).reshape(1, 1, 8, 8)
    g = geometry.gather(ramp, [cam], geometry.stratified_samples(rays, 4))
    assert torch.allclose(g.features[0, :, 0, 0], torch.tensor(9.0, dtype=torch.float64))
    assert torch.allclose(g.features[1, :, 0, 0], torch.tensor(21.0, dtype=torch.float64))


def test_valid_mask_monotone_under_frustum_shrink():
    rng = np.random.default_rng(3)
    pts = torch.as_tensor(rng.uniform(-3, 3, (2000, 3)) + np.array([0, 0, -4]))
    big = Camera(30, 30, 31.5, 31.5, 64, 64, np.eye(4), 0.1, 10)
    small = Camera(30, 30, 15.5, 15.5, 32, 32, np.eye(4), 0.1, 10)
    _, _, vb = geometry.project(pts, big)
    _, _, vs = geometry.project(pts, small)
    assert torch.all(vb | ~vs)


def test_nearest_source_view_rules():
    target = _cam()
    srcs = [_cam(_rot("y", a)) for a in (40, 10, 25, 0)]
    assert geometry.nearest_source_view(target, srcs) == 3
    assert geometry.nearest_source_view(target, [_cam(_rot("y", 10)), _cam(_rot("y", 40))]) == 0
    assert geometry.nearest_source_view(target, [_cam(_rot("y", 40)), _cam(_rot("y", 10)), _cam(_rot("x", 10))]) == 1
    assert geometry.nearest_views(target, srcs, 2) == [3, 1]
