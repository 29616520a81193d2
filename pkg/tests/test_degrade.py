import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from restorender import degrade
from restorender.dataset import linear_to_srgb, srgb_to_linear
from restorender.degrade import (
    DegradationSpec, DefocusBlurParams, HazeParams, LowLightParams, MissingDepthError, MotionBlurParams,
    ParameterRangeError, RainParams, SnowParams,
)


def _image(seed=0, shape=(32, 40)):
    return np.random.default_rng(seed).uniform(0, 1, (*shape, 3))


def _depth(shape=(32, 40)):
    y, x = np.mgrid[0:shape[0], 0:shape[1]]
    return 2.0 + x / shape[1] * 3.0


def test_haze_identity_and_ambient_limit():
    img = _image()
    spec = DegradationSpec("haze", HazeParams(beta=2.0, ambient=160.0))
    assert np.array_equal(degrade.apply(img, None, spec, transmission=np.ones(img.shape[:2])), img)
    out = degrade.apply(img, None, spec, transmission=np.zeros(img.shape[:2]))
    assert np.abs(out - 160 / 255).max() < 1e-15


def test_haze_beta_zero_is_identity():
    img = _image()
    out = degrade.apply(img, _depth(), DegradationSpec("haze", HazeParams(beta=0.0, ambient=150.0)))
    assert np.array_equal(out, img)


def test_haze_gray_hand_value():
    img = np.full((8, 8, 3), 0.5)
    out = degrade.apply(img, None, DegradationSpec("haze", HazeParams(2.0, 160.0)), transmission=np.full((8, 8), 0.5))
    assert np.abs(out - (0.5 * 0.5 + 0.5 * 160 / 255)).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(125, 200), st.integers(0, 1000))
def test_haze_inversion(t, ambient, seed):
    img = _image(seed, (6, 7))
    trans = np.random.default_rng(seed).uniform(t, 1.0, (6, 7))
    hazy = degrade.apply_haze(img, trans, ambient)
    assert np.abs(degrade.dehaze(hazy, trans, ambient) - img).max() < 1e-6


def test_haze_transmission_decreases_with_depth():
    d = _depth()
    t = degrade.haze_transmission(d, 3.0, float(d.min()), float(d.max()))
    assert np.all(np.diff(t, axis=1) <= 0)
    assert abs(t.max() - 1) < 1e-12 and abs(t.min() - np.exp(-3.0)) < 1e-12


def test_lowlight_identity_and_noiseless_formula():
    img = _image()
    out = degrade.apply(img, None, DegradationSpec("lowlight", LowLightParams(1.0, 0.0, 0.0)))
    assert np.abs(out - img).max() < 1e-12
    out = degrade.apply(img, None, DegradationSpec("lowlight", LowLightParams(12.0, 0.0, 0.0)))
    assert np.array_equal(out, linear_to_srgb(srgb_to_linear(img) / 12.0))


def test_lowlight_noise_is_heteroscedastic():
    img = np.concatenate([np.full((64, 64, 3), 0.2), np.full((64, 64, 3), 0.9)], axis=1)
    p = LowLightParams(2.0, 1e-2, 1e-3)
    clean = srgb_to_linear(img) / 2.0
    noisy = srgb_to_linear(degrade.apply(img, None, DegradationSpec("lowlight", p, seed=1)))
    resid = noisy - clean
    for sl in (np.s_[:, :64], np.s_[:, 64:]):
        expected = np.sqrt(p.shot_gain * clean[sl].mean() + p.read_sigma ** 2)
        assert abs(resid[sl].std() / expected - 1) < 0.1


@pytest.mark.parametrize("length", [2, 3, 4, 5, 6])
@pytest.mark.parametrize("angle", [0.0, 30.0, 90.0, 137.0, 180.0])
def test_motion_kernel_normalized(length, angle):
    k = degrade.motion_kernel(length, angle)
    assert abs(k.sum() - 1) < 1e-6 and k.min() >= 0


@pytest.mark.parametrize("d", [5, 6, 7, 8, 9, 10, 11])
def test_disc_kernel_normalized(d):
    k = degrade.disc_kernel(d)
    assert abs(k.sum() - 1) < 1e-6
    assert np.allclose(k, k.T) and np.allclose(k, k[::-1])


def test_horizontal_motion_kernel_is_a_row():
    k = degrade.motion_kernel(5, 0.0)
    c = k.shape[0] // 2
    assert np.abs(k[c].sum() - 1) < 1e-6


def test_blur_fixed_points_and_mean():
    const = np.full((16, 16, 3), 0.37)
    for spec in (DegradationSpec("motion_blur", MotionBlurParams(5, 33.0)),
                 DegradationSpec("defocus_blur", DefocusBlurParams(9, "foreground"))):
        assert np.abs(degrade.apply(const, _depth((16, 16)), spec) - 0.37).max() < 1e-12
    img = _image(3)
    out = degrade.apply(img, None, DegradationSpec("motion_blur", MotionBlurParams(6, 71.0)))
    assert abs(out.mean() - img.mean()) < 1e-4


def test_defocus_only_touches_chosen_region():
    img = _image(4)
    depth = _depth()
    out = degrade.apply(img, depth, DegradationSpec("defocus_blur", DefocusBlurParams(9, "background")))
    fg = degrade.foreground_mask(depth)
    # beyond the 2 px feather the foreground is untouched
    deep_fg = ndimage.binary_erosion(fg, iterations=3)
    assert np.array_equal(out[deep_fg], img[deep_fg])
    assert not np.allclose(out[~fg], img[~fg])


@pytest.mark.parametrize("kind,params", [("rain", RainParams(12000, 10, 20)), ("snow", SnowParams(20000, 1.2, 30, 3))])
def test_particles_leave_unmasked_pixels_bit_identical(kind, params):
    img = _image(5, (48, 48))
    spec = DegradationSpec(kind, params, seed=11)
    alpha = degrade.particle_alpha(kind, img.shape[:2], params, np.random.default_rng(11))
    out = degrade.apply(img, None, spec)
    untouched = alpha == 0
    assert untouched.any() and (~untouched).any()
    assert np.array_equal(out[untouched], img[untouched])
    assert not np.array_equal(out[~untouched], img[~untouched])


def test_rain_zero_intensity_identity():
    img = _image()
    assert np.array_equal(degrade.apply(img, None, DegradationSpec("rain", RainParams(intensity=0.0))), img)


def test_depth_required():
    for spec in (DegradationSpec("haze"), DegradationSpec("defocus_blur")):
        with pytest.raises(MissingDepthError):
            degrade.apply(_image(), None, spec)


def test_out_of_range_params_rejected():
    with pytest.raises(ParameterRangeError):
        degrade.apply(_image(), _depth(), DegradationSpec("haze", HazeParams(beta=7.0)))
    with pytest.raises(ParameterRangeError):
        degrade.apply(_image(), None, DegradationSpec("motion_blur", MotionBlurParams(9, 0.0)))


@pytest.mark.parametrize("kind", degrade.KINDS)
def test_outputs_in_range_and_deterministic(kind):
    img, depth = _image(6), _depth()
    spec = degrade.sample_spec(kind, np.random.default_rng(2))
    a = degrade.apply(img, depth, spec)
    b = degrade.apply(img, depth, spec)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_sample_ranges():
    rng = np.random.default_rng(0)
    haze = [degrade.sample_spec("haze", rng).params for _ in range(10_000)]
    betas = np.array([p.beta for p in haze])
    amb = np.array([p.ambient for p in haze])
    assert betas.min() >= 1 and betas.max() <= 5 and amb.min() >= 125 and amb.max() <= 200
    scales = np.array([degrade.sample_spec("lowlight", rng).params.scale for _ in range(10_000)])
    assert scales.min() >= 8 and scales.max() <= 30
    ks = {degrade.sample_spec("motion_blur", rng).params.kernel_size for _ in range(2000)}
    assert ks == {2, 3, 4, 5, 6}
    ks = {degrade.sample_spec("defocus_blur", rng).params.kernel_size for _ in range(2000)}
    assert ks == set(range(5, 12))


def test_sample_spec_deterministic():
    a = degrade.sample_spec("snow", np.random.default_rng(9))
    b = degrade.sample_spec("snow", np.random.default_rng(9))
    assert a.to_dict() == b.to_dict()
    assert DegradationSpec.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_composition_identity_and_canonical_order():
    img = _image(7)
    ident = [DegradationSpec("lowlight", LowLightParams(1.0, 0, 0)), DegradationSpec("rain", RainParams(intensity=0.0))]
    assert np.abs(degrade.apply_composed(img, None, ident) - img).max() < 1e-12
    rain = DegradationSpec("rain", RainParams(9000, 8, 10), seed=3)
    low = DegradationSpec("lowlight", LowLightParams(10, 1e-3, 2e-3), seed=4)
    assert np.array_equal(degrade.apply_composed(img, None, [rain, low]), degrade.apply_composed(img, None, [low, rain]))
    with pytest.raises(degrade.DegradationError):
        degrade.apply_composed(img, None, [rain, rain])


def test_composed_haze_then_lowlight_hand_value():
    img = np.full((8, 8, 3), 0.5)
    specs = [DegradationSpec("lowlight", LowLightParams(2.0, 0, 0)), DegradationSpec("haze", HazeParams(2.0, 160.0))]
    out = degrade.apply_composed(img, None, specs, transmission=np.full((8, 8), 0.5))
    hazy = 0.5 * 0.5 + 0.5 * 160 / 255
    assert abs(hazy - 0.5637) < 1e-4
    assert np.abs(out - linear_to_srgb(srgb_to_linear(hazy) / 2)).max() < 1e-12


def test_view_seeds_independent_of_order():
    imgs = np.stack([_image(i, (16, 16)) for i in range(4)])
    a, _ = degrade.degrade_views(imgs, None, "rain", 5)
    # view 0's corruption does not depend on which other views are processed
    assert np.array_equal(a[0], degrade.degrade_views(imgs[:1], None, "rain", 5)[0][0])
    assert degrade.view_seed(5, 0, "rain") != degrade.view_seed(5, 1, "rain")
    assert degrade.view_seed(5, 0, "rain") != degrade.view_seed(5, 0, "snow")
