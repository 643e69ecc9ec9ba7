import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnrobust import corruption as C
from attnrobust.corruption import CorruptionSpec, Kind, Scenario
from attnrobust.errors import ConfigError, DomainError
from attnrobust.rng import derive_seed, make_rng

MID_GRAY = np.full((3, 32, 32), 0.5)


def batch(seed=0, n=4, size=16):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(np.float32)


# ---------------------------------------------------------------------------
# fog


def test_fog_vanishing_severity_is_identity(rng):
    img = rng.uniform(size=(3, 20, 24))
    assert np.abs(C.fog(img, 1e-7, seed=3) - img).max() <= 1e-6
    np.testing.assert_array_equal(C.fog(img, 0.0, seed=3), img)


def test_fog_deterministic_bitwise(rng):
    img = rng.uniform(size=(3, 32, 32))
    assert C.fog(img, 1.3, 11).tobytes() == C.fog(img.copy(), 1.3, 11).tobytes()
    assert C.fog(img, 1.3, 11).tobytes() != C.fog(img, 1.3, 12).tobytes()


def test_fog_brightens_mid_gray_with_severity():
    means = [C.fog(MID_GRAY, s, seed=0).mean() for s in (0.5, 1.0, 2.0)]
    assert means[0] < means[1] < means[2]
    assert means[0] > 0.5


@given(st.integers(0, 2**63), st.lists(st.floats(0.05, 4.0), min_size=2, max_size=6, unique=True))
def test_fog_distance_non_decreasing_in_severity(seed, severities):
    img = make_rng(seed, "img").uniform(size=(3, 16, 16))
    dist = [np.linalg.norm(C.fog(img, s, seed) - img) for s in sorted(severities)]
    assert all(b >= a - 1e-12 for a, b in zip(dist, dist[1:]))


@given(st.integers(0, 2**63), st.floats(0.0, 10.0), st.integers(1, 40), st.integers(1, 40))
def test_fog_preserves_shape_and_range(seed, severity, h, w):
    img = make_rng(seed).uniform(size=(2, h, w))
    out = C.fog(img, severity, seed)
    assert out.shape == img.shape and out.dtype == img.dtype
    assert (out >= 0).all() and (out <= 1).all()


def test_fog_keeps_float32():
    out = C.fog(MID_GRAY.astype(np.float32), 1.0, 0)
    assert out.dtype == np.float32


def test_fog_rejects_negative_severity():
    with pytest.raises(DomainError):
        C.fog(MID_GRAY, -0.1, 0)


def test_haze_is_normalized_and_cropped():
    m = C.fog_haze(20, 12, seed=4)
    assert m.shape == (20, 12)
    full = C.plasma_fractal(32, make_rng(4, "fog"))
    assert full.min() == 0.0 and full.max() == 1.0
    np.testing.assert_array_equal(m, full[:20, :12])


def test_plasma_smoother_with_larger_roughness():
    rough = C.plasma_fractal(64, make_rng(0), roughness=1.5)
    smooth = C.plasma_fractal(64, make_rng(0), roughness=4.0)

    def grad_energy(x):
        return np.abs(np.diff(x, axis=0)).mean() + np.abs(np.diff(x, axis=1)).mean()

    assert grad_energy(smooth) < grad_energy(rough)


def test_plasma_rejects_non_power_of_two():
    with pytest.raises(DomainError):
        C.plasma_fractal(24, make_rng(0))


# ---------------------------------------------------------------------------
# gaussian noise


def test_noise_zero_sigma_identity(rng):
    img = rng.uniform(size=(3, 8, 8))
    np.testing.assert_array_equal(C.gaussian_noise(img, 0.0, 1), img)


def test_noise_unbiased_on_mid_gray():
    img = np.full((1, 100, 100), 0.5)
    sigma = 0.05
    diff = C.gaussian_noise(img, sigma, seed=9) - img
    assert abs(diff.mean()) <= 3 * sigma / 100
    assert diff.std() == pytest.approx(sigma, rel=0.05)


def test_noise_deterministic_and_clamped(rng):
    img = rng.uniform(size=(3, 8, 8))
    a, b = C.gaussian_noise(img, 0.5, 2), C.gaussian_noise(img, 0.5, 2)
    assert a.tobytes() == b.tobytes()
    assert (a >= 0).all() and (a <= 1).all()


# ---------------------------------------------------------------------------
# specs and scenarios


def test_spec_validation():
    with pytest.raises(ConfigError):
        CorruptionSpec(Kind.FOG, severity=0.0)
    assert not CorruptionSpec(Kind.NONE, severity=0.0).active
    assert CorruptionSpec("fog", 1.0, scenario="train_and_test").scenario is Scenario.TRAIN_AND_TEST


@pytest.mark.parametrize(
    "scenario, train, test",
    [("clean", False, False), ("train", True, False), ("test", False, True), ("both", True, True)],
)
def test_scenario_selects_splits(scenario, train, test):
    tr, te = batch(0), batch(1)
    spec = CorruptionSpec(Kind.FOG, 1.0, seed=5, scenario=scenario)
    tr2, te2 = C.apply_scenario(tr, te, spec)
    assert (tr2.tobytes() != tr.tobytes()) == train
    assert (te2.tobytes() != te.tobytes()) == test


def test_image_seed_documented_derivation():
    assert C.image_seed(5, "test", 3) == derive_seed(5, "test", 3)
    assert C.image_seed(5, "train", 3, epoch=2) == derive_seed(5, "train", "epoch", 2, 3)
    assert C.image_seed(5, "train", 3) != C.image_seed(5, "test", 3)


def test_same_pixels_differ_across_splits_and_match_by_seed():
    imgs = batch(2, n=3)
    spec = CorruptionSpec(Kind.FOG, 1.0, seed=8, scenario=Scenario.TRAIN_AND_TEST)
    tr, te = C.apply_scenario(imgs, imgs, spec)
    assert tr[1].tobytes() != te[1].tobytes()
    np.testing.assert_array_equal(te[1], C.fog(imgs[1], 1.0, C.image_seed(8, "test", 1)))


def test_corrupt_batch_uses_dataset_positions():
    imgs = batch(3, n=4)
    spec = CorruptionSpec(Kind.FOG, 1.0, seed=1)
    full = C.corrupt_batch(imgs, spec, "test")
    part = C.corrupt_batch(imgs[[2, 0]], spec, "test", indices=np.array([2, 0]))
    np.testing.assert_array_equal(part, full[[2, 0]])


def test_training_corruption_changes_per_epoch():
    imgs = batch(4, n=2)
    spec = CorruptionSpec(Kind.FOG, 1.0, seed=1)
    e0 = C.corrupt_batch(imgs, spec, "train", epoch=0)
    e1 = C.corrupt_batch(imgs, spec, "train", epoch=1)
    assert e0.tobytes() != e1.tobytes()
    assert e0.tobytes() == C.corrupt_batch(imgs, spec, "train", epoch=0).tobytes()


def test_scenario_parsing():
    assert C.parse_scenario("TrainOnly") is Scenario.TRAIN_ONLY
    assert C.parse_scenario("test-only") is Scenario.TEST_ONLY
    with pytest.raises(ValueError):
        C.parse_scenario("sometimes")


# ---------------------------------------------------------------------------
# normalization


def test_normalize_identity_stats(rng):
    x = rng.uniform(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(C.normalize(x, (0, 0, 0), (1, 1, 1)), x)


def test_constant_channel_at_mean_is_zero():
    x = np.full((3, 4, 4), 0.25)
    np.testing.assert_array_equal(C.normalize(x, (0.25,) * 3, (0.2,) * 3), np.zeros_like(x))


@given(st.integers(0, 2**32 - 1))
def test_normalize_roundtrip(seed):
    r = np.random.default_rng(seed)
    x = r.uniform(size=(2, 3, 5, 5))
    means, stds = r.uniform(0, 1, 3), r.uniform(0.05, 1, 3)
    np.testing.assert_allclose(C.denormalize(C.normalize(x, means, stds), means, stds), x, atol=1e-6)


def test_normalize_rejects_zero_std():
    with pytest.raises(DomainError):
        C.normalize(np.zeros((3, 2, 2)), (0, 0, 0), (1, 0, 1))
