import csv
import math

import numpy as np
import pytest

from alma.distances import (
    DistanceKind,
    DistanceSpec,
    UnsupportedShapeError,
    ciede2000,
    distance,
    distance_value_grad,
    effective_window,
    rgb_to_lab,
    ssim,
)
from conftest import TESTS, central_difference, relative_error
from reference_ciede2000 import delta_e00

KINDS = [DistanceKind.L1, DistanceKind.L2, DistanceKind.CIEDE2000, DistanceKind.SSIM]


def sharma_pairs():
    with open(TESTS / "data" / "sharma_pairs.csv") as fh:
        for row in csv.DictReader(fh):
            lab1 = tuple(float(row[k]) for k in ("L1", "a1", "b1"))
            lab2 = tuple(float(row[k]) for k in ("L2", "a2", "b2"))
            yield lab1, lab2, float(row["delta_e00"])


def test_l2_identity_gives_zero_and_zero_gradient():
    x = np.random.default_rng(0).uniform(size=(3, 4, 4))
    value, grad = distance_value_grad("l2", x, x)
    assert value == 0.0 and not np.any(grad)


def test_l1_on_three_coordinates():
    x = np.full((3, 4, 4), 0.5)
    xt = x.copy()
    xt.reshape(-1)[[0, 5, 17]] += 0.1
    value, grad = distance_value_grad("l1", xt, x)
    assert value == pytest.approx(0.3, abs=1e-12)
    assert set(np.unique(grad)) <= {-1.0, 0.0, 1.0}
    assert np.count_nonzero(grad) == 3


def test_l2_three_four_five():
    x = np.zeros(2)
    value, _ = distance_value_grad("l2", np.array([3.0, 4.0]) / 255, x)
    assert value == pytest.approx(5 / 255, rel=1e-14)


def test_scalar_oracle_reproduces_published_pairs():
    for lab1, lab2, expected in sharma_pairs():
        assert abs(delta_e00(lab1, lab2) - expected) <= 1e-4


def test_vectorized_ciede2000_matches_scalar_oracle():
    pairs = list(sharma_pairs())
    lab1 = np.array([p[0] for p in pairs]).T
    lab2 = np.array([p[1] for p in pairs]).T
    got = ciede2000(lab1, lab2)
    for k, (a, b, _) in enumerate(pairs):
        assert abs(got[k] - delta_e00(a, b)) < 1e-4
        # and the other argument order
        assert abs(ciede2000(np.array(b), np.array(a)) - delta_e00(b, a)) < 1e-4


def test_ciede2000_matches_oracle_on_random_colours():
    rng = np.random.default_rng(1)
    lab1 = np.stack([rng.uniform(0, 100, 500), rng.uniform(-80, 80, 500), rng.uniform(-80, 80, 500)])
    lab2 = lab1 + rng.normal(0, 10, lab1.shape)
    got = ciede2000(lab1, lab2)
    want = [delta_e00(lab1[:, i], lab2[:, i]) for i in range(500)]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_black_maps_to_origin():
    np.testing.assert_allclose(rgb_to_lab(np.zeros((3, 1, 1))).ravel(), [0.0, 0.0, 0.0], atol=1e-12)


def test_white_point_fixture():
    # frozen from a scalar evaluation of the same pipeline (XYZ scaled by 100)
    lab = rgb_to_lab(np.ones((3, 1, 1))).ravel()
    np.testing.assert_allclose(lab, [100.00000386666655, -0.0033483072923723434, 0.0006189409285983771], rtol=1e-12)


def test_gray_ramp_lightness_strictly_increases():
    g = np.linspace(0, 1, 257)
    lightness = rgb_to_lab(np.stack([g, g, g]))[0]
    assert np.all(np.diff(lightness) > 0)
    assert lightness.min() >= 0 and lightness.max() <= 100.0001


def test_rgb_to_lab_rejects_out_of_range_and_bad_shape():
    with pytest.raises(ValueError):
        rgb_to_lab(np.full((3, 2, 2), 1.5))
    with pytest.raises(UnsupportedShapeError):
        rgb_to_lab(np.zeros((1, 2, 2)))


def test_perceptual_kinds_need_three_channels():
    x = np.zeros((1, 4, 4))
    for kind in ("ciede2000", "ssim"):
        with pytest.raises(UnsupportedShapeError):
            distance_value_grad(kind, x, x)
    with pytest.raises(ValueError):
        distance_value_grad("l2", np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("kind", KINDS)
def test_identity_and_nonnegativity(kind):
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.uniform(size=(3, 6, 6))
        xt = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert distance_value_grad(kind, x, x)[0] == pytest.approx(0.0, abs=1e-12)
        assert distance_value_grad(kind, xt, x)[0] >= 0


@pytest.mark.parametrize("kind", [DistanceKind.L1, DistanceKind.L2, DistanceKind.CIEDE2000])
def test_symmetry(kind):
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.uniform(size=(2, 3, 5, 5))
        assert distance(kind, a, b) == pytest.approx(distance(kind, b, a), abs=1e-9)


def test_lp_homogeneity():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(3, 4, 4))
    delta = rng.normal(size=x.shape)
    for c in (-2.5, 0.3, 4.0):
        for kind in ("l1", "l2"):
            assert distance(kind, x + c * delta, x) == pytest.approx(abs(c) * distance(kind, x + delta, x), rel=1e-12)


def test_ssim_matches_skimage():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.uniform(size=(3, 16, 16))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        ref = np.mean(
            [
                metrics.structural_similarity(
                    x[c], y[c], data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
                )
                for c in range(3)
            ]
        )
        assert ssim(x, y) == pytest.approx(ref, abs=1e-12)


def test_ssim_range_and_self_similarity():
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.uniform(size=(3, 8, 8))
        y = rng.uniform(size=(3, 8, 8))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
        d = distance("ssim", y, x)
        assert 0.0 <= d <= 2.0
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


def test_ssim_window_shrinks_to_fit():
    spec = DistanceSpec("ssim")
    assert effective_window(spec, 32, 32) == 11
    assert effective_window(spec, 8, 8) == 7
    assert effective_window(spec, 6, 9) == 5


def test_ciede2000_accumulations():
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(3, 4, 4))
    xt = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    per_pixel = ciede2000(rgb_to_lab(xt), rgb_to_lab(x))
    assert distance(DistanceSpec("ciede2000"), xt, x) == pytest.approx(per_pixel.sum(), rel=1e-12)
    assert distance(DistanceSpec("ciede2000", ciede2000_accumulation="mean"), xt, x) == pytest.approx(
        per_pixel.mean(), rel=1e-12
    )
    assert distance(DistanceSpec("ciede2000", ciede2000_accumulation="l2"), xt, x) == pytest.approx(
        math.sqrt(np.sum(per_pixel ** 2)), rel=1e-12
    )
    with pytest.raises(ValueError):
        DistanceSpec("ciede2000", ciede2000_accumulation="max")


def _smooth_pair(rng, kind):
    x = rng.uniform(0.05, 0.95, size=(3, 4, 4))
    xt = np.clip(x + rng.normal(0, 0.05, x.shape), 0.01, 0.99)
    if kind is DistanceKind.L1:
        # keep every coordinate away from the kink at delta = 0
        xt = np.where(np.abs(xt - x) < 1e-3, x + 0.01, xt)
    return xt, x


@pytest.mark.parametrize("kind", KINDS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(8)
    accumulations = ("sum", "mean", "l2")
    for n in range(100):
        spec = DistanceSpec(kind, ciede2000_accumulation=accumulations[n % 3])
        xt, x = _smooth_pair(rng, kind)
        _, grad = distance_value_grad(spec, xt, x)
        fd = central_difference(lambda v: distance(spec, v, x), xt)
        assert relative_error(grad, fd) < 1e-4


def test_fused_ciede2000_gradient_matches_tape():
    from alma import tape
    from alma.distances import _accumulate, _ciede2000, _rgb_to_lab

    rng = np.random.default_rng(9)
    for n in range(30):
        x = rng.uniform(size=(3, 5, 5))
        if n % 3 == 0:
            x[:, :2] = x[0, :2]  # gray pixels hit the achromatic branch
        xt = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        ref = _rgb_to_lab(x)
        for how in ("sum", "mean", "l2"):
            value, grad = distance_value_grad(DistanceSpec("ciede2000", ciede2000_accumulation=how), xt, x)
            v2, g2 = tape.value_and_grad(lambda v: _accumulate(_ciede2000(_rgb_to_lab(v), ref), how), xt)
            assert value == pytest.approx(v2, rel=1e-12)
            assert relative_error(grad, g2) < 1e-10
