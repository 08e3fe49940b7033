import numpy as np
import pytest

from motionseg.crf import CrfParams, crf_refine, mean_field, unary_from_prob


def brute_force_mean_field(prob, image, params):
    """Reference mean field: explicit O(N^2) pair enumeration."""
    H, W = prob.shape
    N = H * W
    ys, xs = np.divmod(np.arange(N), W)
    d2 = (ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2
    img = image.reshape(3, N)
    cd2 = ((img[:, :, None] - img[:, None, :]) ** 2).sum(axis=0)

    def kernel(sigma, color_sigma=None):
        K = np.exp(-d2 / (2.0 * sigma ** 2))
        if color_sigma is not None:
            K = K * np.exp(-cd2 / (2.0 * color_sigma ** 2))
        K[d2 > (params.truncation * sigma) ** 2] = 0.0
        np.fill_diagonal(K, 0.0)
        return K

    Ka = kernel(params.spatial_sigma, params.color_sigma)
    Ks = kernel(params.smooth_sigma)
    p = np.clip(prob.reshape(N), 1e-8, 1 - 1e-8)
    unary = np.stack([-np.log(1 - p), -np.log(p)])
    Q = np.exp(-unary)
    Q /= Q.sum(axis=0)
    for _ in range(params.iterations):
        msg = params.appearance_weight * (Q @ Ka.T) + params.smooth_weight * (Q @ Ks.T)
        energy = unary + msg[::-1]
        energy -= energy.min(axis=0)
        Q = np.exp(-energy)
        Q /= Q.sum(axis=0)
    return Q[1].reshape(H, W)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_brute_force_reference(seed):
    rng = np.random.default_rng(seed)
    H = W = 10
    image = rng.uniform(0, 1, size=(3, H, W))
    prob = rng.uniform(0.05, 0.95, size=(H, W))
    params = CrfParams(iterations=3)
    ours = crf_refine(prob, image, params)
    ref = brute_force_mean_field(prob, image, params)
    np.testing.assert_allclose(ours, ref, atol=1e-9)


def test_uniform_mask_uniform_image_is_fixed_point():
    params = CrfParams()
    prob = np.full((12, 12), 0.5)
    image = np.full((3, 12, 12), 0.3)
    out = crf_refine(prob, image, params)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


def test_confident_indicator_on_flat_colors_is_preserved():
    # 16x16 fixture: flat-color sprite on flat background, confident unaries
    H = W = 16
    image = np.full((3, H, W), 0.1)
    gt = np.zeros((H, W), dtype=bool)
    gt[4:12, 5:11] = True
    image[0][gt] = 0.9
    image[1][gt] = 0.2
    prob = np.where(gt, 0.95, 0.05)
    out = crf_refine(prob, image, CrfParams())
    np.testing.assert_array_equal(out >= 0.5, gt)


def test_interior_flip_is_pulled_up():
    # 5x5 fixture: one unconfident pixel inside a homogeneous confident region
    H = W = 5
    image = np.full((3, H, W), 0.6)
    prob = np.full((H, W), 0.9)
    prob[2, 2] = 0.4
    out = crf_refine(prob, image, CrfParams())
    assert out[2, 2] > 0.5


def test_output_in_unit_interval_and_normalized():
    rng = np.random.default_rng(123)
    for _ in range(20):
        H, W = rng.integers(3, 9, size=2)
        image = rng.uniform(0, 1, size=(3, H, W))
        prob = rng.uniform(0, 1, size=(H, W))
        for iters in (1, 3):
            Q = mean_field(unary_from_prob(prob), image,
                           CrfParams(iterations=int(iters)))
            assert Q.min() >= 0.0 and Q.max() <= 1.0
            np.testing.assert_allclose(Q.sum(axis=0), 1.0, atol=1e-12)


def test_deterministic():
    rng = np.random.default_rng(5)
    image = rng.uniform(0, 1, size=(3, 14, 14))
    prob = rng.uniform(0, 1, size=(14, 14))
    a = crf_refine(prob, image, CrfParams())
    b = crf_refine(prob, image, CrfParams())
    np.testing.assert_array_equal(a, b)


def test_rejects_non_finite():
    image = np.full((3, 4, 4), 0.5)
    prob = np.full((4, 4), 0.5)
    prob[0, 0] = np.nan
    with pytest.raises(ValueError):
        crf_refine(prob, image, CrfParams())


def test_rejects_out_of_range_mask():
    image = np.full((3, 4, 4), 0.5)
    with pytest.raises(ValueError):
        crf_refine(np.full((4, 4), 1.5), image, CrfParams())
