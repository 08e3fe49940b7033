import numpy as np
import pytest
import torch

from motionseg.nets import (AffineResidualHead, Backbone, ColorStatsAuxFeatures,
                            ResidualHead, ScalingHead, SegHead, SegmentationModel,
                            build_aux_provider, cosine_map)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = SegmentationModel()
    m.eval()
    return m


def test_stride_four_with_merging(model):
    x = torch.rand(1, 3, 64, 64)
    feats, late = model.features(x)
    assert feats.shape[-2:] == (16, 16)
    assert late.shape[-2:] == (8, 8)
    assert model.forward_masks(x).shape == (1, 4, 16, 16)


def test_merging_off_halves_resolution():
    torch.manual_seed(0)
    m = SegmentationModel(feature_merging=False)
    m.eval()
    assert m.forward_masks(torch.rand(1, 3, 64, 64)).shape[-2:] == (8, 8)


def test_identical_frames_identical_features(model):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a, _ = model.features(x)
        b, _ = model.features(x.clone())
    np.testing.assert_array_equal(a.numpy(), b.numpy())


def test_constant_zero_frame_is_finite(model):
    with torch.no_grad():
        feats, late = model.features(torch.zeros(1, 3, 64, 64))
        masks = model.forward_masks(torch.zeros(1, 3, 64, 64))
    assert torch.isfinite(feats).all() and torch.isfinite(late).all()
    assert torch.isfinite(masks).all()


def test_non_multiple_of_stride_rejected(model):
    with pytest.raises(ValueError, match="stride"):
        model.forward_masks(torch.rand(1, 3, 60, 60))


def test_softmax_channel_sums(model):
    with torch.no_grad():
        masks = model.forward_masks(torch.rand(2, 3, 64, 64))
    np.testing.assert_allclose(masks.sum(dim=1).numpy(), 1.0, atol=1e-5)
    assert masks.min() > 0.0 and masks.max() < 1.0


def test_default_channel_count(model):
    assert model.num_channels == 4
    assert model.forward_masks(torch.rand(1, 3, 32, 32)).shape[1] == 4


def test_residual_head_zero_preactivation_zero_output():
    head = ResidualHead(8, num_channels=2, hidden=4, lam=10.0)
    # projection starts at zero, so the head is exactly zero at init
    out = head(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8), (16, 16))
    assert out.abs().max().item() == 0.0
    assert out.shape == (1, 2, 2, 16, 16)


@pytest.mark.parametrize("lam", [10.0, 1.0])
def test_residual_bound_is_strict(lam):
    torch.manual_seed(1)
    head = ResidualHead(8, num_channels=3, hidden=8, lam=lam)
    torch.nn.init.normal_(head.proj.weight, std=5.0)  # drive tanh hard
    head.eval()
    with torch.no_grad():
        for _ in range(20):
            out = head(torch.randn(2, 4, 8, 8) * 3, torch.randn(2, 4, 8, 8) * 3, (16, 16))
            assert out.abs().max().item() < lam


def test_scaling_head_unit_at_init():
    head = ScalingHead(8, num_channels=2, hidden=4)
    head.eval()
    with torch.no_grad():
        out = head(torch.rand(1, 4, 4, 4), torch.rand(1, 4, 4, 4), (4, 4))
    np.testing.assert_allclose(out.numpy(), 1.0)


def test_affine_head_zero_at_init_and_bounded():
    head = AffineResidualHead(8, num_channels=2, hidden=8, lam=5.0)
    head.eval()
    masks = torch.softmax(torch.randn(1, 2, 8, 8), dim=1)
    with torch.no_grad():
        out = head(torch.rand(1, 8, 4, 4), torch.rand(1, 8, 4, 4), masks, (8, 8))
    np.testing.assert_allclose(out.numpy(), 0.0)
    torch.nn.init.normal_(head.fc2.weight, std=30.0)
    with torch.no_grad():
        out = head(torch.rand(1, 8, 4, 4) * 5, torch.rand(1, 8, 4, 4), masks, (8, 8))
    assert out.abs().max().item() < 5.0
    # affine structure: each channel's field is linear in grid coordinates,
    # so second differences along an axis vanish (before the tanh saturates)
    head2 = AffineResidualHead(8, num_channels=1, hidden=8, lam=1e6)
    torch.nn.init.normal_(head2.fc2.weight, std=0.1)
    with torch.no_grad():
        f = head2(torch.rand(1, 8, 4, 4), torch.rand(1, 8, 4, 4),
                  torch.ones(1, 1, 8, 8), (8, 8))[0, 0, 0]
    d2 = f[:, 2:] - 2 * f[:, 1:-1] + f[:, :-2]
    np.testing.assert_allclose(d2.numpy(), 0.0, atol=1e-5)


def test_backbone_gradients_reach_input():
    # finite differences vs autograd through backbone + head at 3 probe pixels
    torch.manual_seed(3)
    model = SegmentationModel(backbone_channels=(8, 8, 16, 16), head_hidden=8).double()
    model.eval()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 4, 4, dtype=torch.float64)

    def scalar(inp):
        return (model.forward_masks(inp) * w).sum()

    loss = scalar(x)
    (grad,) = torch.autograd.grad(loss, x)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(3):
        c, i, j = rng.integers(0, 3), rng.integers(0, 16), rng.integers(0, 16)
        xp = x.detach().clone()
        xp[0, c, i, j] += eps
        xm = x.detach().clone()
        xm[0, c, i, j] -= eps
        with torch.no_grad():
            fd = (scalar(xp) - scalar(xm)).item() / (2 * eps)
        an = grad[0, c, i, j].item()
        assert abs(fd - an) <= 1e-3 * max(1.0, abs(an))


def test_aux_features_deterministic_and_normalized():
    prov = ColorStatsAuxFeatures()
    frame = np.random.default_rng(0).uniform(0, 1, size=(3, 32, 32)).astype(np.float32)
    a = prov.features(frame)
    b = prov.features(frame.copy())
    np.testing.assert_array_equal(a, b)
    norms = np.sqrt((a ** 2).sum(axis=0))
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_aux_cosine_with_self_is_one():
    prov = ColorStatsAuxFeatures()
    frame = np.full((3, 16, 16), 0.0, dtype=np.float32)
    frame[0] = 0.8
    feats = prov.features(frame)
    cos = cosine_map(feats, feats[:, 8, 8])
    np.testing.assert_allclose(cos, 1.0, atol=1e-9)


def test_aux_flat_frame_uniform_features():
    prov = ColorStatsAuxFeatures()
    frame = np.full((3, 24, 24), 0.0, dtype=np.float32)
    frame[0], frame[1], frame[2] = 0.2, 0.5, 0.7
    feats = prov.features(frame)
    spread = feats.reshape(6, -1).std(axis=1).max()
    assert spread < 1e-6


def test_aux_features_at_alignment():
    prov = ColorStatsAuxFeatures()
    frame = np.random.default_rng(1).uniform(0, 1, size=(3, 64, 64)).astype(np.float32)
    feats = prov.features_at(frame, (16, 16))
    assert feats.shape == (6, 16, 16)
    np.testing.assert_allclose(np.sqrt((feats ** 2).sum(axis=0)), 1.0, atol=1e-6)


def test_aux_provider_registry():
    assert build_aux_provider("none") is None
    assert isinstance(build_aux_provider("color_stats"), ColorStatsAuxFeatures)
    with pytest.raises(KeyError):
        build_aux_provider("imagenet")


def test_predict_masks_numpy_roundtrip(model):
    frame = np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32)
    masks = model.predict_masks(frame)
    assert masks.shape == (4, 16, 16)
    np.testing.assert_allclose(masks.sum(axis=0), 1.0, atol=1e-5)
