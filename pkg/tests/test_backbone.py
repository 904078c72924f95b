import numpy as np
import pytest
import torch

from ssc.backbone import (
    CamBackbone,
    classification_loss,
    classify,
    drs_suppress,
    image_to_tensor,
    normalize_cam,
)


def test_feature_geometry():
    net = CamBackbone(3)
    x = torch.rand(2, 3, 64, 64)
    feats = net.forward_features(x)
    assert feats.shape == (2, 3, 4, 4)
    assert net.stride == 16
    assert torch.isfinite(feats).all()


def test_zero_classifier_gives_zero_features():
    net = CamBackbone(4)
    torch.nn.init.zeros_(net.classifier.weight)
    feats = net.forward_features(torch.rand(1, 3, 64, 64))
    assert torch.count_nonzero(feats) == 0


def test_dimension_mismatch():
    net = CamBackbone(3)
    with pytest.raises(ValueError, match="divisible"):
        net.forward_features(torch.rand(1, 3, 60, 64))
    with pytest.raises(ValueError, match="expected"):
        net.forward_features(torch.rand(1, 1, 64, 64))


def test_drs_changes_only_above_bound():
    torch.manual_seed(0)
    net = CamBackbone(3)
    x = torch.rand(1, 3, 64, 64)
    _, stages_off = net.forward_features(x, drs_enabled=False, return_stages=True)
    _, stages_on = net.forward_features(x, drs_enabled=True, return_stages=True)
    # stages 1-2 share inputs in both runs, so the first suppressed stage (index 2)
    # differs exactly where the raw values exceed 0.55 x channel max
    raw = stages_off[2]
    bound = 0.55 * raw.amax(dim=(-2, -1), keepdim=True)
    changed = (stages_on[2] != raw)
    np.testing.assert_array_equal(changed.numpy(), (raw > bound).numpy())
    assert not torch.equal(stages_on[3], stages_off[3])


def test_drs_examples():
    x = torch.tensor([[[7.0, 10.0], [3.0, 1.0]]])
    out = drs_suppress(x)
    assert out[0, 0, 0] == pytest.approx(5.5)   # clipped at 0.55 * 10
    assert out[0, 1, 0] == pytest.approx(3.0)   # below the bound, unchanged
    const = drs_suppress(torch.ones(1, 4, 4))
    assert torch.all(const == 0.55)


def test_drs_properties(rng):
    for _ in range(200):
        x = torch.tensor(rng.normal(size=(2, 3, 5, 5)))
        out = drs_suppress(x)
        assert torch.all(out <= x + 1e-12)
        bound = 0.55 * x.amax(dim=(-2, -1), keepdim=True)
        keep = x <= bound
        assert torch.equal(out[keep], x[keep])
        # elementwise monotone: shifting any input up never lowers any output
        y = x + torch.tensor(rng.random(size=x.shape))
        assert torch.all(drs_suppress(y) >= out - 1e-12)


def test_normalize_cam_examples():
    np.testing.assert_array_equal(
        normalize_cam(torch.tensor([[-1.0, -2.0], [-3.0, -0.5]])).numpy(), np.zeros((2, 2))
    )
    np.testing.assert_allclose(
        normalize_cam(torch.tensor([[0.0, 2.0], [4.0, 1.0]])).numpy(),
        [[0.0, 0.5], [1.0, 0.25]],
    )
    assert normalize_cam(torch.tensor([[3.0]])).item() == 1.0


def test_normalize_cam_properties(rng):
    for _ in range(200):
        x = torch.tensor(rng.normal(size=(6, 6)))
        a = normalize_cam(x)
        assert a.min() >= 0.0 and a.max() <= 1.0
        if (x > 0).any():
            assert a.max().item() == pytest.approx(1.0)
        else:
            assert a.max().item() == 0.0
        alpha = float(rng.uniform(0.1, 10.0))
        torch.testing.assert_close(normalize_cam(alpha * x), a)


def test_classify_examples():
    feats = torch.full((1, 1, 3, 3), 2.5)
    assert classify(feats).item() == pytest.approx(2.5)
    feats = torch.tensor([[[[0.0, 4.0], [0.0, 0.0]]]])
    assert classify(feats).item() == pytest.approx(1.0)
    assert classify(torch.zeros(1, 3, 4, 4)).abs().sum() == 0


def test_classification_loss_examples():
    assert classification_loss(torch.tensor([0.0]), torch.tensor([1.0])).item() == pytest.approx(
        np.log(2.0), rel=1e-6
    )
    assert classification_loss(
        torch.tensor([0.0, 0.0]), torch.tensor([1.0, 0.0])
    ).item() == pytest.approx(np.log(2.0), rel=1e-6)
    # high-confidence case against an independently computed softplus oracle
    value = classification_loss(
        torch.tensor([20.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)
    ).item()
    assert value == pytest.approx(float(np.log1p(np.exp(-20.0))), rel=1e-6)


def test_classification_loss_nonnegative(rng):
    for _ in range(200):
        q = torch.tensor(rng.normal(scale=5.0, size=8))
        y = torch.tensor((rng.random(8) < 0.5).astype(np.float64))
        assert classification_loss(q, y).item() >= 0.0


def test_classification_loss_gradient_matches_fd(rng):
    for _ in range(20):
        q = torch.tensor(rng.normal(size=8), dtype=torch.float32, requires_grad=True)
        y = torch.tensor((rng.random(8) < 0.5).astype(np.float32))
        loss = classification_loss(q, y)
        (grad,) = torch.autograd.grad(loss, q)
        h = 1e-3
        with torch.no_grad():
            for i in range(8):
                e = torch.zeros(8)
                e[i] = h
                fd = (
                    classification_loss(q + e, y) - classification_loss(q - e, y)
                ).item() / (2 * h)
                denom = max(abs(fd), abs(grad[i].item()), 1e-4)
                assert abs(fd - grad[i].item()) / denom < 1e-3


def test_forward_is_differentiable():
    torch.manual_seed(1)
    net = CamBackbone(2, stage_channels=(2, 2, 2, 2)).double()
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)

    def loss_value():
        return classification_loss(classify(net.forward_features(x, drs_enabled=True)), y)

    loss = loss_value()
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params)
    # directional derivative against central differences in one random direction
    torch.manual_seed(2)
    direction = [torch.randn_like(p) for p in params]
    analytic = sum((g * d).sum().item() for g, d in zip(grads, direction))
    h = 1e-6
    with torch.no_grad():
        for p, d in zip(params, direction):
            p += h * d
        hi = loss_value().item()
        for p, d in zip(params, direction):
            p -= 2 * h * d
        lo = loss_value().item()
        for p, d in zip(params, direction):
            p += h * d
    fd = (hi - lo) / (2 * h)
    assert abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12) < 1e-3


def test_image_to_tensor():
    image = np.zeros((32, 48, 3), dtype=np.float32)
    image[0, 0] = [0.1, 0.2, 0.3]
    t = image_to_tensor(image)
    assert t.shape == (1, 3, 32, 48)
    np.testing.assert_allclose(t[0, :, 0, 0].numpy(), [0.1, 0.2, 0.3])
