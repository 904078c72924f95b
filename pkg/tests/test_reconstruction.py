import numpy as np
import pytest
import torch

from ssc import checkpoint
from ssc.reconstruction import (
    Decoder,
    LossNetwork,
    perceptual_loss,
    perceptual_weights,
    pixel_loss,
    reconstruct,
    stage_loss,
    to_signed,
    to_unit,
)


def test_decoder_recovers_image_shape():
    dec = Decoder(in_channels=3, seed=0)
    feats = torch.randn(2, 3, 4, 4)
    out = reconstruct(feats, dec)
    assert out.shape == (2, 3, 64, 64)


def test_decoder_output_range():
    dec = Decoder(in_channels=5, seed=0)
    out = dec(torch.randn(1, 5, 4, 4) * 10)
    assert out.min() > -1.0 and out.max() < 1.0
    unit = to_unit(out)
    assert unit.min() >= 0.0 and unit.max() <= 1.0


def test_decoder_channel_mismatch():
    dec = Decoder(in_channels=3, seed=0)
    with pytest.raises(ValueError, match="channels"):
        dec(torch.randn(1, 4, 4, 4))


def test_decoder_seeded_init_reproducible():
    a = Decoder(in_channels=3, seed=7)
    b = Decoder(in_channels=3, seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(pa, pb)


def test_decoder_gradient_matches_fd():
    torch.manual_seed(0)
    dec = Decoder(in_channels=2, width=2, n_up=2, seed=3).double()
    feats = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    loss = dec(feats).mean()
    params = list(dec.parameters())
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    checked = 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(0, flat.numel(), max(1, flat.numel() // 3)):
                orig = flat[i].item()
                flat[i] = orig + h
                hi = dec(feats).mean().item()
                flat[i] = orig - h
                lo = dec(feats).mean().item()
                flat[i] = orig
                fd = (hi - lo) / (2 * h)
                denom = max(abs(fd), abs(gflat[i].item()), 1e-8)
                assert abs(fd - gflat[i].item()) / denom < 1e-3
                checked += 1
    assert checked > 20


class _StubLossNet:
    """Duck-typed loss network returning canned stage features."""

    def __init__(self, features_by_image):
        self._map = features_by_image
        self.n_stages = len(next(iter(features_by_image.values())))

    def features(self, x):
        return self._map[id(x)]


def test_stage_loss_formula():
    a = torch.zeros(1)
    b = torch.zeros(1)
    stub = _StubLossNet({id(a): [torch.tensor([[[2.0]]])], id(b): [torch.tensor([[[3.0]]])]})
    assert stage_loss(stub, a, b, 1).item() == pytest.approx(1.0)
    assert stage_loss(stub, b, a, 1).item() == pytest.approx(1.0)  # symmetric


def test_stage_loss_zero_for_identical():
    net = LossNetwork(stage_channels=(4, 4), seed=0)
    x = to_signed(torch.rand(1, 3, 16, 16))
    for j in (1, 2):
        assert stage_loss(net, x, x, j).item() == 0.0


def test_perceptual_weights_j5():
    assert perceptual_weights(5) == [0.03125, 0.0625, 0.125, 0.25, 0.5]


def test_perceptual_weight_combination(rng):
    for _ in range(50):
        j = int(rng.integers(1, 8))
        stage_vals = rng.random(j)
        a = torch.zeros(1)
        b = torch.zeros(1)
        stub = _StubLossNet(
            {
                id(a): [torch.tensor([[[float(v)]]]) for v in stage_vals],
                id(b): [torch.tensor([[[0.0]]]) for _ in stage_vals],
            }
        )
        expected = sum(v / 2.0 ** ((j + 1) - (i + 1)) for i, v in enumerate(stage_vals))
        assert perceptual_loss(stub, a, b).item() == pytest.approx(expected, rel=1e-6)


def test_perceptual_loss_single_stage():
    a = torch.zeros(1)
    b = torch.zeros(1)
    stub = _StubLossNet({id(a): [torch.tensor([[[1.0]]])], id(b): [torch.tensor([[[0.0]]])]})
    assert perceptual_loss(stub, a, b).item() == pytest.approx(0.5)


def test_perceptual_loss_identity_and_symmetry(rng):
    net = LossNetwork(stage_channels=(4, 4, 4), seed=1)
    for _ in range(5):
        x = to_signed(torch.tensor(rng.random((1, 3, 16, 16)), dtype=torch.float32))
        y = to_signed(torch.tensor(rng.random((1, 3, 16, 16)), dtype=torch.float32))
        assert perceptual_loss(net, x, x).item() == 0.0
        fwd = perceptual_loss(net, x, y).item()
        bwd = perceptual_loss(net, y, x).item()
        assert fwd == pytest.approx(bwd, rel=1e-6)
        assert fwd >= 0.0


def test_perceptual_gradient_wrt_features():
    net = LossNetwork(stage_channels=(2, 2), seed=2).double()
    dec = Decoder(in_channels=2, width=2, n_up=2, seed=4).double()
    torch.manual_seed(5)
    feats = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    image = to_signed(torch.rand(1, 3, 16, 16, dtype=torch.float64))
    loss = perceptual_loss(net, dec(feats), image)
    (grad,) = torch.autograd.grad(loss, feats)
    h = 1e-6
    with torch.no_grad():
        for i in range(0, 32, 5):
            flat = feats.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            hi = perceptual_loss(net, dec(feats), image).item()
            flat[i] = orig - h
            lo = perceptual_loss(net, dec(feats), image).item()
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            denom = max(abs(fd), abs(grad.view(-1)[i].item()), 1e-10)
            assert abs(fd - grad.view(-1)[i].item()) / denom < 1e-6


def test_loss_network_frozen_and_decreasing():
    net = LossNetwork(seed=9)
    assert all(not p.requires_grad for p in net.parameters())
    feats = net.features(to_signed(torch.rand(1, 3, 64, 64)))
    assert len(feats) == 5
    sizes = [f.shape[-1] for f in feats]
    assert sizes == sorted(sizes, reverse=True)
    assert len(set(sizes)) == len(sizes)  # strictly decreasing


def test_loss_network_weight_file_round_trip(tmp_path):
    net = LossNetwork(stage_channels=(4, 8), seed=3)
    path = tmp_path / "lossnet.ssck"
    net.save_weights(path)
    other = LossNetwork(stage_channels=(4, 8), seed=99)
    other.load_weights(path)
    for a, b in zip(net.parameters(), other.parameters()):
        torch.testing.assert_close(a, b)
    assert all(not p.requires_grad for p in other.parameters())


def test_pixel_loss():
    a = torch.rand(2, 3, 8, 8)
    assert pixel_loss(a, a, "L1").item() == 0.0
    assert pixel_loss(a, a, "L2").item() == 0.0
    b = a + 0.5
    assert pixel_loss(b, a, "L1").item() == pytest.approx(0.5, rel=1e-6)
    assert pixel_loss(b, a, "L2").item() == pytest.approx(0.25, rel=1e-6)
    with pytest.raises(ValueError, match="kind"):
        pixel_loss(a, a, "huber")
    with pytest.raises(ValueError, match="mismatch"):
        pixel_loss(a, torch.rand(2, 3, 4, 4), "L1")


def test_pixel_l2_below_l1_for_small_differences(rng):
    for _ in range(20):
        a = torch.tensor(rng.random((4, 4)))
        b = torch.tensor(rng.random((4, 4)))
        assert pixel_loss(a, b, "L2").item() <= pixel_loss(a, b, "L1").item() + 1e-12
