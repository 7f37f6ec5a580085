import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hadeblur.attention import AttentionNet, attention_loss, gate_features, resample_attention
from hadeblur.network import init_parameters


def zero_net(widths=(4, 4, 4)):
    net = AttentionNet(3, widths)
    init_parameters(net, "zeros")
    return net


class TestForward:
    def test_zero_params_give_half(self):
        a = zero_net()(torch.rand(2, 3, 16, 24))
        assert torch.all(a == 0.5)

    def test_shape(self):
        net = AttentionNet()
        init_parameters(net, seed=0)
        assert net(torch.rand(1, 3, 256, 256)).shape == (1, 1, 256, 256)

    def test_strict_range(self):
        net = AttentionNet(3, (4, 8, 8))
        init_parameters(net, seed=3)
        a = net(torch.rand(3, 3, 32, 32) * 5)
        assert a.min() > 0 and a.max() < 1

    def test_indivisible(self):
        with pytest.raises(ValueError, match="8"):
            zero_net()(torch.rand(1, 3, 20, 16))

    def test_deterministic(self):
        net = AttentionNet(3, (4, 8, 8))
        init_parameters(net, seed=1)
        x = torch.rand(1, 3, 32, 32)
        assert torch.equal(net(x), net(x))


class TestLoss:
    def test_exact_match(self):
        g = torch.randint(0, 2, (1, 1, 8, 8)).float()
        assert attention_loss(g, g) == 0

    def test_half_gives_quarter(self):
        g = torch.randint(0, 2, (2, 1, 8, 8)).float()
        assert attention_loss(torch.full_like(g, 0.5), g).item() == 0.25

    def test_complement_gives_one(self):
        g = torch.randint(0, 2, (2, 1, 8, 8)).float()
        assert attention_loss(1 - g, g).item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            attention_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


class TestGating:
    def test_all_fg(self):
        h = torch.randn(1, 5, 4, 4)
        fg, bg = gate_features(h, torch.ones(1, 1, 16, 16))
        assert torch.equal(fg, h) and torch.all(bg == 0)

    def test_all_bg(self):
        h = torch.randn(1, 5, 4, 4)
        fg, bg = gate_features(h, torch.zeros(1, 1, 4, 4))
        assert torch.all(fg == 0) and torch.equal(bg, h)

    def test_elementwise(self):
        h = torch.tensor([4.0, 8.0]).view(1, 2, 1, 1)
        fg, bg = gate_features(h, torch.full((1, 1, 1, 1), 0.25))
        assert fg.flatten().tolist() == [1.0, 2.0]
        assert bg.flatten().tolist() == [3.0, 6.0]

    def test_area_resampling(self):
        a = torch.zeros(1, 1, 8, 8)
        a[..., :4, :4] = 1.0
        a[..., 4:, 4:] = 0.5
        r = resample_attention(a, (2, 2))
        assert r.flatten().tolist() == [1.0, 0.0, 0.0, 0.5]

    def test_incompatible_aspect(self):
        with pytest.raises(ValueError):
            gate_features(torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 16, 8))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_partition(self, seed):
        g = torch.Generator().manual_seed(seed)
        h = torch.randn(2, 6, 8, 8, generator=g)
        a = torch.rand(2, 1, 32, 32, generator=g)
        fg, bg = gate_features(h, a)
        assert torch.max(torch.abs(fg + bg - h)) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1.0, 1e4))
    def test_partition_within_rounding(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        h = torch.randn(1, 4, 8, 8, generator=g) * scale
        fg, bg = gate_features(h, torch.rand(1, 1, 8, 8, generator=g))
        eps = torch.finfo(h.dtype).eps
        assert torch.all(torch.abs(fg + bg - h) <= eps * torch.abs(h))
