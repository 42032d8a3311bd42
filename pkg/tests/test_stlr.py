import pytest
import torch
import torch.nn.functional as F

from stinet.stlr import (InteractionNet, LocalRefine, OffsetPredictor, deform_align,
                         downsample_offsets, inet_interact, upsample_offsets, window_indices)

torchvision_ops = pytest.importorskip("torchvision.ops")


def test_zero_offsets_equal_conv():
    for _ in range(10):
        x = torch.randn(2, 5, 9, 7)
        w, b = torch.randn(4, 5, 3, 3), torch.randn(4)
        out = deform_align(x, torch.zeros(2, 18, 9, 7), w, b)
        assert (out - F.conv2d(x, w, b, padding=1)).abs().max() < 1e-5


def test_matches_torchvision_deform_conv():
    torch.manual_seed(1)
    x = torch.randn(2, 4, 10, 12, dtype=torch.float64)
    off = 2.5 * torch.randn(2, 18, 10, 12, dtype=torch.float64)
    w, b = torch.randn(3, 4, 3, 3, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
    ref = torchvision_ops.deform_conv2d(x, off, w, b, padding=1)
    assert (deform_align(x, off, w, b) - ref).abs().max() < 1e-10


def test_constant_offset_shifts_interior():
    c = 3
    x = torch.randn(1, c, 8, 10, dtype=torch.float64)
    w = torch.zeros(c, c, 3, 3, dtype=torch.float64)
    w[range(c), range(c), 1, 1] = 1.0
    off = torch.zeros(1, 18, 8, 10, dtype=torch.float64)
    off[:, 1::2] = 1.0  # x displacement of every tap
    out = deform_align(x, off, w)
    assert (out[..., :-1] - x[..., 1:]).abs().max() < 1e-6


def test_deform_gradcheck():
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    off = (torch.rand(1, 18, 8, 8, dtype=torch.float64) * 3 - 1.5).requires_grad_()
    w = torch.randn(2, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(deform_align, (x, off, w), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_shape_errors():
    with pytest.raises(ValueError):
        deform_align(torch.zeros(1, 2, 4, 4), torch.zeros(1, 16, 4, 4), torch.zeros(2, 2, 3, 3))
    with pytest.raises(ValueError):
        OffsetPredictor(4)(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 32, 32))


def test_offset_predictor_shape_and_zero_init():
    pred = OffsetPredictor(64)
    f = torch.randn(1, 64, 32, 32)
    s = pred(f, f)
    assert s.shape == (1, 18, 32, 32) and torch.equal(s, torch.zeros_like(s))


def test_inet_residual_at_init_and_bypass():
    inet = InteractionNet()
    s_lr, s_hr = torch.randn(1, 18, 32, 32), torch.randn(1, 18, 128, 128)
    lr, hr = inet_interact(inet, s_lr, s_hr, "prev", "prev")
    assert lr.shape == s_lr.shape and hr.shape == s_hr.shape
    assert torch.equal(lr, s_lr) and torch.equal(hr, s_hr)
    assert inet_interact(None, s_lr, s_hr)[0] is s_lr
    with pytest.raises(ValueError):
        inet_interact(inet, s_lr, s_hr, "prev", "next")


def test_inet_heads_react_once_trained():
    inet = InteractionNet()
    for head in (inet.head_lr, inet.head_hr):
        torch.nn.init.normal_(head.weight, std=0.1)
    s_lr, s_hr = torch.randn(1, 18, 4, 4), torch.randn(1, 18, 16, 16)
    lr, hr = inet(s_lr, s_hr)
    assert not torch.allclose(lr, s_lr) and not torch.allclose(hr, s_hr)


def test_offset_resampling_scales_values():
    s = torch.full((1, 18, 4, 4), 0.5)
    assert torch.allclose(upsample_offsets(s), torch.full((1, 18, 16, 16), 2.0))
    assert torch.allclose(downsample_offsets(torch.full((1, 18, 16, 16), 2.0)), s)


def test_lr_only_reuses_upsampled_offsets():
    net = LocalRefine(4, offsets="lr_only")
    with torch.no_grad():
        for p in net.predict.parameters():
            p.normal_(0, 0.1)
    l = [torch.randn(1, 4, 4, 4) for _ in range(3)]
    h = [torch.randn(1, 4, 16, 16) for _ in range(3)]
    off = net.window_offsets({"lr": l, "hr": h})
    assert torch.equal(off["hr", "prev"], upsample_offsets(off["lr", "prev"]))
    assert set(net.predict) == {"lr_prev", "lr_next"} and net.inet is None


def test_window_shapes_and_boundary_rule():
    net = LocalRefine(64)
    window = [torch.randn(1, 64, 32, 32) for _ in range(3)] + [torch.randn(1, 64, 128, 128) for _ in range(3)]
    l, h = net.forward_window(*window)
    assert l.shape == (1, 64, 32, 32) and h.shape == (1, 64, 128, 128)

    assert window_indices(7) == ([0, 0, 1, 2, 3, 4, 5], [1, 2, 3, 4, 5, 6, 6])
    small = LocalRefine(4)
    with torch.no_grad():
        for p in small.predict.parameters():
            p.normal_(0, 0.1)
    L, H = torch.randn(2, 7, 4, 4, 4), torch.randn(2, 7, 4, 16, 16)
    Lr, Hr = small(L, H)
    assert Lr.shape == L.shape and Hr.shape == H.shape
    l0, h0 = small.forward_window(L[:, 0], L[:, 0], L[:, 1], H[:, 0], H[:, 0], H[:, 1])
    l6, h6 = small.forward_window(L[:, 5], L[:, 6], L[:, 6], H[:, 5], H[:, 6], H[:, 6])
    assert torch.allclose(Lr[:, 0], l0, atol=1e-6) and torch.allclose(Hr[:, 0], h0, atol=1e-6)
    assert torch.allclose(Lr[:, 6], l6, atol=1e-6) and torch.allclose(Hr[:, 6], h6, atol=1e-6)
    L1, H1 = small(L[:, :1], H[:, :1])
    assert L1.shape == (2, 1, 4, 4, 4)


def test_static_scene_probe_after_training():
    """Train a toy refiner to restore the centre from shifted neighbours."""
    torch.manual_seed(0)
    c = 4
    net = LocalRefine(c)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)

    def smooth(*shape):
        return F.avg_pool2d(torch.randn(*shape), 3, 1, 1)

    for _ in range(200):
        lf, hf = smooth(4, c, 8, 8), smooth(4, c, 32, 32)
        shift = lambda t, k: torch.roll(t, k, dims=-1)
        l, h = net.forward_window(shift(lf, 1), lf + 0.03 * torch.randn_like(lf), shift(lf, -1),
                                  shift(hf, 4), hf + 0.03 * torch.randn_like(hf), shift(hf, -4))
        loss = (l - lf).square().mean() + (h - hf).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        lf, hf = smooth(1, c, 8, 8), smooth(1, c, 32, 32)
        l, h = net.forward_window(lf, lf, lf, hf, hf, hf)
        assert (l - lf).norm() / lf.norm() < 0.1 and (h - hf).norm() / hf.norm() < 0.1
        s = net.predict_offsets("lr", "prev", torch.roll(lf, 1, -1), lf)
        assert s.abs().max() > 0
