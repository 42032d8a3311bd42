import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stinet.data import MotionSpec, SyntheticScene
from stinet.flow import (FlowEstimator, adapt_flow, correlation, dump_flow, estimate_flow, flow_to_color, interpolation_times,
                         load_flow, save_flow_png, warp_backward)


def test_adapt_midpoint_and_quarter():
    fwd = torch.randn(2, 8, 8, dtype=torch.float64)
    bwd = torch.randn(2, 8, 8, dtype=torch.float64)
    to_prev, to_next = adapt_flow(fwd, bwd, 0.0)
    assert torch.equal(to_prev, 0.5 * bwd) and torch.equal(to_next, 0.5 * fwd)
    const = torch.zeros(2, 4, 4, dtype=torch.float64)
    const[0] = 4.0
    p, n = adapt_flow(const, const, -0.5)
    assert torch.equal(p[0], torch.ones(4, 4, dtype=torch.float64)) and torch.equal(p[1], torch.zeros(4, 4, dtype=torch.float64))
    assert torch.equal(n[0], torch.full((4, 4), 3.0, dtype=torch.float64))


def test_adapt_limits_and_errors():
    f = torch.ones(2, 3, 3)
    p, _ = adapt_flow(f, f, -1 + 1e-12)
    assert p.abs().max() < 1e-11
    for bad in (-1.0, 1.0, 2.0):
        with pytest.raises(ValueError):
            adapt_flow(f, f, bad)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.999, 0.999), st.floats(-5, 5), st.floats(-3, 3))
def test_adapt_is_linear(tp, alpha, t):
    fwd = torch.randn(2, 3, 3, dtype=torch.float64)
    bwd = torch.randn(2, 3, 3, dtype=torch.float64)
    p1, n1 = adapt_flow(fwd, bwd, t + tp, t=t)
    p2, n2 = adapt_flow(alpha * fwd, alpha * bwd, t + tp, t=t)
    assert torch.allclose(p2, alpha * p1, atol=1e-12) and torch.allclose(n2, alpha * n1, atol=1e-12)
    assert torch.allclose(p1, (tp + 1) / 2 * bwd, atol=1e-12)
    assert torch.allclose(n1, (1 - tp) / 2 * fwd, atol=1e-12)


@pytest.mark.parametrize("n", [1, 3, 5])
def test_interpolation_times_monotone_factors(n):
    ts = interpolation_times(-1.0, n)
    assert np.allclose(ts, [-1 + 2 * k / (n + 1) for k in range(1, n + 1)])
    one = torch.ones(2, 1, 1)
    back = [adapt_flow(one, one, t)[0][0, 0, 0].item() for t in ts]
    fwd = [adapt_flow(one, one, t)[1][0, 0, 0].item() for t in ts]
    assert all(np.diff(back) > 0) and all(np.diff(fwd) < 0)


def test_warp_zero_flow_identity():
    x = torch.rand(2, 5, 9, 11, dtype=torch.float64)
    assert torch.allclose(warp_backward(x, torch.zeros(2, 2, 9, 11, dtype=torch.float64)), x, atol=1e-14)


def test_warp_ramp_shift():
    W = 16
    ramp = torch.arange(W, dtype=torch.float64).expand(1, 1, 8, W).clone()
    flow = torch.zeros(1, 2, 8, W, dtype=torch.float64)
    flow[:, 0] = 1.0
    out = warp_backward(ramp, flow)
    assert (out[..., :-1] - (ramp[..., :-1] + 1)).abs().max() < 1e-6
    assert out[..., -1].eq(W - 1).all()  # border clamp


def test_warp_shape_check():
    with pytest.raises(ValueError):
        warp_backward(torch.zeros(1, 3, 8, 8), torch.zeros(1, 2, 8, 7))


def test_warp_gradcheck():
    torch.manual_seed(0)
    x = torch.rand(1, 2, 6, 7, dtype=torch.float64, requires_grad=True)
    flow = (torch.rand(1, 2, 6, 7, dtype=torch.float64) * 3 - 1.5).requires_grad_()
    assert torch.autograd.gradcheck(warp_backward, (x, flow), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_correlation_matches_shifted_products():
    a = torch.randn(2, 5, 7, 9, dtype=torch.float64)
    b = torch.randn(2, 5, 7, 9, dtype=torch.float64)
    r = 3
    bp = torch.nn.functional.pad(b, (r,) * 4)
    ref = torch.stack([(a * bp[..., dy:dy + 7, dx:dx + 9]).mean(1)
                       for dy in range(2 * r + 1) for dx in range(2 * r + 1)], 1)
    assert torch.allclose(correlation(a, b, r), ref, atol=1e-14)


def test_estimator_shape_and_errors():
    net = FlowEstimator()
    out = estimate_flow(net, torch.rand(3, 20, 28), torch.rand(3, 20, 28))
    assert out.shape == (2, 20, 28)
    assert estimate_flow(net, torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)).shape == (2, 2, 64, 64)
    with pytest.raises(ValueError):
        estimate_flow(net, torch.rand(3, 8, 8), torch.rand(3, 8, 16))


def test_estimator_differentiable():
    net = FlowEstimator()
    a = torch.rand(1, 3, 16, 16, requires_grad=True)
    net(a, torch.rand(1, 3, 16, 16)).square().sum().backward()
    assert a.grad is not None and torch.isfinite(a.grad).all()


def test_flow_dump_roundtrip(tmp_path):
    flow = torch.randn(2, 5, 7)
    dump_flow(flow, tmp_path / "f.flo")
    raw = (tmp_path / "f.flo").read_bytes()
    assert len(raw) == 8 + 5 * 7 * 2 * 4
    assert torch.equal(load_flow(tmp_path / "f.flo"), flow)
    img = flow_to_color(flow)
    assert img.shape == (5, 7, 3) and img.dtype == np.uint8
    save_flow_png(flow, tmp_path / "f.png")
    assert (tmp_path / "f.png").stat().st_size > 0


@pytest.mark.slow
def test_default_estimator_zero_motion_and_velocity(default_flow):
    scene = SyntheticScene.sample(123, 64, 64, MotionSpec(velocity=(2, 0)))
    a = torch.from_numpy(scene.render(0.0)).float()
    b = torch.from_numpy(scene.render(1.0)).float()
    with torch.no_grad():
        zero = estimate_flow(default_flow, a, a)
        flow = estimate_flow(default_flow, a, b)
    assert zero.abs().mean() < 0.5
    mask = torch.from_numpy(scene.object_mask(0.0))
    mean = torch.stack([flow[0][mask].mean(), flow[1][mask].mean()])
    assert (mean - torch.tensor([2.0, 0.0])).norm() < 1.0
