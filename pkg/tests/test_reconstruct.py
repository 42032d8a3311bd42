import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stinet.reconstruct import Reconstructor, pixel_shuffle


def shuffle_loop(f, r):
    C, H, W = f.shape
    out = torch.empty(C // (r * r), r * H, r * W, dtype=f.dtype)
    for ch in range(C // (r * r)):
        for y in range(H):
            for x in range(W):
                for dy in range(r):
                    for dx in range(r):
                        out[ch, r * y + dy, r * x + dx] = f[ch * r * r + dy * r + dx, y, x]
    return out


def test_pixel_shuffle_definition():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = pixel_shuffle(torch.tensor([a, b, c, d]).view(1, 4, 1, 1), 2)
    assert out.tolist() == [[[[a, b], [c, d]]]]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 3]))
def test_pixel_shuffle_matches_loops_and_preserves_values(c, h, w, r):
    f = torch.randn(c * r * r, h, w, dtype=torch.float64)
    out = pixel_shuffle(f[None], r)[0]
    assert torch.equal(out, shuffle_loop(f, r))
    assert torch.equal(out.flatten().sort().values, f.flatten().sort().values)


def test_two_shuffles_give_4x():
    f = torch.randn(1, 64, 8, 8)
    assert pixel_shuffle(pixel_shuffle(f, 2), 2).shape == (1, 4, 32, 32)
    with pytest.raises(ValueError):
        pixel_shuffle(torch.randn(1, 6, 2, 2), 2)


def test_reconstruct_shapes_and_additivity():
    rec = Reconstructor(64)
    L = torch.randn(1, 2, 64, 32, 32)
    H = torch.zeros(1, 2, 64, 128, 128)
    torch.nn.init.zeros_(rec.proj_hr.bias)
    out = rec(L, H)
    assert out.shape == (1, 2, 3, 128, 128)
    assert torch.equal(out, rec(L, None))


def test_reconstruct_linear_without_bias():
    rec = Reconstructor(8, bias=False).double()
    L, H = torch.randn(1, 2, 8, 4, 4, dtype=torch.float64), torch.randn(1, 2, 8, 16, 16, dtype=torch.float64)
    assert torch.allclose(rec(2.5 * L, 2.5 * H), 2.5 * rec(L, H), atol=1e-12)


def test_reconstruct_small_channel_counts():
    # the sub-pixel convolutions expand to 4c before each shuffle, so any c works
    assert Reconstructor(8)(torch.randn(1, 1, 8, 2, 2), torch.randn(1, 1, 8, 8, 8)).shape == (1, 1, 3, 8, 8)
