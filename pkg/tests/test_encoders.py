import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdformer.encoders import GTEncoder, LREncoder, pixel_shuffle, pixel_unshuffle

from oracles import fd_gradient_check


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def test_unshuffle_identity_at_s1():
    x = torch.randn(2, 3, 5, 7)
    assert torch.equal(pixel_unshuffle(x, 1), x)


def test_unshuffle_shapes_and_inverse():
    x = torch.randn(1, 3, 4, 4)
    y = pixel_unshuffle(x, 2)
    assert y.shape == (1, 12, 2, 2)
    assert torch.equal(pixel_shuffle(y, 2), x)
    assert pixel_unshuffle(torch.zeros(1, 3, 256, 256), 4).shape == (1, 48, 64, 64)


def test_unshuffle_layout_matches_torch():
    x = torch.randn(2, 3, 8, 12)
    assert torch.equal(pixel_unshuffle(x, 4), torch.nn.functional.pixel_unshuffle(x, 4))


def test_unshuffle_rejects_indivisible():
    with pytest.raises(ValueError):
        pixel_unshuffle(torch.zeros(1, 3, 5, 4), 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_unshuffle_roundtrip_property(s, h, w, seed):
    x = torch.randn(1, 3, h * s, w * s, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(pixel_shuffle(pixel_unshuffle(x, s), s), x)


def test_gt_encoder_output_length():
    enc = GTEncoder(scale=4, cz=256, width=8, blocks=1)
    z = enc(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 8, 8))
    assert z.shape == (2, 256)
    assert torch.isfinite(z).all()


def test_gt_encoder_degradation_input_channels():
    enc = GTEncoder(scale=4, cz=16, width=8, blocks=1)
    assert enc.deg_branch.stem.in_channels == 3 * 16 + 3
    assert enc.content_branch.stem.in_channels == 3


def test_zeroed_encoders_give_zero():
    gt = _zero(GTEncoder(scale=2, cz=32, width=8, blocks=2))
    lr_enc = _zero(LREncoder(cz=32, width=8, blocks=2))
    assert torch.equal(gt(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8)), torch.zeros(1, 32))
    assert torch.equal(lr_enc(torch.rand(1, 3, 8, 8)), torch.zeros(1, 32))


def test_gt_encoder_dim_mismatch():
    enc = GTEncoder(scale=4, cz=16, width=8, blocks=1)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 7, 8))


def test_lr_encoder_shape_and_determinism():
    enc = LREncoder(cz=256, width=8, blocks=1)
    x = torch.rand(1, 3, 12, 12)
    a, b = enc(x), enc(x)
    assert a.shape == (1, 256)
    assert torch.equal(a, b)
    assert enc.branch.stem.in_channels == 3


def test_ablation_branches():
    deg_only = GTEncoder(scale=2, cz=16, width=8, blocks=1, content=False)
    content_only = GTEncoder(scale=2, cz=16, width=8, blocks=1, degradation=False)
    assert deg_only.content_branch is None and content_only.deg_branch is None
    hr, lr = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4)
    assert deg_only(hr, lr).shape == content_only(hr, lr).shape == (1, 16)
    with pytest.raises(ValueError):
        GTEncoder(scale=2, degradation=False, content=False)


def test_gt_encoder_gradients_match_fd():
    torch.manual_seed(2)
    enc = GTEncoder(scale=2, cz=8, width=4, blocks=2).double()
    hr = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    lr = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    probe = torch.randn(2, 8, dtype=torch.float64)

    def loss():
        return (enc(hr, lr) * probe).sum() + enc(hr, lr).pow(2).sum()

    res = fd_gradient_check(loss, list(enc.parameters()), n_probe=10)
    assert max(r[2] for r in res) < 1e-3, res
