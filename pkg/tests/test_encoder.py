import pytest
import torch
import torch.nn as nn

from wsvsod.encoder import ASPP, RESNET_STRIDES, Encoder, TwoStreamEncoder
from wsvsod.errors import ShapeError


def test_desk_stage_sizes():
    enc = Encoder()
    feats = enc(torch.rand(2, 3, 64, 64))
    assert [tuple(f.shape[-2:]) for f in feats] == [(32, 32), (16, 16), (8, 8), (8, 8)]
    assert [f.shape[1] for f in feats] == list(enc.channels)


def test_resnet_strides_keep_last_two_stages_equal():
    enc = Encoder(channels=(4, 4, 4, 4), strides=RESNET_STRIDES)
    with torch.no_grad():
        feats = enc(torch.rand(1, 3, 256, 256))
    assert tuple(feats[2].shape[-2:]) == (16, 16)
    assert tuple(feats[3].shape[-2:]) == (16, 16)


def test_zero_input_gives_zero_pyramid():
    enc = Encoder()
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, (nn.Conv2d, nn.GroupNorm)) and m.bias is not None:
                m.bias.zero_()
        feats = enc(torch.zeros(1, 3, 32, 32))
    assert all(not f.any() for f in feats)


def test_indivisible_input_rejected():
    with pytest.raises(ShapeError):
        Encoder()(torch.rand(1, 3, 60, 60))


def test_aspp_projection_selecting_branch_one():
    aspp = ASPP(3, 4)
    x = torch.randn(1, 3, 8, 8)
    with torch.no_grad():
        aspp.project.weight.zero_()
        aspp.project.bias.zero_()
        aspp.project.weight[:, :4, 0, 0] = torch.eye(4)
        expected = torch.relu(aspp.branch1(x))
        assert torch.allclose(aspp(x), expected, atol=1e-6)


def test_aspp_pool_branch_of_constant_input():
    aspp = ASPP(2, 2)
    with torch.no_grad():
        aspp.pool.weight.copy_(torch.eye(2)[:, :, None, None])
        aspp.pool.bias.zero_()
        x = torch.full((1, 2, 8, 8), 0.7)
        pooled = torch.relu(aspp.pool(x.mean(dim=(2, 3), keepdim=True))).expand(-1, -1, 8, 8)
    assert torch.allclose(pooled, x)


def test_aspp_keeps_spatial_size_and_picks_rates():
    aspp = ASPP(4, 6)
    assert aspp(torch.randn(2, 4, 8, 8)).shape == (2, 6, 8, 8)
    assert aspp.effective_rates(8, 8) == (1, 2, 4)
    assert aspp.effective_rates(32, 32) == (6, 12, 18)


def test_two_streams_start_equal_but_are_independent():
    enc = TwoStreamEncoder(with_motion=True)
    a = dict(enc.appearance.named_parameters())
    for name, p in enc.motion.named_parameters():
        assert torch.equal(p, a[name])
        assert p.data_ptr() != a[name].data_ptr()
    with pytest.raises(ValueError):
        TwoStreamEncoder(with_motion=False).encode(torch.rand(1, 3, 16, 16), "motion")
