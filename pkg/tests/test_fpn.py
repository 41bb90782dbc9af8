import pytest
import torch
import torch.nn as nn

from maskrecon.backbones import FrozenEncoderConfig, extract_frozen_features
from maskrecon.config import RunConfig
from maskrecon.core import build_model, multiscale_cosine_loss
from maskrecon.errors import ConfigError, ShapeError
from maskrecon.fpn import FpnConfig, LayerNorm2d, SimpleFeaturePyramid, fpn_decode, scale_for_stage


def make_pyramid(in_width=64, out_channels=(32, 64, 128), scales=(4, 2, 1), seed=0):
    torch.manual_seed(seed)
    return SimpleFeaturePyramid(FpnConfig(in_width, tuple(out_channels), tuple(scales))).eval()


class TestBranchShapes:
    def test_wideresnet_pairing_at_224(self):
        pyr = make_pyramid(in_width=768, out_channels=(256, 512, 1024))
        grid = torch.randn(14, 14, 768)
        with torch.no_grad():
            feats = fpn_decode(grid, pyr)
        assert feats.shapes() == [(256, 56, 56), (512, 28, 28), (1024, 14, 14)]

    @pytest.mark.parametrize("side", [64, 128, 224])
    def test_matches_toy_teacher_shapes(self, side):
        teacher_cfg = FrozenEncoderConfig(family="toy_cnn", weights="random", seed=0)
        teacher_feats = extract_frozen_features(torch.randn(3, side, side), teacher_cfg)
        pyr = make_pyramid(in_width=64, out_channels=(32, 64, 128))
        grid = torch.randn(side // 16, side // 16, 64)
        with torch.no_grad():
            feats = fpn_decode(grid, pyr)
        assert feats.shapes() == teacher_feats.shapes()

    def test_x2_branch_doubles_side(self):
        pyr = make_pyramid(out_channels=(16,), scales=(2,))
        grid = torch.randn(7, 7, 64)
        with torch.no_grad():
            feats = fpn_decode(grid, pyr)
        assert feats.maps[0].shape[-1] == 14

    def test_x1_branch_is_passthrough_resolution(self):
        pyr = make_pyramid(out_channels=(48,), scales=(1,))
        grid = torch.randn(14, 14, 64)
        with torch.no_grad():
            feats = fpn_decode(grid, pyr)
        assert len(feats.maps) == 1
        assert feats.maps[0].shape == (48, 14, 14)

    def test_stage_to_scale_mapping(self):
        assert [scale_for_stage(s) for s in (1, 2, 3)] == [4, 2, 1]


class TestConstructionContracts:
    def test_channel_mismatch_with_teacher_raises_at_construction(self):
        cfg = RunConfig.from_dict({
            "data": {"resize_to": 64, "crop_to": 64},
            "encoder": {"variant": "vit_tiny_scratch", "width": 64, "depth": 1, "heads": 2,
                        "include_class_token": False},
            "teacher": {"family": "toy_cnn", "weights": "random"},
            "fpn": {"out_channels": [32, 64, 999]},
        })
        with pytest.raises(ShapeError):
            build_model(cfg)

    def test_scale_factor_validation(self):
        with pytest.raises(ConfigError):
            FpnConfig(in_width=64, out_channels=(8,), scale_factors=(3,))
        with pytest.raises(ConfigError):
            FpnConfig(in_width=64, out_channels=(8, 8), scale_factors=(2,))

    def test_branch_count_matches_scales(self):
        pyr = make_pyramid(out_channels=(8, 16), scales=(2, 1))
        assert len(pyr.branches) == 2


class TestLayerNorm2d:
    def test_matches_channelwise_layernorm(self):
        torch.manual_seed(1)
        ln2d = LayerNorm2d(12)
        ref = nn.LayerNorm(12, eps=1e-6)
        with torch.no_grad():
            ln2d.weight.copy_(torch.randn(12))
            ln2d.bias.copy_(torch.randn(12))
            ref.weight.copy_(ln2d.weight)
            ref.bias.copy_(ln2d.bias)
        x = torch.randn(2, 12, 5, 5)
        got = ln2d(x)
        want = ref(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        assert torch.allclose(got, want, atol=1e-6)


class TestGradientFlow:
    def test_every_branch_parameter_receives_gradient(self):
        torch.manual_seed(2)
        pyr = make_pyramid(in_width=16, out_channels=(8, 12), scales=(2, 1), seed=2).train()
        grid = torch.randn(2, 16, 4, 4)
        targets = [torch.randn(2, 8, 8, 8), torch.randn(2, 12, 4, 4)]
        loss = multiscale_cosine_loss(pyr(grid), targets)
        loss.backward()
        for name, p in pyr.named_parameters():
            assert p.grad is not None, name
            assert p.grad.abs().max() > 0, f"dead parameter {name}"
