import pytest
import torch

from tracearch import archspec
from tracearch.archspec import (
    ArchSpec,
    ConvParams,
    InputShape,
    InvalidArchitectureError,
    LayerKind,
    LayerSpec,
    LinearParams,
    MaxPoolParams,
    conv_overhead,
    conv_padding_for,
    derive_output_shape,
    linear_overhead,
    propagate_shapes,
    rebind_linear_inputs,
    validate,
)
from tracearch.familygen import GenerationError, generate_family

SHAPE = InputShape(bs=64, c=3, h=224, w=224)


def conv(c_in, c_out, k, s=1):
    return LayerSpec(LayerKind.CONV, ConvParams(c_in, c_out, k, s, conv_padding_for(k)))


def mp(k, s, p):
    return LayerSpec(LayerKind.MAXPOOL, MaxPoolParams(k, s, p))


class TestOutputShape:
    def test_same_padding_identity(self):
        assert derive_output_shape(conv(3, 64, 3), (224, 224)) == (224, 224)

    def test_stem_conv(self):
        assert derive_output_shape(conv(3, 64, 7, 2), (224, 224)) == (112, 112)

    def test_maxpool(self):
        assert derive_output_shape(mp(3, 2, 1), (112, 112)) == (56, 56)

    def test_same_padding_all_odd_kernels(self):
        for k in (1, 3, 5, 7):
            for h in (7, 32, 224, 331):
                assert derive_output_shape(conv(16, 32, k, 1), (h, h)) == (h, h)

    def test_non_positive_raises(self):
        with pytest.raises(InvalidArchitectureError):
            derive_output_shape(mp(3, 2, 0), (2, 2))

    def test_torch_oracle_random_params(self):
        # independent oracle: actual torch modules on dummy tensors
        import itertools

        for k, s in itertools.product((1, 3, 5, 7), (1, 2)):
            p = conv_padding_for(k)
            mod = torch.nn.Conv2d(2, 4, k, stride=s, padding=p)
            for h in (9, 56, 113):
                got = derive_output_shape(conv(2, 4, k, s), (h, h))
                ref = tuple(mod(torch.zeros(1, 2, h, h)).shape[-2:])
                assert got == ref


class TestOverheads:
    def test_conv_overhead_first_layer(self):
        assert conv_overhead(ConvParams(3, 64, 3, 1, 1), (224, 224), 64) == 5_549_064_192

    def test_conv_overhead_identity(self):
        assert conv_overhead(ConvParams(1, 1, 1, 1, 0), (1, 1), 1) == 1

    def test_conv_overhead_mid_layer(self):
        assert conv_overhead(ConvParams(64, 128, 3, 1, 1), (56, 56), 32) == 7_398_752_256

    def test_conv_overhead_monotone_in_cout(self):
        prev = 0
        for c_out in (16, 32, 64, 128, 256, 512, 1024):
            cur = conv_overhead(ConvParams(64, c_out, 3, 1, 1), (14, 14), 96)
            assert cur > prev
            prev = cur

    def test_linear_overhead(self):
        assert linear_overhead(LinearParams(512, 1000), 64) == 32_768_000
        assert linear_overhead(LinearParams(1, 1), 1) == 1
        assert linear_overhead(LinearParams(4096, 4096), 128) == 2_147_483_648


class TestValidate:
    def test_valid_resnet_style(self):
        spec = generate_family("resnet", 18, SHAPE, rng_seed=0)
        assert validate(spec, SHAPE) == []

    def test_consecutive_relu(self):
        spec = ArchSpec([
            conv(3, 64, 3),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.LINEAR, LinearParams(64 * 224 * 224, 1000)),
        ])
        problems = validate(spec, SHAPE)
        assert len(problems) == 1
        assert "consecutive" in problems[0]

    def test_cout_not_power_of_two(self):
        spec = ArchSpec([
            LayerSpec(LayerKind.CONV, ConvParams(3, 48, 3, 1, 1)),
            LayerSpec(LayerKind.LINEAR, LinearParams(48 * 224 * 224, 1000)),
        ])
        problems = validate(spec, SHAPE)
        assert len(problems) == 1
        assert "power of two" in problems[0]

    def test_broken_channel_chain(self):
        spec = ArchSpec([
            conv(3, 64, 3),
            LayerSpec(LayerKind.RELU),
            conv(32, 64, 3),  # c_in should be 64
            LayerSpec(LayerKind.LINEAR, LinearParams(64 * 224 * 224, 1000)),
        ])
        assert validate(spec, SHAPE) != []

    def test_add_without_edge(self):
        spec = ArchSpec([
            conv(3, 64, 3),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.ADD),
        ])
        assert any("Add" in p for p in validate(spec))


class TestGenerate:
    def test_depth_2_is_conv_linear(self):
        spec = generate_family("random", 2, SHAPE, rng_seed=0)
        assert spec.kinds() == [LayerKind.CONV, LayerKind.LINEAR]

    def test_deepest_resnet(self):
        spec = generate_family("resnet", 152, SHAPE, rng_seed=1)
        assert spec.depth() == 152
        assert validate(spec, SHAPE) == []

    def test_determinism(self):
        a = generate_family("vgg", (2, 40), SHAPE, rng_seed=9)
        b = generate_family("vgg", (2, 40), SHAPE, rng_seed=9)
        assert archspec.to_dict(a) == archspec.to_dict(b)

    def test_depth_out_of_range(self):
        with pytest.raises(GenerationError):
            generate_family("random", 1, SHAPE, rng_seed=0)
        with pytest.raises(GenerationError):
            generate_family("resnet", 200, SHAPE, rng_seed=0)

    def test_infeasible_resnet_depth(self):
        with pytest.raises(GenerationError):
            generate_family("resnet", 5, SHAPE, rng_seed=0)

    @pytest.mark.parametrize("family", ["vgg", "resnet", "random"])
    def test_shapes_stay_positive(self, family):
        lo = 4 if family == "resnet" else 2
        for seed in range(25):
            spec = generate_family(family, (lo, 60), SHAPE, rng_seed=seed)
            infos = propagate_shapes(spec, SHAPE)
            for info in infos:
                if info.out_features is None:
                    assert info.out_h > 0 and info.out_w > 0
            assert validate(spec, SHAPE) == []


class TestSerialization:
    def test_round_trip(self, tmp_path):
        spec = generate_family("resnet", 34, SHAPE, rng_seed=4)
        path = tmp_path / "spec.json"
        archspec.save_json(spec, path)
        loaded = archspec.load_json(path)
        assert archspec.to_dict(loaded) == archspec.to_dict(spec)
        assert loaded.skip_edges == spec.skip_edges

    def test_version_check(self):
        with pytest.raises(ValueError):
            archspec.from_dict({"version": 99, "layers": [], "skip_edges": []})


class TestRebind:
    def test_flatten_f_in_tracks_input_size(self):
        spec = ArchSpec([
            conv(3, 32, 3),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.LINEAR, LinearParams(32 * 160 * 160, 1000)),
        ])
        small = InputShape(64, 3, 160, 160)
        big = InputShape(64, 3, 224, 224)
        assert validate(spec, small) == []
        rebound = rebind_linear_inputs(spec, big)
        assert rebound.layers[2].params.f_in == 32 * 224 * 224
        assert validate(rebound, big) == []

    def test_avgpool_nets_unchanged(self):
        spec = generate_family("resnet", 18, SHAPE, rng_seed=0)
        rebound = rebind_linear_inputs(spec, InputShape(96, 3, 299, 299))
        assert archspec.to_dict(rebound) == archspec.to_dict(spec)
