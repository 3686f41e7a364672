import numpy as np
import pytest

from tracearch import tracesim
from tracearch.archspec import (
    ArchSpec,
    ConvParams,
    InputShape,
    InvalidArchitectureError,
    LayerKind,
    LayerSpec,
    LinearParams,
)
from tracearch.familygen import generate_family
from tracearch.tracesim import SimConfig, batch_size_map, build_corpus, simulate

SHAPE = InputShape(bs=64, c=3, h=224, w=224)


def two_layer_spec(c_out=64):
    return ArchSpec([
        LayerSpec(LayerKind.CONV, ConvParams(3, c_out, 3, 1, 1)),
        LayerSpec(LayerKind.LINEAR, LinearParams(c_out * 224 * 224, 1000)),
    ])


class TestSimulate:
    def test_structure_passthrough(self):
        trace, ann = simulate(two_layer_spec(), SHAPE, SimConfig(rng_seed=0))
        assert ann.n_layers == 2
        assert ann.kind_sequence() == [LayerKind.CONV, LayerKind.LINEAR]

    def test_positions_tile_whole_trace(self):
        spec = generate_family("resnet", 18, SHAPE, rng_seed=2)
        trace, ann = simulate(spec, SHAPE, SimConfig(rng_seed=0))
        assert ann.validate(trace.length) == []
        assert ann.positions[0, 0] == 0
        assert ann.positions[-1, 1] == trace.length - 1
        gaps = ann.positions[1:, 0] - ann.positions[:-1, 1]
        assert (gaps == 1).all()

    def test_segment_order_matches_spec(self):
        spec = generate_family("vgg", 11, SHAPE, rng_seed=5)
        _, ann = simulate(spec, SHAPE, SimConfig(rng_seed=0))
        assert ann.kind_sequence() == spec.kinds()

    def test_duration_monotone_in_cout(self):
        cfg = SimConfig(rng_seed=0)
        _, a64 = simulate(two_layer_spec(64), SHAPE, cfg)
        _, a128 = simulate(two_layer_spec(128), SHAPE, cfg)
        dur = lambda a: a.positions[0, 1] - a.positions[0, 0] + 1
        assert dur(a128) > dur(a64)

    def test_deterministic(self):
        cfg = SimConfig(rng_seed=7, noise_std=0.0)
        spec = generate_family("random", (2, 20), SHAPE, rng_seed=3)
        t1, _ = simulate(spec, SHAPE, cfg)
        t2, _ = simulate(spec, SHAPE, cfg)
        assert np.array_equal(t1.samples, t2.samples)
        cfg_noisy = SimConfig(rng_seed=7, noise_std=0.05)
        n1, _ = simulate(spec, SHAPE, cfg_noisy)
        n2, _ = simulate(spec, SHAPE, cfg_noisy)
        assert np.array_equal(n1.samples, n2.samples)

    def test_signature_identifiability_noise_free(self):
        # per-kind per-channel means are recoverable from emitted segments
        cfg = SimConfig(rng_seed=0, noise_std=0.0)
        spec = generate_family("resnet", 18, SHAPE, rng_seed=2)
        trace, ann = simulate(spec, SHAPE, cfg)
        relu_means = []
        for (s, e), rec in zip(ann.positions, ann.layer_params):
            if rec["kind"] == "relu":
                relu_means.append(trace.samples[:, s : e + 1].mean(axis=1))
        relu_means = np.stack(relu_means)
        expected = np.array([
            cfg.signatures[LayerKind.RELU].levels["pp0"],
            cfg.signatures[LayerKind.RELU].levels["dram"],
        ]) * cfg.unit_scale
        assert np.allclose(relu_means, expected, rtol=1e-5)

    def test_layer_params_carry_overheads(self):
        _, ann = simulate(two_layer_spec(), SHAPE, SimConfig(rng_seed=0))
        conv_rec, lin_rec = ann.layer_params
        assert conv_rec["overhead"] == 5_549_064_192
        assert lin_rec["overhead"] == 64 * 224 * 224 * 1000 * 64
        assert conv_rec["h_out"] == 224 and conv_rec["bs"] == 64

    def test_invalid_spec_rejected(self):
        bad = ArchSpec([LayerSpec(LayerKind.CONV, ConvParams(3, 48, 3, 1, 1))])
        with pytest.raises(InvalidArchitectureError):
            simulate(bad, SHAPE, SimConfig(rng_seed=0))

    def test_min_layer_samples_floor(self):
        cfg = SimConfig(rng_seed=0, min_layer_samples=4)
        _, ann = simulate(generate_family("resnet", 18, SHAPE, 2), SHAPE, cfg)
        durations = ann.positions[:, 1] - ann.positions[:, 0] + 1
        assert durations.min() >= 4

    def test_signature_table_must_be_complete(self):
        cfg = SimConfig(rng_seed=0)
        del cfg.signatures[LayerKind.ADD]
        with pytest.raises(ValueError, match="ADD"):
            simulate(two_layer_spec(), SHAPE, cfg)


class TestCorpus:
    def test_batch_pairing(self):
        assert batch_size_map() == {331: 64, 299: 96, 224: 128, 192: 192, 160: 256}

    def test_paper_scale_arithmetic(self):
        # 5 traces per architecture: a 1,152-arch test split means 5,760 traces
        assert 1152 * len(tracesim.DEFAULT_INPUT_SIZES) == 5760

    def test_build_and_reload(self, tmp_path):
        manifest = build_corpus(10, cfg=SimConfig(rng_seed=4), out_dir=tmp_path,
                                depth_range=(2, 12), test_fraction=0.2)
        assert len(manifest["archs"]) == 10
        n_traces = sum(len(a["traces"]) for a in manifest["archs"])
        assert n_traces == 50
        test_archs = {a["id"] for a in manifest["archs"] if a["split"] == "test"}
        train_archs = {a["id"] for a in manifest["archs"] if a["split"] == "train"}
        assert test_archs and train_archs
        assert not (test_archs & train_archs)

        reloaded = tracesim.load_manifest(tmp_path)
        assert reloaded == manifest

        items = list(tracesim.manifest_traces(tmp_path, manifest, split="test"))
        assert len(items) == 5 * len(test_archs)
        for trace, ann, arch in items:
            assert ann is not None
            assert ann.validate(trace.length) == []
            assert trace.meta["arch_id"] == arch["id"]

    def test_deterministic_rebuild(self, tmp_path):
        m1 = build_corpus(4, cfg=SimConfig(rng_seed=9), out_dir=tmp_path / "a",
                          depth_range=(2, 10))
        m2 = build_corpus(4, cfg=SimConfig(rng_seed=9), out_dir=tmp_path / "b",
                          depth_range=(2, 10))
        strip = lambda m: {k: v for k, v in m.items()}
        assert strip(m1) == strip(m2)
        t1, _ = tracesim.traceio.read_trace(tmp_path / "a" / m1["archs"][0]["traces"][0]["file"])
        t2, _ = tracesim.traceio.read_trace(tmp_path / "b" / m2["archs"][0]["traces"][0]["file"])
        assert np.array_equal(t1.samples, t2.samples)

    def test_config_snapshot_round_trip(self, tmp_path):
        cfg = SimConfig(rng_seed=3, noise_std=0.02)
        manifest = build_corpus(2, cfg=cfg, out_dir=tmp_path, depth_range=(2, 8))
        restored = tracesim.config_from_snapshot(manifest["sim_config"])
        assert restored.noise_std == cfg.noise_std
        assert restored.signatures[LayerKind.CONV].levels == \
            cfg.signatures[LayerKind.CONV].levels
