import math

import numpy as np
import pytest
import torch

from tracearch import segnet
from tracearch.archspec import LayerKind
from tracearch.segnet import (
    SegNet,
    SegNetConfig,
    SegmentationMap,
    ce_loss,
    extract_segments,
    total_loss,
    up_loss,
)
from tracearch.traceio import Trace

TINY = SegNetConfig(encoder_widths=(8, 16, 24, 32), temporal_hidden=16)


def brute_ce(probs, labels):
    """Literal transcription: -sum_s y_s . log f(x)_s."""
    total = 0.0
    for s in range(probs.shape[0]):
        total -= math.log(max(probs[s, labels[s]], 1e-12))
    return total


def brute_up(probs, positions, labels):
    """Literal transcription: -log prod_m P_iso(z_m), P_iso = span mean."""
    product = 1.0
    for start, end in positions:
        p_iso = np.mean([probs[s, labels[s]] for s in range(start, end + 1)])
        product *= p_iso
    return -math.log(max(product, 1e-300))


def random_instance(rng, l=None, n=None):
    l = l or int(rng.integers(2, 33))
    raw = rng.random((l, 7)) + 1e-3
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 7, size=l)
    n = n or int(rng.integers(1, 6))
    cuts = np.sort(rng.choice(np.arange(1, l), size=min(n - 1, l - 1), replace=False))
    bounds = np.concatenate([[0], cuts, [l]])
    positions = np.stack([bounds[:-1], bounds[1:] - 1], axis=1)
    return probs, labels, positions


class TestLossValues:
    def test_perfect_predictions_zero(self):
        probs = np.zeros((5, 7))
        probs[:, 2] = 1.0
        labels = np.full(5, 2)
        assert ce_loss(probs, labels) == pytest.approx(0.0, abs=1e-9)
        assert up_loss(probs, [[0, 4]], labels) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_ce_closed_form(self):
        l = 11
        probs = np.full((l, 7), 1 / 7)
        assert ce_loss(probs, np.zeros(l, dtype=int)) == pytest.approx(l * math.log(7))

    def test_binary_half(self):
        assert ce_loss(np.array([[0.5, 0.5]]), np.array([0])) == pytest.approx(math.log(2))

    def test_up_two_layers_half(self):
        probs = np.zeros((4, 7))
        probs[:, 0] = 0.5
        probs[:, 1] = 0.5
        loss = up_loss(probs, [[0, 1], [2, 3]], np.zeros(4, dtype=int))
        assert loss == pytest.approx(-math.log(0.25))

    def test_up_mean_then_log(self):
        probs = np.zeros((2, 7))
        probs[0, 0], probs[0, 1] = 0.2, 0.8
        probs[1, 0], probs[1, 1] = 0.6, 0.4
        loss = up_loss(probs, [[0, 1]], np.zeros(2, dtype=int))
        assert loss == pytest.approx(-math.log(0.4))

    def test_total_composition(self):
        rng = np.random.default_rng(0)
        probs, labels, positions = random_instance(rng)
        ce = ce_loss(probs, labels)
        up = up_loss(probs, positions, labels)
        assert total_loss(probs, labels, positions, lambda_up=0.0) == pytest.approx(ce)
        assert total_loss(probs, labels, positions, lambda_up=2.0) == pytest.approx(ce + 2 * up)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            probs, labels, positions = random_instance(rng)
            assert ce_loss(probs, labels) == pytest.approx(brute_ce(probs, labels), abs=1e-9)
            assert up_loss(probs, positions, labels) == pytest.approx(
                brute_up(probs, positions, labels), abs=1e-9
            )

    def test_empty_span_rejected(self):
        probs = np.full((4, 7), 1 / 7)
        with pytest.raises(ValueError):
            up_loss(probs, [[2, 1]], np.zeros(4, dtype=int))


class TestLossProperties:
    def test_up_nonnegative_and_zero_iff_perfect(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            probs, labels, positions = random_instance(rng)
            assert up_loss(probs, positions, labels) > 0.0

    def test_up_permutation_invariance_within_layer(self):
        rng = np.random.default_rng(2)
        probs, labels, positions = random_instance(rng, l=12, n=2)
        labels[:] = 3
        start, end = positions[0]
        shuffled = probs.copy()
        perm = rng.permutation(np.arange(start, end + 1))
        shuffled[start : end + 1] = probs[perm]
        assert up_loss(shuffled, positions, labels) == pytest.approx(
            up_loss(probs, positions, labels)
        )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        probs_np, labels, positions = random_instance(rng, l=8, n=3)
        probs = torch.tensor(probs_np, dtype=torch.float64, requires_grad=True)
        loss = total_loss(probs, torch.as_tensor(labels), positions)
        loss.backward()
        analytic = probs.grad.numpy()
        h = 1e-6
        for i, j in [(0, 0), (3, 5), (7, 2)]:
            pp, pm = probs_np.copy(), probs_np.copy()
            pp[i, j] += h
            pm[i, j] -= h
            fd = (total_loss(pp, labels, positions) - total_loss(pm, labels, positions)) / (2 * h)
            assert abs(analytic[i, j] - fd) / max(abs(fd), 1e-9) < 1e-4


class TestForward:
    def test_output_shape_and_rows(self):
        net = SegNet(TINY)
        trace = Trace(["pp0", "dram"], 1000.0,
                      np.random.default_rng(0).random((2, 224)).astype(np.float32))
        out = net.segment(trace)
        assert out.probs.shape == (224, 7)
        assert np.allclose(out.probs.sum(axis=1), 1.0, atol=1e-5)

    def test_length_preserved_and_doubles(self):
        net = SegNet(TINY)
        net.eval()
        for l in (64, 128, 256):
            x = torch.randn(1, 2, l)
            assert net(x).shape == (1, 7, l)

    def test_rejects_unpadded(self):
        net = SegNet(TINY)
        with pytest.raises(ValueError, match="multiple"):
            net(torch.randn(1, 2, 100))

    def test_no_temporal_variant(self):
        cfg = SegNetConfig(encoder_widths=(8, 16, 24, 32), temporal_hidden=16,
                           use_temporal=False)
        net = SegNet(cfg)
        assert net.temporal is None
        assert net(torch.randn(1, 2, 64)).shape == (1, 7, 64)

    def test_config_requires_four_stages(self):
        with pytest.raises(ValueError):
            SegNet(SegNetConfig(encoder_widths=(8, 16, 24)))


class TestExtractSegments:
    def map_from_labels(self, labels, k=7):
        probs = np.full((len(labels), k), 1e-6)
        for i, v in enumerate(labels):
            probs[i, v] = 1.0
        probs /= probs.sum(axis=1, keepdims=True)
        return SegmentationMap(probs)

    def test_clean_blocks(self):
        m = self.map_from_labels([0] * 10 + [2] * 5)
        kinds, positions = extract_segments(m)
        assert kinds == [LayerKind.CONV, LayerKind.RELU]
        assert positions.tolist() == [[0, 9], [10, 14]]

    def test_stray_sample_absorbed(self):
        labels = [0] * 10
        labels[4] = 3
        kinds, positions = extract_segments(self.map_from_labels(labels), min_run=2)
        assert kinds == [LayerKind.CONV]
        assert positions.tolist() == [[0, 9]]

    def test_all_background_empty(self):
        probs = np.zeros((6, 8))
        probs[:, 7] = 1.0
        kinds, positions = extract_segments(SegmentationMap(probs), background_class=7)
        assert kinds == []
        assert positions.shape == (0, 2)

    def test_recovers_annotation_exactly(self):
        from tracearch.tracesim import SimConfig, simulate
        from tracearch.familygen import generate_family
        from tracearch.archspec import InputShape

        shape = InputShape(64, 3, 224, 224)
        spec = generate_family("resnet", 22, shape, rng_seed=8)
        trace, ann = simulate(spec, shape, SimConfig(rng_seed=1))
        m = self.map_from_labels(ann.labels.tolist())
        kinds, positions = extract_segments(m)
        assert kinds == ann.kind_sequence()
        assert np.array_equal(positions, ann.positions)

    def test_empty_map(self):
        kinds, positions = extract_segments(SegmentationMap(np.zeros((0, 7))))
        assert kinds == [] and positions.shape == (0, 2)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    from tracearch.tracesim import SimConfig, build_corpus, load_manifest, manifest_traces

    root = tmp_path_factory.mktemp("seg_corpus")
    build_corpus(6, cfg=SimConfig(rng_seed=21), out_dir=root,
                 depth_range=(2, 8), test_fraction=0.34)
    man = load_manifest(root)
    items = list(manifest_traces(root, man, split="train"))
    return [segnet.prepare_sample(tr, ann, ["pp0", "dram"]) for tr, ann, _ in items]


class TestTraining:
    def test_history_length_and_decrease(self, tiny_corpus):
        model, history = segnet.train(tiny_corpus, TINY, epochs=3, batch_size=4, seed=0)
        assert len(history["loss"]) == 3
        assert history["loss"][-1] < history["loss"][0]

    def test_corpus_without_positions_rejected(self, tiny_corpus):
        broken = [segnet.SegSample(s.values, s.labels, s.layer_ids, 0) for s in tiny_corpus]
        with pytest.raises(ValueError, match="positions"):
            segnet.train(broken, TINY, epochs=1)

    def test_resume_reproduces_history(self, tiny_corpus, tmp_path):
        ckpt = tmp_path / "seg.pt"
        full_model, full_hist = segnet.train(tiny_corpus, TINY, epochs=4, batch_size=4, seed=3)
        # same 4-epoch run interrupted after epoch 2, then resumed
        segnet.train(tiny_corpus, TINY, epochs=4, batch_size=4, seed=3,
                     checkpoint_path=ckpt, stop_after_epoch=2)
        resumed_model, resumed_hist = segnet.train(
            tiny_corpus, TINY, epochs=4, batch_size=4, seed=3, resume_from=ckpt
        )
        assert np.allclose(resumed_hist["loss"], full_hist["loss"], atol=1e-6)
        for a, b in zip(full_model.state_dict().values(),
                        resumed_model.state_dict().values()):
            assert torch.allclose(a, b, atol=1e-6)

    def test_checkpoint_round_trip(self, tiny_corpus, tmp_path):
        model, history = segnet.train(tiny_corpus, TINY, epochs=1, batch_size=4, seed=1)
        path = tmp_path / "ck.pt"
        segnet.save_checkpoint(model, path, meta={"seed": 1, "epoch": 1,
                                                  "history": history, "corpus_hash": "x"})
        loaded, meta = segnet.load_checkpoint(path)
        assert meta["seed"] == 1
        x = torch.randn(1, 2, 64)
        model.eval()
        assert torch.allclose(model(x), loaded(x), atol=1e-6)

    def test_wrong_checkpoint_kind(self, tmp_path):
        torch.save({"format_version": 1, "kind": "other"}, tmp_path / "bad.pt")
        with pytest.raises(ValueError):
            segnet.load_checkpoint(tmp_path / "bad.pt")
