"""Shared fixture: one small trained pipeline reused across test modules.

Training even a toy pipeline costs minutes on CPU, so reconstruct/cli tests
share a single session-scoped set of models over a small synthetic corpus.
"""

import pytest
import torch

from tracearch import hypernet, reconstruct, segnet, tracesim

torch.set_num_threads(1)

CHANNELS = ["pp0", "dram"]
SEG_CONFIG = dict(encoder_widths=(12, 24, 48, 64), temporal_hidden=32)
HYPER_WIDTHS = (8, 16, 32, 48)


@pytest.fixture(scope="session")
def mini_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    corpus_dir = root / "corpus"
    tracesim.build_corpus(
        18, cfg=tracesim.SimConfig(rng_seed=13), out_dir=corpus_dir,
        depth_range=(2, 14), test_fraction=0.25,
    )
    manifest = tracesim.load_manifest(corpus_dir)
    train_items = list(tracesim.manifest_traces(corpus_dir, manifest, split="train"))
    test_items = list(tracesim.manifest_traces(corpus_dir, manifest, split="test"))

    seg_cfg = segnet.SegNetConfig(channels=tuple(CHANNELS), **SEG_CONFIG)
    seg_samples = [segnet.prepare_sample(tr, ann, CHANNELS) for tr, ann, _ in train_items]
    seg_model, _ = segnet.train(seg_samples, seg_cfg, epochs=14, batch_size=16, seed=3)
    seg_path = root / "segnet.pt"
    segnet.save_checkpoint(seg_model, seg_path,
                           meta={"seed": 3, "epoch": 14, "history": {}, "corpus_hash": ""})

    pairs = [(tr, ann) for tr, ann, _ in train_items]
    hyper_cfg = hypernet.HyperNetConfig(channels=tuple(CHANNELS),
                                        encoder_widths=HYPER_WIDTHS)
    hyper_models = {}
    hyper_paths = {}
    for name in reconstruct.HYPER_TASK_NAMES:
        task = hypernet.TASKS[name]
        ds = hypernet.build_task_dataset(pairs, task, CHANNELS, max_samples=500)
        model, _ = hypernet.train_task(task, ds, hyper_cfg, epochs=12, seed=4)
        hyper_models[name] = model
        path = root / f"{name}.pt"
        hypernet.save_checkpoint(model, path, meta={"n_samples": len(ds)})
        hyper_paths[name] = path

    return {
        "root": root,
        "corpus_dir": corpus_dir,
        "manifest": manifest,
        "train_items": train_items,
        "test_items": test_items,
        "seg_model": seg_model,
        "seg_path": seg_path,
        "hyper_models": hyper_models,
        "hyper_paths": hyper_paths,
    }
