"""Command-line entry points: synth, train-seg, train-hyper, attack, eval.

Every run resolves its configuration (file + flag overrides), writes the
resolved snapshot next to its outputs, and derives its default output
directory from a hash of that snapshot, so reruns with identical configs
land in the same place.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import archspec, hypernet, reconstruct, segnet, tracesim, traceio
from .archspec import InputShape, InvalidArchitectureError
from .familygen import GenerationError


class ConfigError(ValueError):
    pass


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")


def _resolve(config_file, args, keys) -> dict:
    """File values overridden by any non-None CLI flags."""
    resolved = dict(_load_config(config_file))
    for key in keys:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            resolved[key] = value
    return resolved


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _prepare_out_dir(base, name, resolved) -> Path:
    out = Path(base) if base else Path(f"runs/{name}-{_config_hash(resolved)}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved-config.json", "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
    return out


def _parse_int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _load_train_split(corpus_dir, split="train", cap=None):
    manifest = tracesim.load_manifest(corpus_dir)
    items = list(tracesim.manifest_traces(corpus_dir, manifest, split=split))
    if cap:
        items = items[: int(cap)]
    return manifest, items


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    resolved = _resolve(args.config, args, [
        "n-archs", "seed", "depth-min", "depth-max", "noise-std",
        "test-fraction", "min-layer-samples",
    ])
    resolved.setdefault("n-archs", 200)
    resolved.setdefault("seed", 0)
    resolved.setdefault("depth-min", 2)
    resolved.setdefault("depth-max", 40)
    resolved.setdefault("test-fraction", 0.2)
    input_sizes = _parse_int_list(args.input_sizes) if args.input_sizes \
        else list(tracesim.DEFAULT_INPUT_SIZES)
    if any(s < 32 for s in input_sizes):
        raise ConfigError(f"input sizes {input_sizes} too small (min 32)")
    resolved["input-sizes"] = input_sizes

    cfg = tracesim.SimConfig(rng_seed=int(resolved["seed"]))
    if resolved.get("noise-std") is not None:
        cfg.noise_std = float(resolved["noise-std"])
    if resolved.get("min-layer-samples") is not None:
        cfg.min_layer_samples = int(resolved["min-layer-samples"])

    out = _prepare_out_dir(args.out, "corpus", resolved)
    manifest = tracesim.build_corpus(
        n_archs=int(resolved["n-archs"]),
        input_sizes=input_sizes,
        cfg=cfg,
        out_dir=out,
        depth_range=(int(resolved["depth-min"]), int(resolved["depth-max"])),
        test_fraction=float(resolved["test-fraction"]),
    )
    n_traces = sum(len(a["traces"]) for a in manifest["archs"])
    print(f"wrote {n_traces} traces for {len(manifest['archs'])} architectures to {out}")
    return 0


def cmd_train_seg(args) -> int:
    resolved = _resolve(args.config, args, [
        "epochs", "batch-size", "lr", "seed", "lambda-up", "hidden", "train-cap",
    ])
    resolved.setdefault("epochs", 100)
    resolved.setdefault("batch-size", 32)
    resolved.setdefault("lr", 0.01)
    resolved.setdefault("seed", 0)
    resolved.setdefault("lambda-up", 1.0)
    channels = args.channels.split(",") if args.channels else ["pp0", "dram"]
    widths = tuple(_parse_int_list(args.widths)) if args.widths else (64, 128, 256, 512)
    resolved["channels"] = channels
    resolved["widths"] = list(widths)
    resolved["use-temporal"] = not args.no_temporal
    resolved["corpus"] = str(args.corpus)

    manifest, items = _load_train_split(args.corpus, cap=resolved.get("train-cap"))
    if not items:
        raise ConfigError("corpus has no training traces")
    for _, ann, _ in items:
        if ann is None:
            raise ConfigError("corpus trace lacks annotations (positions required)")

    config = segnet.SegNetConfig(
        channels=tuple(channels),
        encoder_widths=widths,
        temporal_hidden=int(resolved["hidden"]) if resolved.get("hidden") else 256,
        lambda_up=float(resolved["lambda-up"]),
        use_temporal=resolved["use-temporal"],
    )
    samples = [segnet.prepare_sample(tr, ann, channels) for tr, ann, _ in items]
    out = _prepare_out_dir(args.out, "segnet", resolved)
    model, history = segnet.train(
        samples, config,
        epochs=int(resolved["epochs"]), batch_size=int(resolved["batch-size"]),
        lr=float(resolved["lr"]), seed=int(resolved["seed"]),
        checkpoint_path=out / "segnet.pt",
        corpus_hash=segnet.corpus_fingerprint(samples),
        log_every=args.log_every,
    )
    with open(out / "history.json", "w") as fh:
        json.dump(history, fh)
    print(f"segnet checkpoint: {out / 'segnet.pt'} (final loss {history['loss'][-1]:.4f})")
    return 0


def cmd_train_hyper(args) -> int:
    if args.task not in hypernet.TASKS:
        raise ConfigError(f"unknown task {args.task!r}; choose from {sorted(hypernet.TASKS)}")
    resolved = _resolve(args.config, args, [
        "epochs", "batch-size", "lr", "seed", "max-samples", "train-cap",
    ])
    resolved.setdefault("epochs", 100)
    resolved.setdefault("batch-size", 32)
    resolved.setdefault("lr", 0.01)
    resolved.setdefault("seed", 0)
    channels = args.channels.split(",") if args.channels else ["pp0", "dram"]
    widths = tuple(_parse_int_list(args.widths)) if args.widths else (64, 128, 256, 512)
    resolved.update({"task": args.task, "channels": channels, "widths": list(widths),
                     "regression": args.regression, "corpus": str(args.corpus)})

    task = hypernet.TASKS[args.task]
    if task.head == "regression" and args.regression:
        task = hypernet.task_variant(args.task, args.regression)

    manifest, items = _load_train_split(args.corpus, cap=resolved.get("train-cap"))
    corpus = [(tr, ann) for tr, ann, _ in items if ann is not None]
    if not corpus:
        raise ConfigError("corpus has no annotated training traces")
    dataset = hypernet.build_task_dataset(
        corpus, task, channels,
        max_samples=int(resolved["max-samples"]) if resolved.get("max-samples") else None,
        seed=int(resolved["seed"]),
    )
    config = hypernet.HyperNetConfig(channels=tuple(channels), encoder_widths=widths)
    out = _prepare_out_dir(args.out, f"hyper-{task.name}", resolved)
    model, history = hypernet.train_task(
        task, dataset, config,
        epochs=int(resolved["epochs"]), batch_size=int(resolved["batch-size"]),
        lr=float(resolved["lr"]), seed=int(resolved["seed"]), log_every=args.log_every,
    )
    ckpt = out / f"{task.name}.pt"
    hypernet.save_checkpoint(model, ckpt, meta={"history": history,
                                                "n_samples": len(dataset)})
    print(f"hypernet checkpoint: {ckpt} (final loss {history['loss'][-1]:.4f})")
    return 0


def _hyper_paths_from_dir(hyper_dir) -> dict:
    paths = {}
    for name in reconstruct.HYPER_TASK_NAMES:
        p = Path(hyper_dir) / f"{name}.pt"
        if p.exists():
            paths[name] = p
    missing = set(reconstruct.HYPER_TASK_NAMES) - set(paths)
    if missing:
        raise ConfigError(f"{hyper_dir} is missing checkpoints: {sorted(missing)}")
    return paths


def cmd_attack(args) -> int:
    trace, annotation = traceio.read_trace(args.trace)
    shape_doc = trace.meta.get("input_shape") or {}
    bs = args.bs or shape_doc.get("bs")
    h = args.input_size or shape_doc.get("h")
    if bs is None or h is None:
        raise ConfigError("query shape unknown: pass --bs and --input-size "
                          "or use a trace with input_shape metadata")
    shape = InputShape(bs=int(bs), c=int(shape_doc.get("c", 3)), h=int(h), w=int(h))
    ctx = reconstruct.load_context(
        args.segnet, _hyper_paths_from_dir(args.hyper_dir), shape,
        class_count=args.class_count,
    )
    spec, diagnostics = reconstruct.attack(trace, ctx, annotation=annotation)
    out = Path(args.out) if args.out else Path(str(args.trace) + ".recovered.json")
    archspec.save_json(spec, out)
    with open(str(out) + ".diagnostics.json", "w") as fh:
        json.dump(diagnostics, fh, indent=1)
    print(f"recovered {len(spec.layers)} layers -> {out}")
    if "lda" in diagnostics:
        print(f"LDA {diagnostics['lda']:.4f}  SA {diagnostics['sa']:.4f}")
    return 0


def cmd_eval(args) -> int:
    resolved = {"corpus": str(args.corpus), "mode": args.mode,
                "segnet": str(args.segnet), "hyper_dir": str(args.hyper_dir),
                "split": args.split}
    manifest = tracesim.load_manifest(args.corpus)
    items = [(tr, ann) for tr, ann, _ in
             tracesim.manifest_traces(args.corpus, manifest, split=args.split)]
    if not items:
        raise ConfigError(f"no traces in split {args.split!r}")
    first_shape = items[0][0].meta.get("input_shape", {})
    shape = InputShape(bs=first_shape.get("bs", 64), c=first_shape.get("c", 3),
                       h=first_shape.get("h", 224), w=first_shape.get("w", 224))
    ctx = reconstruct.load_context(
        args.segnet, _hyper_paths_from_dir(args.hyper_dir), shape,
        class_count=manifest.get("class_count", archspec.DEFAULT_CLASS_COUNT),
    )
    report = reconstruct.evaluate_chained(items, ctx, mode=args.mode)
    out = _prepare_out_dir(args.out, "eval", resolved)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(report.render())
    print(f"report: {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracearch",
        description="Recover DNN architectures from side-channel traces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic annotated corpus")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--n-archs", type=int, dest="n_archs")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth-min", type=int, dest="depth_min")
    p.add_argument("--depth-max", type=int, dest="depth_max")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--min-layer-samples", type=int, dest="min_layer_samples")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--input-sizes", dest="input_sizes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", help="train the segmentation model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--channels")
    p.add_argument("--widths")
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-up", type=float, dest="lambda_up")
    p.add_argument("--no-temporal", action="store_true")
    p.add_argument("--train-cap", type=int, dest="train_cap")
    p.add_argument("--log-every", type=int, default=0, dest="log_every")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-hyper", help="train one hyperparameter model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--channels")
    p.add_argument("--widths")
    p.add_argument("--regression", choices=["indirect", "direct"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-samples", type=int, dest="max_samples")
    p.add_argument("--train-cap", type=int, dest="train_cap")
    p.add_argument("--log-every", type=int, default=0, dest="log_every")
    p.set_defaults(func=cmd_train_hyper)

    p = sub.add_parser("attack", help="recover an architecture from one trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--segnet", required=True)
    p.add_argument("--hyper-dir", required=True, dest="hyper_dir")
    p.add_argument("--out")
    p.add_argument("--bs", type=int)
    p.add_argument("--input-size", type=int, dest="input_size")
    p.add_argument("--class-count", type=int, default=archspec.DEFAULT_CLASS_COUNT,
                   dest="class_count")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="score models on an annotated corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--segnet", required=True)
    p.add_argument("--hyper-dir", required=True, dest="hyper_dir")
    p.add_argument("--mode", choices=["chained", "oracle"], default="chained")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, InvalidArchitectureError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
