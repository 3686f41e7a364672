"""Synthetic trace oracle: annotated multi-channel traces from an ArchSpec.

The generative model is deliberately simple but information-complete:

* each layer occupies a contiguous run of samples whose duration is an
  affine function of the log compute overhead (clamped below), so heavier
  layers run longer, exactly the monotone relationship the overhead
  regressors must learn;
* each (kind, channel) pair has a base energy level, modulated by a smooth
  within-layer envelope and small level offsets that encode the discrete
  hyperparameters (conv kernel/stride, pool kernel/stride/padding);
* compute-bearing kinds additionally carry an alternating-sign ripple so the
  original segment length stays readable after the fixed-length resize;
* i.i.d. Gaussian noise on top, floored at a small positive value.

Some kind pairs (ReLU vs Add, and several single-channel projections) are
placed close enough that individual samples are ambiguous at the default
noise level: resolving them requires sequence context, which is what the
segmentation model's temporal half and per-layer loss are for.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import archspec, traceio
from .archspec import (
    ArchSpec,
    InputShape,
    InvalidArchitectureError,
    LayerKind,
    KIND_NAMES,
)
from .familygen import generate_family
from .traceio import Annotation, Trace

DEFAULT_CHANNELS = ("pp0", "dram")

# input sizes paired with batch sizes: largest image -> smallest batch
DEFAULT_INPUT_SIZES = (331, 299, 224, 192, 160)
DEFAULT_BATCH_SIZES = (64, 96, 128, 192, 256)


@dataclass
class DurationLaw:
    """samples = max(floor, round(scale * ln(overhead) + offset))"""

    scale: float
    offset: float
    floor: int = 1

    def samples(self, overhead: float, min_layer_samples: int) -> int:
        n = round(self.scale * math.log(overhead) + self.offset)
        return max(min_layer_samples, self.floor, n)


@dataclass
class KindSignature:
    """Per-channel mean level plus envelope shape for one layer kind."""

    levels: dict
    rise: int = 0          # samples ramping up at segment start
    fall: int = 0          # samples ramping down at segment end
    bump: float = 0.0      # triangular mid-segment bump (fraction of level)
    ripple: float = 0.0    # alternating-sign texture amplitude (first channel)
    # a one-sample multiplicative dip at this absolute offset; after the
    # fixed-length resize its position reveals the original segment width
    dip_at: int = 0
    dip_depth: float = 0.75


def _default_signatures() -> dict:
    # BN/ReLU/Add sit in one tight low-power cluster: at the default noise a
    # single sample cannot tell them apart, only sequence context can.
    # ReLU and Add mirror each other across the two channels, so dropping
    # either channel erases most of what separates them.
    return {
        LayerKind.CONV: KindSignature(
            {"pp0": 1.00, "dram": 0.55}, rise=1, fall=1, ripple=0.05, dip_at=6
        ),
        LayerKind.BATCHNORM: KindSignature({"pp0": 0.31, "dram": 0.31}),
        LayerKind.RELU: KindSignature({"pp0": 0.30, "dram": 0.26}),
        LayerKind.MAXPOOL: KindSignature({"pp0": 0.38, "dram": 0.80}, bump=0.08),
        LayerKind.AVGPOOL: KindSignature({"pp0": 0.26, "dram": 0.55}),
        LayerKind.LINEAR: KindSignature(
            {"pp0": 0.55, "dram": 0.35}, ripple=0.05, dip_at=4
        ),
        LayerKind.ADD: KindSignature({"pp0": 0.26, "dram": 0.30}),
    }


def _default_duration_laws() -> dict:
    return {
        LayerKind.CONV: DurationLaw(3.6, -34.0, floor=1),
        LayerKind.LINEAR: DurationLaw(2.2, -20.0, floor=1),
        LayerKind.MAXPOOL: DurationLaw(1.0, -12.0, floor=3),
        LayerKind.AVGPOOL: DurationLaw(0.6, -6.0, floor=2),
        LayerKind.BATCHNORM: DurationLaw(0.5, -7.0, floor=1),
        LayerKind.RELU: DurationLaw(0.4, -5.6, floor=1),
        LayerKind.ADD: DurationLaw(0.4, -5.6, floor=1),
    }


@dataclass
class ParamEncodings:
    """Level/shape offsets that make discrete hyperparameters observable.

    Each target owns its own carrier so cues never overlap: conv kernel size
    moves the pp0 level, conv stride tilts pp0, the log overhead nudges the
    dram level (weak redundancy beside the duration law), pool kernel moves
    dram, pool stride moves pp0, pool padding tilts dram.
    """

    conv_k_step: float = 0.03        # pp0 += step * (index of k in {1,3,5,7} - 1.5)
    conv_s2_tilt: float = -0.10      # pp0 tilt across the segment when stride 2
    conv_lno_gain: float = 0.012     # dram += gain * (ln O_c - 20), clamped
    conv_lno_clamp: float = 0.10
    mp_k3_dram: float = 0.06         # dram += this when k == 3
    mp_s2_pp0: float = 0.06          # pp0 += this when stride 2
    mp_p1_tilt: float = 0.16         # dram tilt across the segment when p == 1
    lin_lno_gain: float = 0.015      # pp0 += gain * (ln O_f - 16), clamped
    lin_lno_gain_dram: float = 0.010
    lin_lno_clamp: float = 0.25


@dataclass
class SimConfig:
    """Knobs of the synthetic oracle; a pure function of rng_seed."""

    sample_rate_hz: float = 1000.0
    channels: Sequence[str] = DEFAULT_CHANNELS
    signatures: dict = field(default_factory=_default_signatures)
    duration_laws: dict = field(default_factory=_default_duration_laws)
    encodings: ParamEncodings = field(default_factory=ParamEncodings)
    noise_std: float = 0.04
    min_layer_samples: int = 1
    unit_scale: float = 1000.0  # signature units -> microjoules per interval
    rng_seed: int = 0

    def check(self):
        if self.min_layer_samples < 1:
            raise ValueError("min_layer_samples must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for kind in LayerKind:
            sig = self.signatures.get(kind)
            if sig is None:
                raise ValueError(f"no signature for {kind.name}")
            for ch in self.channels:
                if ch not in sig.levels:
                    raise ValueError(f"signature for {kind.name} missing channel {ch}")
            if kind not in self.duration_laws:
                raise ValueError(f"no duration law for {kind.name}")


def _level_offsets(kind: LayerKind, channel: str, rec: dict, ln_overhead: float,
                   enc: ParamEncodings) -> float:
    offset = 0.0
    if kind == LayerKind.CONV:
        if channel == "pp0":
            k_index = (1, 3, 5, 7).index(rec["k"])
            offset += enc.conv_k_step * (k_index - 1.5)
        elif channel == "dram":
            amp = enc.conv_lno_gain * (ln_overhead - 20.0)
            offset += max(-enc.conv_lno_clamp, min(enc.conv_lno_clamp, amp))
    elif kind == LayerKind.MAXPOOL:
        if channel == "pp0" and rec["s"] == 2:
            offset += enc.mp_s2_pp0
        elif channel == "dram" and rec["k"] == 3:
            offset += enc.mp_k3_dram
    elif kind == LayerKind.LINEAR:
        amp = ln_overhead - 16.0
        if channel == "pp0":
            offset += max(-enc.lin_lno_clamp, min(enc.lin_lno_clamp, enc.lin_lno_gain * amp))
        elif channel == "dram":
            offset += max(-enc.lin_lno_clamp, min(enc.lin_lno_clamp, enc.lin_lno_gain_dram * amp))
    return offset


def _tilt_for(kind: LayerKind, channel: str, rec: dict, enc: ParamEncodings) -> float:
    """Linear within-segment slope encoding one discrete hyperparameter."""
    if kind == LayerKind.CONV and channel == "pp0" and rec["s"] == 2:
        return enc.conv_s2_tilt
    if kind == LayerKind.MAXPOOL and channel == "dram" and rec["p"] == 1:
        return enc.mp_p1_tilt
    return 0.0


def _layer_record(idx: int, layer, info: archspec.LayerShapeInfo, prev_info,
                  input_shape: InputShape) -> dict:
    """Ground-truth annotation record: hyperparameters plus shape context."""
    rec = {"kind": KIND_NAMES[layer.kind]}
    if prev_info is None:
        h_in, w_in, c_in = input_shape.h, input_shape.w, input_shape.c
    else:
        h_in, w_in, c_in = prev_info.out_h, prev_info.out_w, prev_info.out_channels
    if layer.kind == LayerKind.CONV:
        p = layer.params
        rec.update(c_in=p.c_in, c_out=p.c_out, k=p.k, s=p.s, p=p.p, d=p.d, g=p.g,
                   h_in=h_in, w_in=w_in, h_out=info.out_h, w_out=info.out_w)
    elif layer.kind == LayerKind.MAXPOOL:
        p = layer.params
        rec.update(k=p.k, s=p.s, p=p.p, d=p.d,
                   h_in=h_in, w_in=w_in, h_out=info.out_h, w_out=info.out_w)
    elif layer.kind == LayerKind.LINEAR:
        p = layer.params
        rec.update(f_in=p.f_in, f_out=p.f_out)
    rec["overhead"] = int(info.overhead)
    rec["bs"] = input_shape.bs
    return rec


def simulate(spec: ArchSpec, input_shape: InputShape, cfg: SimConfig,
             rng_seed: Optional[int] = None) -> tuple[Trace, Annotation]:
    """Emit one annotated trace: one contiguous segment per layer, in order."""
    cfg.check()
    problems = archspec.validate(spec, input_shape, class_count=None)
    if problems:
        raise InvalidArchitectureError(f"refusing to simulate invalid spec: {problems[:3]}")
    infos = archspec.propagate_shapes(spec, input_shape)
    rng = np.random.default_rng(cfg.rng_seed if rng_seed is None else rng_seed)
    channels = list(cfg.channels)

    chunks = []
    positions = []
    layer_params = []
    cursor = 0
    prev_info = None
    for idx, (layer, info) in enumerate(zip(spec.layers, infos)):
        kind = layer.kind
        rec = _layer_record(idx, layer, info, prev_info, input_shape)
        ln_overhead = math.log(info.overhead)
        dur = cfg.duration_laws[kind].samples(info.overhead, cfg.min_layer_samples)
        sig = cfg.signatures[kind]

        values = np.empty((len(channels), dur))
        for ci, ch in enumerate(channels):
            level = sig.levels[ch] + _level_offsets(kind, ch, rec, ln_overhead, cfg.encodings)
            row = np.full(dur, level)
            tilt = _tilt_for(kind, ch, rec, cfg.encodings)
            if tilt and dur > 1:
                row += np.linspace(-tilt / 2, tilt / 2, dur)
            env = np.ones(dur)
            for r in range(min(sig.rise, dur)):
                env[r] = min(env[r], 0.85 + 0.15 * r / max(sig.rise, 1))
            for r in range(min(sig.fall, dur)):
                env[dur - 1 - r] = min(env[dur - 1 - r], 0.90 + 0.10 * r / max(sig.fall, 1))
            if sig.bump and dur >= 3:
                tri = 1.0 - np.abs(np.linspace(-1, 1, dur))
                env = env * (1.0 + sig.bump * tri)
            if sig.dip_at:
                env[min(sig.dip_at, dur - 1)] *= sig.dip_depth
            row = row * env
            if sig.ripple and ci == 0:
                row[0::2] += sig.ripple
                row[1::2] -= sig.ripple
            values[ci] = row

        if cfg.noise_std > 0:
            values = values + rng.normal(0.0, cfg.noise_std, size=values.shape)
        chunks.append(values)
        positions.append((cursor, cursor + dur - 1))
        layer_params.append(rec)
        cursor += dur
        prev_info = info

    samples = np.concatenate(chunks, axis=1) if chunks else np.zeros((len(channels), 0))
    samples = np.maximum(samples, 0.01) * cfg.unit_scale
    trace = Trace(
        channels=channels,
        sample_rate_hz=cfg.sample_rate_hz,
        samples=samples.astype(np.float32),
        meta={
            "family": spec.family,
            "input_shape": {"bs": input_shape.bs, "c": input_shape.c,
                            "h": input_shape.h, "w": input_shape.w},
        },
    )
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    kinds = [l.kind for l in spec.layers]
    annotation = Annotation(
        labels=traceio.labels_from_positions(positions, kinds, trace.length),
        positions=positions,
        layer_params=layer_params,
    )
    return trace, annotation


# ---------------------------------------------------------------------------
# Corpus construction
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def batch_size_map(input_sizes=DEFAULT_INPUT_SIZES, batch_sizes=DEFAULT_BATCH_SIZES) -> dict:
    """Pair image sizes with batch sizes, biggest image -> smallest batch."""
    sizes = sorted(input_sizes, reverse=True)
    batches = sorted(batch_sizes)
    if len(sizes) != len(batches):
        raise ValueError("input_sizes and batch_sizes must pair one-to-one")
    return dict(zip(sizes, batches))


def build_corpus(
    n_archs: int,
    input_sizes: Sequence[int] = DEFAULT_INPUT_SIZES,
    batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES,
    cfg: Optional[SimConfig] = None,
    out_dir="corpus",
    depth_range: tuple[int, int] = (2, 40),
    family_weights: dict = None,
    test_fraction: float = 0.2,
    class_count: int = archspec.DEFAULT_CLASS_COUNT,
) -> dict:
    """Generate architectures and one trace per (arch, input size); write a
    manifest recording the by-architecture train/test split."""
    cfg = cfg or SimConfig()
    cfg.check()
    out_dir = Path(out_dir)
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    (out_dir / "specs").mkdir(parents=True, exist_ok=True)
    family_weights = family_weights or {"vgg": 0.05, "resnet": 0.475, "random": 0.475}
    bs_map = batch_size_map(input_sizes, batch_sizes)

    root = np.random.SeedSequence(cfg.rng_seed)
    arch_seeds = root.spawn(n_archs)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    families = list(family_weights)
    weights = np.asarray([family_weights[f] for f in families], dtype=float)
    weights = weights / weights.sum()

    n_test = max(1, int(round(n_archs * test_fraction))) if test_fraction > 0 else 0
    test_ids = set(split_rng.choice(n_archs, size=n_test, replace=False).tolist())

    # generating at the smallest image keeps every pool/stride feasible at
    # all larger sizes; linear f_in is rebound per size afterwards
    probe = min(input_sizes)
    probe_shape = InputShape(bs=bs_map[probe], c=3, h=probe, w=probe)

    archs = []
    for i, seq in enumerate(arch_seeds):
        arch_rng = np.random.default_rng(seq)
        family = families[int(arch_rng.choice(len(families), p=weights))]
        gen_seed = int(arch_rng.integers(0, 2**31 - 1))
        lo = max(depth_range[0], 4) if family == "resnet" else depth_range[0]
        spec = generate_family(family, (lo, depth_range[1]), probe_shape, gen_seed,
                               class_count=class_count)
        arch_id = f"a{i:05d}"
        spec_file = out_dir / "specs" / f"{arch_id}.json"
        archspec.save_json(spec, spec_file)

        traces = []
        trace_seeds = seq.spawn(len(input_sizes))
        for size, tseq in zip(sorted(input_sizes, reverse=True), trace_seeds):
            shape = InputShape(bs=bs_map[size], c=3, h=size, w=size)
            spec_s = archspec.rebind_linear_inputs(spec, shape)
            trace, ann = simulate(spec_s, shape, cfg,
                                  rng_seed=int(np.random.default_rng(tseq).integers(2**31)))
            trace.meta["arch_id"] = arch_id
            name = f"{arch_id}_s{size}.sct"
            traceio.write_trace(trace, out_dir / "traces" / name, ann)
            traces.append({"file": f"traces/{name}", "input_size": size,
                           "bs": bs_map[size], "length": trace.length})
        archs.append({
            "id": arch_id,
            "family": family,
            "depth": spec.depth(),
            "spec_file": f"specs/{arch_id}.json",
            "split": "test" if i in test_ids else "train",
            "traces": traces,
        })

    manifest = {
        "version": 1,
        "seed": cfg.rng_seed,
        "n_archs": n_archs,
        "input_sizes": sorted(input_sizes, reverse=True),
        "batch_map": {str(k): v for k, v in bs_map.items()},
        "depth_range": list(depth_range),
        "class_count": class_count,
        "test_fraction": test_fraction,
        "sim_config": _config_snapshot(cfg),
        "archs": archs,
    }
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def _config_snapshot(cfg: SimConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["channels"] = list(cfg.channels)
    doc["signatures"] = {KIND_NAMES[k]: dataclasses.asdict(v) for k, v in cfg.signatures.items()}
    doc["duration_laws"] = {KIND_NAMES[k]: dataclasses.asdict(v)
                            for k, v in cfg.duration_laws.items()}
    return doc


def config_from_snapshot(doc: dict) -> SimConfig:
    cfg = SimConfig(
        sample_rate_hz=doc["sample_rate_hz"],
        channels=tuple(doc["channels"]),
        signatures={archspec.KINDS_BY_NAME[k]: KindSignature(**v)
                    for k, v in doc["signatures"].items()},
        duration_laws={archspec.KINDS_BY_NAME[k]: DurationLaw(**v)
                       for k, v in doc["duration_laws"].items()},
        encodings=ParamEncodings(**doc["encodings"]),
        noise_std=doc["noise_std"],
        min_layer_samples=doc["min_layer_samples"],
        unit_scale=doc["unit_scale"],
        rng_seed=doc["rng_seed"],
    )
    return cfg


def load_manifest(corpus_dir) -> dict:
    with open(Path(corpus_dir) / MANIFEST_NAME) as fh:
        return json.load(fh)


def manifest_traces(corpus_dir, manifest: dict, split: Optional[str] = None):
    """Yield (trace, annotation, arch record) for a corpus split."""
    corpus_dir = Path(corpus_dir)
    for arch in manifest["archs"]:
        if split is not None and arch["split"] != split:
            continue
        for t in arch["traces"]:
            trace, ann = traceio.read_trace(corpus_dir / t["file"])
            yield trace, ann, arch
