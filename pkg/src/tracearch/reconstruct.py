"""End-to-end attack: trace -> segmentation -> per-segment inference -> ArchSpec.

The attack walks predicted segments in order, maintaining the tensor shape
state (channel chain, spatial dims via the conv/pool shape rule, flatten
into linear feature sizes), asks the per-hyperparameter models for each
segment's free parameters, derives the rest from fixed rules (padding from
kernel size, dilation/groups = 1), and emits a validated architecture plus
per-layer diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np
import torch

from . import archspec, hypernet, metrics, segnet
from .archspec import (
    ArchSpec,
    ConvParams,
    InputShape,
    InvalidArchitectureError,
    LayerKind,
    LayerSpec,
    LinearParams,
    MaxPoolParams,
    conv_padding_for,
    derive_output_shape,
)
from .metrics import EvalReport
from .traceio import Annotation, Segment, Trace, normalize, pad_to_multiple

HYPER_TASK_NAMES = ("conv_k", "conv_s", "mp_k", "mp_s", "mp_p", "conv_cout", "linear_fout")


@dataclass
class AttackContext:
    """Everything the attacker knows: the query shape and the trained models."""

    input_shape: InputShape
    seg_model: segnet.SegNet
    hyper_models: dict
    class_count: int = archspec.DEFAULT_CLASS_COUNT
    min_run: int = 1
    resolve_add_sources: bool = True

    def check(self):
        missing = [n for n in HYPER_TASK_NAMES if n not in self.hyper_models]
        if missing:
            raise ValueError(f"attack context missing hypernet models: {missing}")


def load_context(
    segnet_path, hyper_paths: dict, input_shape: InputShape,
    class_count: int = archspec.DEFAULT_CLASS_COUNT, **kwargs,
) -> AttackContext:
    seg_model, _ = segnet.load_checkpoint(segnet_path)
    hyper_models = {}
    for name, path in hyper_paths.items():
        model, _ = hypernet.load_checkpoint(path)
        if model.task.name != name:
            raise ValueError(f"{path}: checkpoint is for task {model.task.name}, not {name}")
        hyper_models[name] = model
    ctx = AttackContext(input_shape, seg_model, hyper_models,
                        class_count=class_count, **kwargs)
    ctx.check()
    return ctx


@dataclass
class _ShapeState:
    c: Optional[int]
    h: Optional[int]
    w: Optional[int]
    feats: Optional[int] = None

    @property
    def flat(self) -> bool:
        return self.feats is not None

    def as_tuple(self):
        return (self.feats,) if self.flat else (self.c, self.h, self.w)


def _segment_probs(ctx: AttackContext, trace: Trace) -> segnet.SegmentationMap:
    model = ctx.seg_model
    prepared = pad_to_multiple(normalize(trace.select_channels(list(model.config.channels))))
    seg_map = model.segment(prepared)
    return segnet.SegmentationMap(seg_map.probs[: trace.length])


def _classify(ctx, name, segment):
    label, conf = hypernet.infer_classification(ctx.hyper_models[name], segment)
    return label, conf


def _ranked_combos(label_sets, confs):
    """All label combinations ordered by joint confidence, best first."""
    combos = []
    for choice in product(*[range(len(s)) for s in label_sets]):
        score = 1.0
        for idx, conf in zip(choice, confs):
            score *= float(conf[idx])
        combos.append((score, tuple(s[i] for s, i in zip(label_sets, choice))))
    combos.sort(key=lambda t: -t[0])
    return [labels for _, labels in combos]


def attack(trace: Trace, ctx: AttackContext,
           annotation: Optional[Annotation] = None) -> tuple[ArchSpec, dict]:
    """Recover a full architecture from one trace.

    Returns the best-effort spec plus diagnostics (per-layer confidences,
    shape contradictions, validation results, and LDA/SA against the ground
    truth when an annotation is supplied).
    """
    ctx.check()
    diagnostics: dict = {"layers": [], "contradictions": [], "dropped": []}
    if trace.length == 0:
        diagnostics["contradictions"].append("empty trace")
        spec = ArchSpec(layers=[], family="recovered")
        diagnostics["violations"] = ["empty layer list"]
        return spec, diagnostics

    seg_map = _segment_probs(ctx, trace)
    kinds, positions = segnet.extract_segments(seg_map, min_run=ctx.min_run)
    values = normalize(trace.select_channels(list(ctx.seg_model.config.channels)).samples)

    bs = ctx.input_shape.bs
    state = _ShapeState(ctx.input_shape.c, ctx.input_shape.h, ctx.input_shape.w)
    layers: list[LayerSpec] = []
    shapes_after: list[tuple] = []
    skip_edges: list[tuple[int, int]] = []
    last_linear_pos = max(
        (i for i, k in enumerate(kinds) if k == LayerKind.LINEAR), default=None
    )

    for seg_idx, (kind, (start, end)) in enumerate(zip(kinds, positions)):
        segment = Segment(values[:, start : end + 1], kind)
        entry = {
            "kind": archspec.KIND_NAMES[kind],
            "span": [int(start), int(end)],
            "mean_prob": float(seg_map.probs[start : end + 1, int(kind)].mean()),
        }
        layer: Optional[LayerSpec] = None

        if kind == LayerKind.CONV:
            if state.flat:
                diagnostics["contradictions"].append(f"segment {seg_idx}: conv after flatten")
                diagnostics["dropped"].append(entry)
                continue
            k, conf_k = _classify(ctx, "conv_k", segment)
            s, conf_s = _classify(ctx, "conv_s", segment)
            entry["k"] = {"value": k, "confidence": float(conf_k.max())}
            entry["s"] = {"value": s, "confidence": float(conf_s.max())}
            chosen = None
            for k_try, s_try in _ranked_combos(
                [hypernet.TASKS["conv_k"].label_set, hypernet.TASKS["conv_s"].label_set],
                [conf_k, conf_s],
            ):
                probe = LayerSpec(LayerKind.CONV, ConvParams(
                    state.c, 16, k_try, s_try, conv_padding_for(k_try)))
                try:
                    h_out, w_out = derive_output_shape(probe, (state.h, state.w))
                    chosen = (k_try, s_try, h_out, w_out)
                    break
                except InvalidArchitectureError:
                    continue
            if chosen is None:
                diagnostics["contradictions"].append(
                    f"segment {seg_idx}: no feasible conv shape")
                diagnostics["dropped"].append(entry)
                continue
            if chosen[:2] != (k, s):
                diagnostics["contradictions"].append(
                    f"segment {seg_idx}: conv ({k},{s}) infeasible, "
                    f"fell back to {chosen[:2]}")
                k, s = chosen[:2]
            h_out, w_out = chosen[2:]
            context = {"c_in": state.c, "k": k, "s": s,
                       "h_in": state.h, "w_in": state.w, "bs": bs}
            try:
                c_out = hypernet.infer_cout(ctx.hyper_models["conv_cout"], segment, context)
            except hypernet.InferenceError as exc:
                diagnostics["contradictions"].append(f"segment {seg_idx}: {exc}")
                c_out = 16
            entry["c_out"] = {"value": c_out}
            layer = LayerSpec(LayerKind.CONV, ConvParams(
                state.c, c_out, k, s, conv_padding_for(k)))
            state = _ShapeState(c_out, h_out, w_out)

        elif kind == LayerKind.MAXPOOL:
            if state.flat:
                diagnostics["contradictions"].append(f"segment {seg_idx}: pool after flatten")
                diagnostics["dropped"].append(entry)
                continue
            k, conf_k = _classify(ctx, "mp_k", segment)
            s, conf_s = _classify(ctx, "mp_s", segment)
            p, conf_p = _classify(ctx, "mp_p", segment)
            entry["k"] = {"value": k, "confidence": float(conf_k.max())}
            entry["s"] = {"value": s, "confidence": float(conf_s.max())}
            entry["p"] = {"value": p, "confidence": float(conf_p.max())}
            chosen = None
            for k_try, s_try, p_try in _ranked_combos(
                [hypernet.TASKS["mp_k"].label_set, hypernet.TASKS["mp_s"].label_set,
                 hypernet.TASKS["mp_p"].label_set],
                [conf_k, conf_s, conf_p],
            ):
                probe = LayerSpec(LayerKind.MAXPOOL, MaxPoolParams(k_try, s_try, p_try))
                try:
                    h_out, w_out = derive_output_shape(probe, (state.h, state.w))
                    chosen = (k_try, s_try, p_try, h_out, w_out)
                    break
                except InvalidArchitectureError:
                    continue
            if chosen is None:
                diagnostics["contradictions"].append(
                    f"segment {seg_idx}: no feasible pool shape")
                diagnostics["dropped"].append(entry)
                continue
            if chosen[:3] != (k, s, p):
                diagnostics["contradictions"].append(
                    f"segment {seg_idx}: pool ({k},{s},{p}) infeasible, "
                    f"fell back to {chosen[:3]}")
            k, s, p = chosen[:3]
            layer = LayerSpec(LayerKind.MAXPOOL, MaxPoolParams(k, s, p))
            state = _ShapeState(state.c, chosen[3], chosen[4])

        elif kind == LayerKind.AVGPOOL:
            if state.flat:
                diagnostics["contradictions"].append(f"segment {seg_idx}: pool after flatten")
                diagnostics["dropped"].append(entry)
                continue
            layer = LayerSpec(LayerKind.AVGPOOL)
            state = _ShapeState(state.c, 1, 1)

        elif kind == LayerKind.LINEAR:
            f_in = state.feats if state.flat else state.c * state.h * state.w
            context = {
                "f_in": f_in, "bs": bs,
                "is_last_layer": seg_idx == last_linear_pos,
                "class_count": ctx.class_count,
            }
            try:
                f_out = hypernet.infer_fout(ctx.hyper_models["linear_fout"], segment, context)
            except hypernet.InferenceError as exc:
                diagnostics["contradictions"].append(f"segment {seg_idx}: {exc}")
                f_out = ctx.class_count
            entry["f_out"] = {"value": f_out}
            layer = LayerSpec(LayerKind.LINEAR, LinearParams(f_in, f_out))
            state = _ShapeState(None, None, None, feats=f_out)

        else:  # BATCHNORM / RELU / ADD carry no inferred hyperparameters
            layer = LayerSpec(kind)
            if kind == LayerKind.ADD and ctx.resolve_add_sources:
                target = len(layers)
                source = None
                for j in range(target - 2, -1, -1):
                    if shapes_after[j] == state.as_tuple():
                        source = j
                        break
                if source is not None:
                    skip_edges.append((source, target))
                else:
                    diagnostics["contradictions"].append(
                        f"segment {seg_idx}: no shape-compatible Add source")

        layers.append(layer)
        shapes_after.append(state.as_tuple())
        diagnostics["layers"].append(entry)

    spec = ArchSpec(layers=layers, skip_edges=skip_edges, family="recovered")
    diagnostics["violations"] = archspec.validate(spec, class_count=ctx.class_count)
    diagnostics["pred_kinds"] = [archspec.KIND_NAMES[k] for k in kinds]

    if annotation is not None:
        true_seq = annotation.kind_sequence()
        pred_labels = seg_map.argmax_labels()
        diagnostics["lda"] = metrics.lda([int(k) for k in kinds], [int(k) for k in true_seq])
        diagnostics["sa"] = metrics.sa(pred_labels, annotation.labels)
    return spec, diagnostics


# ---------------------------------------------------------------------------
# Corpus evaluation: oracle vs chained second-step protocol
# ---------------------------------------------------------------------------

def _batched_outputs(model, values_list, batch_size=64):
    if not values_list:
        return np.zeros((0, model.task.n_outputs()), dtype=np.float32)
    x = torch.from_numpy(np.stack(values_list))
    outs = []
    with torch.no_grad():
        for i in range(0, len(values_list), batch_size):
            outs.append(model(x[i : i + batch_size]))
    return torch.cat(outs).numpy()


def _predict_task(model, samples: list[hypernet.TaskSample]):
    """Predictions for one task over prepared samples (batched)."""
    task = model.task
    outs = _batched_outputs(model, [s.values for s in samples])
    preds = []
    for i, s in enumerate(samples):
        if task.head == "classification":
            preds.append(task.label_set[int(outs[i].argmax())])
            continue
        value = float(outs[i].squeeze() * float(model.target_std[0])
                      + float(model.target_mean[0]))
        rec = dict(s.context)
        try:
            if task.name == "conv_cout":
                if task.regression_mode == "direct":
                    preds.append(hypernet.snap_pow2(2.0 ** value))
                else:
                    preds.append(hypernet.cout_from_overhead(np.exp(value), rec))
            else:
                if task.regression_mode == "direct":
                    if rec.get("is_last_layer"):
                        preds.append(rec.get("class_count", 1000))
                    else:
                        preds.append(hypernet.snap_pow2(2.0 ** value))
                else:
                    preds.append(hypernet.fout_from_overhead(
                        np.exp(value), rec["f_in"], rec["bs"],
                        rec.get("is_last_layer", False), rec.get("class_count", 1000)))
        except hypernet.InferenceError:
            preds.append(-1)
    return preds


def evaluate_chained(corpus, ctx: AttackContext, mode: str = "chained",
                     tasks: Optional[list[str]] = None) -> EvalReport:
    """Score structure recovery and per-hyperparameter inference on a corpus.

    mode "chained": only sampling points typed correctly by the first step
    are fed to the second step (the comparison protocol); mode "oracle":
    ground-truth segments, the second step's upper bound.
    """
    if mode not in ("chained", "oracle"):
        raise ValueError(f"unknown mode {mode!r}")
    tasks = [n for n in (tasks or HYPER_TASK_NAMES) if n in ctx.hyper_models]
    per_task: dict = {name: [] for name in tasks}  # (sample, true value) pairs
    correct_samples = 0
    total_samples = 0
    ldas = []

    for item in corpus:
        trace, annotation = item[0], item[1]
        true_labels = annotation.labels
        if mode == "chained":
            seg_map = _segment_probs(ctx, trace)
            pred_labels = seg_map.argmax_labels()
            pred_kinds, _ = segnet.extract_segments(seg_map, min_run=ctx.min_run)
            true_seq = [int(k) for k in annotation.kind_sequence()]
            ldas.append(metrics.lda([int(k) for k in pred_kinds], true_seq))
            keep = true_labels != archspec.BACKGROUND
            correct_samples += int((pred_labels[keep] == true_labels[keep]).sum())
            total_samples += int(keep.sum())
        values = normalize(
            trace.select_channels(list(ctx.seg_model.config.channels)).samples
        )
        class_count = ctx.class_count
        n_linear = sum(1 for r in annotation.layer_params if r["kind"] == "linear")
        linear_seen = 0
        for (start, end), rec in zip(annotation.positions, annotation.layer_params):
            kind = archspec.KINDS_BY_NAME[rec["kind"]]
            if kind == LayerKind.LINEAR:
                linear_seen += 1
            if mode == "chained":
                sel = np.where(pred_labels[start : end + 1] == int(kind))[0]
                if sel.size == 0:
                    continue  # layer never typed correctly; excluded from step 2
                seg_values = values[:, start : end + 1][:, sel]
            else:
                seg_values = values[:, start : end + 1]
            context = dict(rec)
            if kind == LayerKind.LINEAR:
                context["is_last_layer"] = linear_seen == n_linear
                context["class_count"] = class_count
            for name in tasks:
                model = ctx.hyper_models[name]
                if model.task.layer_kind != kind:
                    continue
                sample = hypernet.TaskSample(
                    values=np.ascontiguousarray(
                        hypernet.resize_values(seg_values.astype(np.float32),
                                               model.config.input_len)),
                    context=context,
                )
                per_task[name].append((sample, rec.get(hypernet.TASK_FIELD[name])))

    report = EvalReport(counts={"mode": mode})
    if mode == "chained":
        report.sa = correct_samples / max(total_samples, 1)
        report.lda = float(np.mean(ldas)) if ldas else None

    all_scores = []
    for name in tasks:
        if not per_task[name]:
            continue
        samples = [s for s, _ in per_task[name]]
        trues = [t for _, t in per_task[name]]
        model = ctx.hyper_models[name]
        preds = _predict_task(model, samples)
        label_set = (list(model.task.label_set) if model.task.head == "classification"
                     else sorted(set(trues) | set(preds)))
        scores = metrics.prf1(preds, trues, label_set)
        report.per_hyper[name] = scores
        report.extras.setdefault("accuracy", {})[name] = float(
            np.mean([p == t for p, t in zip(preds, trues)])
        )
        all_scores.append(scores["weighted"])
        report.counts[name] = len(samples)

    if all_scores:
        total = sum(s.support for s in all_scores)
        report.weighted = metrics.LabelScore(
            precision=sum(s.precision * s.support for s in all_scores) / total,
            recall=sum(s.recall * s.support for s in all_scores) / total,
            f1=sum(s.f1 * s.support for s in all_scores) / total,
            support=total,
        )
    return report
