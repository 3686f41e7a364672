"""Per-hyperparameter meta-models: five classifiers and two overhead regressors.

Each model reuses the segmentation network's four encoder stages and adds a
single fully connected head. Classification tasks (conv kernel/stride, pool
kernel/stride/padding) train with cross-entropy over their closed label
sets. The wide-range targets (conv kernel count, linear output width) train
as regressions against the natural log of the layer's compute overhead; the
target hyperparameter is then solved algebraically from the predicted
overhead and the known shape context, and snapped to a power of two. A
"direct" regression mode (predicting log2 of the value itself) exists only
as an ablation baseline.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archspec import (
    LayerKind,
    LayerSpec,
    ConvParams,
    MIN_POW2_EXP,
    conv_padding_for,
    derive_output_shape,
)
from .segnet import ResBlock1d
from .traceio import Segment, Trace, normalize, resize_values

CHECKPOINT_VERSION = 1


class InferenceError(ValueError):
    """Segment/task mismatch or an unrecoverable inferred quantity."""


@dataclass(frozen=True)
class HyperTask:
    name: str
    layer_kind: LayerKind
    head: str  # "classification" | "regression"
    label_set: tuple = ()
    regression_mode: str = "indirect"  # or "direct"

    def n_outputs(self) -> int:
        return len(self.label_set) if self.head == "classification" else 1


TASKS = {
    "conv_k": HyperTask("conv_k", LayerKind.CONV, "classification", (1, 3, 5, 7)),
    "conv_s": HyperTask("conv_s", LayerKind.CONV, "classification", (1, 2)),
    "mp_k": HyperTask("mp_k", LayerKind.MAXPOOL, "classification", (2, 3)),
    "mp_s": HyperTask("mp_s", LayerKind.MAXPOOL, "classification", (1, 2)),
    "mp_p": HyperTask("mp_p", LayerKind.MAXPOOL, "classification", (0, 1)),
    "conv_cout": HyperTask("conv_cout", LayerKind.CONV, "regression"),
    "linear_fout": HyperTask("linear_fout", LayerKind.LINEAR, "regression"),
}

TASK_FIELD = {
    "conv_k": "k",
    "conv_s": "s",
    "mp_k": "k",
    "mp_s": "s",
    "mp_p": "p",
    "conv_cout": "c_out",
    "linear_fout": "f_out",
}


def task_variant(name: str, regression_mode: str) -> HyperTask:
    base = TASKS[name]
    if base.head != "regression":
        raise ValueError(f"{name} has no regression mode")
    return dataclasses.replace(base, regression_mode=regression_mode)


@dataclass
class HyperNetConfig:
    channels: tuple = ("pp0", "dram")
    encoder_widths: tuple = (64, 128, 256, 512)
    input_len: int = 1024

    @property
    def in_channels(self) -> int:
        return len(self.channels)


class HyperNet(nn.Module):
    """Segmentation-encoder stack with one fully connected output layer."""

    def __init__(self, config: HyperNetConfig, task: HyperTask):
        super().__init__()
        self.config = config
        self.task = task
        w = config.encoder_widths
        self.encoders = nn.ModuleList()
        c_prev = config.in_channels
        for width in w:
            self.encoders.append(ResBlock1d(c_prev, width))
            c_prev = width
        self.pool = nn.MaxPool1d(2)
        feat_len = config.input_len // (2 ** len(w))
        self.fc = nn.Linear(w[-1] * feat_len, task.n_outputs())
        # regression targets are standardized during training
        self.register_buffer("target_mean", torch.zeros(1))
        self.register_buffer("target_std", torch.ones(1))

    def forward(self, x):
        for enc in self.encoders:
            x = self.pool(enc(x))
        return self.fc(torch.flatten(x, 1))


# ---------------------------------------------------------------------------
# Task datasets
# ---------------------------------------------------------------------------

@dataclass
class TaskSample:
    values: np.ndarray  # (c, input_len) float32
    label_index: int = -1  # classification
    target: float = 0.0  # regression
    context: dict = field(default_factory=dict)


def segments_from_annotation(trace: Trace, annotation, channels: Sequence[str]):
    """Cut one Segment per annotated layer from the trace (normalized once,
    trace-level, so relative levels stay meaningful)."""
    values = normalize(trace.select_channels(list(channels)).samples)
    segments = []
    for (start, end), rec in zip(annotation.positions, annotation.layer_params):
        seg = Segment(
            values=values[:, start : end + 1].copy(),
            kind=LayerKind[rec["kind"].upper()] if isinstance(rec["kind"], str)
            else LayerKind(rec["kind"]),
            context=dict(rec),
        )
        segments.append(seg)
    return segments


def task_sample_from_segment(task: HyperTask, segment: Segment, input_len: int) -> TaskSample:
    if segment.kind != task.layer_kind:
        raise InferenceError(
            f"{task.name} expects {task.layer_kind.name} segments, got {segment.kind.name}"
        )
    values = resize_values(segment.values.astype(np.float32), input_len)
    rec = segment.context
    if task.head == "classification":
        value = rec[TASK_FIELD[task.name]]
        if value not in task.label_set:
            raise ValueError(f"{task.name}: label {value!r} outside {task.label_set}")
        return TaskSample(values, label_index=task.label_set.index(value), context=rec)
    if task.regression_mode == "indirect":
        target = math.log(rec["overhead"])
    else:
        target = math.log2(rec[TASK_FIELD[task.name]])
    return TaskSample(values, target=float(target), context=rec)


def build_task_dataset(
    corpus, task: HyperTask, channels: Sequence[str], input_len: int = 1024,
    max_samples: Optional[int] = None, seed: int = 0,
) -> list[TaskSample]:
    """corpus: iterable of (trace, annotation). Ground-truth segments only."""
    out = []
    for trace, annotation in corpus:
        for seg in segments_from_annotation(trace, annotation, channels):
            if seg.kind == task.layer_kind:
                out.append(task_sample_from_segment(task, seg, input_len))
    if max_samples is not None and len(out) > max_samples:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(out), size=max_samples, replace=False)
        out = [out[i] for i in sorted(idx)]
    return out


# ---------------------------------------------------------------------------
# Training (same recipe as the segmentation model)
# ---------------------------------------------------------------------------

def train_task(
    task: HyperTask,
    samples: list[TaskSample],
    config: HyperNetConfig,
    epochs: int = 100,
    batch_size: int = 32,
    lr: float = 0.01,
    momentum: float = 0.9,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[HyperNet, dict]:
    if not samples:
        raise ValueError(f"no training samples for task {task.name}")
    torch.manual_seed(seed)
    model = HyperNet(config, task)

    x = torch.from_numpy(np.stack([s.values for s in samples]))
    if task.head == "classification":
        y = torch.tensor([s.label_index for s in samples], dtype=torch.long)
    else:
        raw = torch.tensor([s.target for s in samples], dtype=torch.float32)
        mean, std = raw.mean(), raw.std().clamp(min=1e-6)
        model.target_mean[0] = mean
        model.target_std[0] = std
        y = (raw - mean) / std

    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
    history: dict = {"loss": []}
    n = len(samples)
    for epoch in range(epochs):
        order = np.random.default_rng((seed, epoch)).permutation(n)
        model.train()
        tot, n_batches = 0.0, 0
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            out = model(x[idx])
            if task.head == "classification":
                loss = F.cross_entropy(out, y[idx])
            else:
                loss = F.mse_loss(out.squeeze(-1), y[idx])
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            optimizer.step()
            tot += float(loss.detach())
            n_batches += 1
        scheduler.step()
        history["loss"].append(tot / n_batches)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"{task.name} epoch {epoch + 1}/{epochs} loss {history['loss'][-1]:.4f}")
    model.eval()
    return model, history


def save_checkpoint(model: HyperNet, path, meta: dict) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "hypernet",
            "task": dataclasses.asdict(model.task),
            "config": dataclasses.asdict(model.config),
            "state_dict": model.state_dict(),
            "meta": meta,
        },
        path,
    )


def load_checkpoint(path) -> tuple[HyperNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "hypernet":
        raise ValueError(f"{path}: not a compatible hypernet checkpoint")
    task_doc = payload["task"]
    task = HyperTask(
        name=task_doc["name"],
        layer_kind=LayerKind(task_doc["layer_kind"]),
        head=task_doc["head"],
        label_set=tuple(task_doc["label_set"]),
        regression_mode=task_doc.get("regression_mode", "indirect"),
    )
    cfg_doc = payload["config"]
    config = HyperNetConfig(
        channels=tuple(cfg_doc["channels"]),
        encoder_widths=tuple(cfg_doc["encoder_widths"]),
        input_len=cfg_doc["input_len"],
    )
    model = HyperNet(config, task)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["meta"]


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _model_output(model: HyperNet, segment: Segment):
    if segment.kind != model.task.layer_kind:
        raise InferenceError(
            f"{model.task.name} expects {model.task.layer_kind.name} segments, "
            f"got {segment.kind.name}"
        )
    values = resize_values(segment.values.astype(np.float32), model.config.input_len)
    with torch.no_grad():
        return model(torch.from_numpy(values).unsqueeze(0))[0]


def infer_classification(model: HyperNet, segment: Segment):
    """Argmax label from the task's closed label set, plus the softmax vector."""
    if model.task.head != "classification":
        raise InferenceError(f"{model.task.name} is not a classification task")
    out = _model_output(model, segment)
    conf = F.softmax(out, dim=0).numpy()
    return model.task.label_set[int(conf.argmax())], conf


def infer_log_overhead(model: HyperNet, segment: Segment) -> float:
    """Regressed natural-log compute overhead of a Conv/Linear segment."""
    if model.task.head != "regression":
        raise InferenceError(f"{model.task.name} is not a regression task")
    out = _model_output(model, segment)
    return float(out.squeeze() * model.target_std[0] + model.target_mean[0])


def snap_pow2(value: float, min_exp: int = MIN_POW2_EXP) -> int:
    """Nearest power of two (exponent round-half-up), clamped to >= 2^min_exp."""
    if value <= 0:
        raise InferenceError(f"cannot snap non-positive value {value}")
    exp = math.floor(math.log2(value) + 0.5)
    return 1 << max(exp, min_exp)


def cout_from_overhead(overhead: float, context: dict) -> int:
    """Solve conv kernel count from overhead and known shape context.

    context needs c_in, k, s, h_in, w_in, bs; padding is derived from k and
    the output shape from the conv shape rule.
    """
    k, s = context["k"], context["s"]
    p = conv_padding_for(k)
    probe = LayerSpec(LayerKind.CONV, ConvParams(context["c_in"], 16, k, s, p))
    h_out, w_out = derive_output_shape(probe, (context["h_in"], context["w_in"]))
    denom = context["c_in"] * k * k * h_out * w_out * context["bs"]
    estimate = overhead / denom
    if estimate <= 0:
        raise InferenceError(f"non-positive kernel-count estimate {estimate}")
    return snap_pow2(estimate)


def fout_from_overhead(
    overhead: float, f_in: int, bs: int,
    is_last_layer: bool = False, class_count: int = 1000,
) -> int:
    """Solve linear output width from overhead; last layers snap to the class count."""
    estimate = overhead / (f_in * bs)
    if estimate <= 0:
        raise InferenceError(f"non-positive feature-size estimate {estimate}")
    if is_last_layer:
        return class_count
    return snap_pow2(estimate)


def infer_cout(model: HyperNet, segment: Segment, context: dict) -> int:
    """Kernel count via indirect (overhead) or direct regression."""
    if model.task.name != "conv_cout":
        raise InferenceError("model is not a conv_cout regressor")
    if model.task.regression_mode == "direct":
        log2_value = infer_log_overhead(model, segment)
        return snap_pow2(2.0 ** log2_value)
    return cout_from_overhead(math.exp(infer_log_overhead(model, segment)), context)


def infer_fout(model: HyperNet, segment: Segment, context: dict) -> int:
    """Linear output width; snaps to the class count for the final layer."""
    if model.task.name != "linear_fout":
        raise InferenceError("model is not a linear_fout regressor")
    if model.task.regression_mode == "direct":
        log2_value = infer_log_overhead(model, segment)
        if context.get("is_last_layer"):
            return context.get("class_count", 1000)
        return snap_pow2(2.0 ** log2_value)
    return fout_from_overhead(
        math.exp(infer_log_overhead(model, segment)),
        f_in=context["f_in"],
        bs=context["bs"],
        is_last_layer=context.get("is_last_layer", False),
        class_count=context.get("class_count", 1000),
    )
