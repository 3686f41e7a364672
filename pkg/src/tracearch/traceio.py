"""Canonical trace/annotation file formats and preprocessing transforms.

A trace file is a 4-byte magic ``SCT1``, a little-endian uint32 header
length, a UTF-8 JSON header, then the samples as little-endian float32,
channel-major. The header carries ``version``, ``sample_rate_hz``,
``channels``, ``length`` and a free-form ``meta`` record (architecture id,
input shape, collector info). Annotations live in a ``<file>.ann.json``
sidecar: run-length encoded per-sample labels, an n x 2 inclusive position
matrix, and per-layer hyperparameter records. The same byte layout is
written by the energy collector, so both sides of the toolchain read one
format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .archspec import BACKGROUND, KIND_NAMES, KINDS_BY_NAME, LayerKind

TRACE_MAGIC = b"SCT1"
TRACE_FORMAT_VERSION = 1
ANNOTATION_SUFFIX = ".ann.json"


class TraceFormatError(ValueError):
    """Malformed, inconsistent, or wrong-version trace/annotation file."""


@dataclass
class Trace:
    """A c-channel, length-l time series at a fixed sample rate."""

    channels: list[str]
    sample_rate_hz: float
    samples: np.ndarray  # (c, l) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise TraceFormatError("samples must be a (channels, length) matrix")
        if len(self.channels) != self.samples.shape[0]:
            raise TraceFormatError(
                f"{len(self.channels)} channel names for {self.samples.shape[0]} rows"
            )
        if self.sample_rate_hz <= 0:
            raise TraceFormatError("sample_rate_hz must be positive")
        if not np.isfinite(self.samples).all():
            raise TraceFormatError("samples must be finite")

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.samples[self.channels.index(name)]

    def select_channels(self, names: list[str]) -> "Trace":
        idx = [self.channels.index(n) for n in names]
        return Trace(list(names), self.sample_rate_hz, self.samples[idx].copy(), dict(self.meta))


@dataclass
class Annotation:
    """Per-sample layer labels plus the per-layer position matrix.

    ``labels`` has one entry per sample (LayerKind value, or BACKGROUND for
    samples outside every layer). ``positions[m] = (start, end)`` is
    inclusive. ``layer_params[m]`` is a dict with at least ``kind``.
    """

    labels: np.ndarray  # (l,) int
    positions: np.ndarray  # (n, 2) int
    layer_params: list[dict]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)

    @property
    def n_layers(self) -> int:
        return self.positions.shape[0]

    def kind_sequence(self) -> list[LayerKind]:
        return [LayerKind(self.labels[int(s)]) for s, _ in self.positions]

    def validate(self, length: Optional[int] = None) -> list[str]:
        problems = []
        if length is not None and self.labels.shape[0] != length:
            problems.append(f"labels length {self.labels.shape[0]} != trace length {length}")
        l = self.labels.shape[0]
        if len(self.layer_params) != self.n_layers:
            problems.append("layer_params not aligned with positions")
        prev_end = -1
        prev_kind = None
        for m, (start, end) in enumerate(self.positions):
            if not (0 <= start <= end < l):
                problems.append(f"row {m}: span ({start}, {end}) outside [0, {l})")
                continue
            if start <= prev_end:
                problems.append(f"row {m}: overlaps or is unsorted")
            span = self.labels[start : end + 1]
            kind = span[0]
            if kind == BACKGROUND or not (span == kind).all():
                problems.append(f"row {m}: labels disagree inside span")
            elif prev_kind is not None and prev_end == start - 1 and kind == prev_kind:
                problems.append(f"row {m}: same kind as adjacent previous layer")
            if m < len(self.layer_params):
                declared = self.layer_params[m].get("kind")
                if declared is not None and KINDS_BY_NAME.get(declared) != kind:
                    problems.append(f"row {m}: layer_params kind {declared!r} disagrees")
            prev_end = end
            prev_kind = kind
        covered = np.zeros(l, dtype=bool)
        for start, end in self.positions:
            if 0 <= start <= end < l:
                covered[start : end + 1] = True
        if (self.labels[~covered] != BACKGROUND).any():
            problems.append("labeled samples outside every position row")
        return problems


def labels_from_positions(positions, kinds, length: int) -> np.ndarray:
    labels = np.full(length, BACKGROUND, dtype=np.int64)
    for (start, end), kind in zip(positions, kinds):
        labels[start : end + 1] = int(kind)
    return labels


@dataclass
class Segment:
    """A contiguous slice of a trace attributed to one layer."""

    values: np.ndarray  # (c, w)
    kind: LayerKind
    context: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def annotation_path(path) -> Path:
    return Path(str(path) + ANNOTATION_SUFFIX)


def _labels_to_rle(labels: np.ndarray) -> list:
    rle = []
    for value in labels:
        name = None if value == BACKGROUND else KIND_NAMES[LayerKind(value)]
        if rle and rle[-1][0] == name:
            rle[-1][1] += 1
        else:
            rle.append([name, 1])
    return rle


def _labels_from_rle(rle: list, length: int) -> np.ndarray:
    labels = np.empty(length, dtype=np.int64)
    pos = 0
    for name, count in rle:
        if pos + count > length:
            raise TraceFormatError("label run-length data exceeds declared length")
        labels[pos : pos + count] = BACKGROUND if name is None else int(KINDS_BY_NAME[name])
        pos += count
    if pos != length:
        raise TraceFormatError(f"label run-length data covers {pos} of {length} samples")
    return labels


def write_trace(trace: Trace, path, annotation: Optional[Annotation] = None) -> None:
    """Write a trace (and optional annotation sidecar); lossless round trip."""
    path = Path(path)
    header = {
        "version": TRACE_FORMAT_VERSION,
        "sample_rate_hz": float(trace.sample_rate_hz),
        "channels": list(trace.channels),
        "length": int(trace.length),
        "dtype": "<f4",
        "layout": "channel-major",
        "meta": trace.meta,
    }
    blob = json.dumps(header).encode("utf-8")
    payload = np.ascontiguousarray(trace.samples, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)

    if annotation is not None:
        problems = annotation.validate(trace.length)
        if problems:
            raise TraceFormatError(f"refusing to write invalid annotation: {problems[:3]}")
        doc = {
            "version": TRACE_FORMAT_VERSION,
            "length": int(trace.length),
            "labels_rle": _labels_to_rle(annotation.labels),
            "positions": annotation.positions.tolist(),
            "layers": annotation.layer_params,
        }
        with open(annotation_path(path), "w") as fh:
            json.dump(doc, fh)


def read_trace(path) -> tuple[Trace, Optional[Annotation]]:
    """Read a trace file plus its annotation sidecar when present.

    Invalid files are rejected with TraceFormatError, never repaired.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TRACE_MAGIC:
            raise TraceFormatError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TraceFormatError(f"{path}: unreadable header: {exc}")
        if header.get("version") != TRACE_FORMAT_VERSION:
            raise TraceFormatError(f"{path}: unsupported version {header.get('version')!r}")
        channels = header.get("channels") or []
        length = header.get("length")
        if not channels or not isinstance(length, int) or length < 0:
            raise TraceFormatError(f"{path}: bad channels/length in header")
        payload = fh.read()
    expected = 4 * len(channels) * length
    if len(payload) != expected:
        raise TraceFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} "
            f"({len(channels)} channels x {length})"
        )
    samples = np.frombuffer(payload, dtype="<f4").reshape(len(channels), length)
    try:
        trace = Trace(
            channels=list(channels),
            sample_rate_hz=header.get("sample_rate_hz", 0),
            samples=samples.copy(),
            meta=header.get("meta", {}),
        )
    except TraceFormatError as exc:
        raise TraceFormatError(f"{path}: {exc}")

    ann_file = annotation_path(path)
    annotation = None
    if ann_file.exists():
        with open(ann_file) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{ann_file}: unreadable: {exc}")
        if doc.get("version") != TRACE_FORMAT_VERSION:
            raise TraceFormatError(f"{ann_file}: unsupported version")
        if doc.get("length") != trace.length:
            raise TraceFormatError(f"{ann_file}: length disagrees with trace")
        annotation = Annotation(
            labels=_labels_from_rle(doc["labels_rle"], trace.length),
            positions=np.asarray(doc["positions"], dtype=np.int64).reshape(-1, 2),
            layer_params=doc["layers"],
        )
        problems = annotation.validate(trace.length)
        if problems:
            raise TraceFormatError(f"{ann_file}: invalid annotation: {problems[:3]}")
    return trace, annotation


# ---------------------------------------------------------------------------
# Preprocessing transforms
# ---------------------------------------------------------------------------

def pad_to_multiple(trace: Trace, factor: int = 16) -> Trace:
    """Pad to the least multiple of `factor`, repeating each channel's mean.

    After z-score normalization the channel mean is 0, so normalize-then-pad
    fills with exact zeros.
    """
    l = trace.length
    target = ((l + factor - 1) // factor) * factor
    if target == l:
        return trace
    fill = trace.samples.mean(axis=1, keepdims=True) if l else np.zeros((len(trace.channels), 1))
    pad = np.repeat(fill.astype(np.float32), target - l, axis=1)
    return Trace(
        channels=list(trace.channels),
        sample_rate_hz=trace.sample_rate_hz,
        samples=np.concatenate([trace.samples, pad], axis=1),
        meta=dict(trace.meta),
    )


def resize_values(values: np.ndarray, target_len: int = 1024) -> np.ndarray:
    """Linear-interpolation resize along time, per channel."""
    values = np.asarray(values)
    c, w = values.shape
    if w < 1:
        raise ValueError("cannot resize an empty segment")
    if w == 1:
        return np.repeat(values, target_len, axis=1).astype(values.dtype)
    x_new = np.linspace(0.0, w - 1.0, target_len)
    x_old = np.arange(w, dtype=np.float64)
    out = np.stack([np.interp(x_new, x_old, row) for row in values])
    return out.astype(values.dtype)


def resize_segment(segment: Segment, target_len: int = 1024) -> Segment:
    return Segment(
        values=resize_values(segment.values, target_len),
        kind=segment.kind,
        context=dict(segment.context),
    )


def normalize(obj: Union[Trace, Segment, np.ndarray]):
    """Per-channel z-score; constant channels fall back to all zeros."""
    if isinstance(obj, Trace):
        return Trace(list(obj.channels), obj.sample_rate_hz, normalize(obj.samples), dict(obj.meta))
    if isinstance(obj, Segment):
        return Segment(normalize(obj.values), obj.kind, dict(obj.context))
    values = np.asarray(obj, dtype=np.float64)
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    std = np.where(std < 1e-12, 1.0, std)
    return ((values - mean) / std).astype(np.float32)
