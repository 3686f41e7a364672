"""Architecture specifications and the shape/overhead algebra.

An :class:`ArchSpec` is an ordered list of layers (with per-layer
hyperparameters) plus skip edges wiring Add layers. It is both the ground
truth used to synthesize traces and the output of the end-to-end attack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Union

DEFAULT_CLASS_COUNT = 1000

# Reserved per-sample label for samples that belong to no layer.
BACKGROUND = -1


class LayerKind(IntEnum):
    """The 7 layer types recovered from a trace."""

    CONV = 0
    BATCHNORM = 1
    RELU = 2
    MAXPOOL = 3
    AVGPOOL = 4
    LINEAR = 5
    ADD = 6


KIND_NAMES = {
    LayerKind.CONV: "conv",
    LayerKind.BATCHNORM: "batchnorm",
    LayerKind.RELU: "relu",
    LayerKind.MAXPOOL: "maxpool",
    LayerKind.AVGPOOL: "avgpool",
    LayerKind.LINEAR: "linear",
    LayerKind.ADD: "add",
}
KINDS_BY_NAME = {v: k for k, v in KIND_NAMES.items()}

CONV_K_CHOICES = (1, 3, 5, 7)
CONV_S_CHOICES = (1, 2)
MP_K_CHOICES = (2, 3)
MP_S_CHOICES = (1, 2)
MP_P_CHOICES = (0, 1)
MIN_POW2_EXP = 4  # widths are 2^n with n >= 4


class InvalidArchitectureError(ValueError):
    """A layer/shape combination that cannot occur in a valid network."""


@dataclass(frozen=True)
class ConvParams:
    c_in: int
    c_out: int
    k: int
    s: int
    p: int
    d: int = 1
    g: int = 1


@dataclass(frozen=True)
class MaxPoolParams:
    k: int
    s: int
    p: int
    d: int = 1


@dataclass(frozen=True)
class LinearParams:
    f_in: int
    f_out: int


LayerParams = Union[ConvParams, MaxPoolParams, LinearParams, None]


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    params: LayerParams = None


@dataclass(frozen=True)
class InputShape:
    """Query shape known to the attacker: batch size and image dims."""

    bs: int
    c: int
    h: int
    w: int


@dataclass
class ArchSpec:
    """Ordered layer list with skip (Add) topology.

    ``skip_edges`` holds ``(source index, add index)`` pairs: the Add layer at
    ``add index`` sums the output of layer ``source index`` with the output of
    its sequential predecessor.
    """

    layers: list[LayerSpec]
    skip_edges: list[tuple[int, int]] = field(default_factory=list)
    family: str = "random"

    def kinds(self) -> list[LayerKind]:
        return [layer.kind for layer in self.layers]

    def depth(self) -> int:
        """Number of Conv plus Linear layers (the usual depth convention)."""
        return sum(1 for l in self.layers if l.kind in (LayerKind.CONV, LayerKind.LINEAR))

    def skip_source_for(self, add_index: int) -> Optional[int]:
        for src, tgt in self.skip_edges:
            if tgt == add_index:
                return src
        return None


def is_pow2(value: int, min_exp: int = MIN_POW2_EXP) -> bool:
    return value >= (1 << min_exp) and (value & (value - 1)) == 0


def conv_padding_for(k: int, d: int = 1) -> int:
    """Default convolution padding: floor((k - 1) / 2) * d."""
    return ((k - 1) // 2) * d


def derive_output_shape(layer: LayerSpec, in_shape: tuple[int, int]) -> tuple[int, int]:
    """Spatial output shape of a Conv or MaxPool layer.

    Both dims follow ``floor((n + 2p - d*(k-1) - 1) / s) + 1``.
    """
    if layer.kind not in (LayerKind.CONV, LayerKind.MAXPOOL):
        raise InvalidArchitectureError(f"no spatial shape rule for {layer.kind.name}")
    h, w = in_shape
    if h <= 0 or w <= 0:
        raise InvalidArchitectureError(f"non-positive input shape {in_shape}")
    p, d, k, s = layer.params.p, layer.params.d, layer.params.k, layer.params.s
    h_out = (h + 2 * p - d * (k - 1) - 1) // s + 1
    w_out = (w + 2 * p - d * (k - 1) - 1) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise InvalidArchitectureError(
            f"{layer.kind.name} k={k} s={s} p={p} on {in_shape} gives non-positive output"
        )
    return h_out, w_out


def conv_overhead(params: ConvParams, out_shape: tuple[int, int], bs: int) -> int:
    """Multiply count of a convolution: (c_in*k*k) * (c_out*h_out*w_out) * bs."""
    h_out, w_out = out_shape
    if min(params.c_in, params.c_out, params.k, h_out, w_out, bs) <= 0:
        raise InvalidArchitectureError("conv_overhead requires positive arguments")
    return (params.c_in * params.k * params.k) * (params.c_out * h_out * w_out) * bs


def linear_overhead(params: LinearParams, bs: int) -> int:
    """Multiply count of a linear layer: f_in * f_out * bs."""
    if min(params.f_in, params.f_out, bs) <= 0:
        raise InvalidArchitectureError("linear_overhead requires positive arguments")
    return params.f_in * params.f_out * bs


@dataclass(frozen=True)
class LayerShapeInfo:
    """Per-layer record from propagating an input shape through a spec.

    ``out_channels``/``out_h``/``out_w`` are None once the tensor is flat;
    ``out_features`` is None while it is spatial. ``overhead`` is the multiply
    count for Conv/Linear/MaxPool and the element count for pointwise kinds.
    """

    kind: LayerKind
    out_channels: Optional[int]
    out_h: Optional[int]
    out_w: Optional[int]
    out_features: Optional[int]
    overhead: int


def propagate_shapes(spec: ArchSpec, input_shape: InputShape) -> list[LayerShapeInfo]:
    """Walk the layer list, deriving every output shape and overhead.

    Raises InvalidArchitectureError on any chaining or shape violation, so it
    doubles as the strict checker behind :func:`validate`.
    """
    bs = input_shape.bs
    # current tensor: spatial (c, h, w) or flat (f,)
    c, h, w = input_shape.c, input_shape.h, input_shape.w
    feats: Optional[int] = None
    infos: list[LayerShapeInfo] = []

    def spatial_required(kind: LayerKind):
        if feats is not None:
            raise InvalidArchitectureError(f"{kind.name} after flatten")

    for idx, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == LayerKind.CONV:
            spatial_required(kind)
            params: ConvParams = layer.params
            if params.c_in != c:
                raise InvalidArchitectureError(
                    f"layer {idx}: conv c_in={params.c_in} but incoming channels={c}"
                )
            h, w = derive_output_shape(layer, (h, w))
            c = params.c_out
            ovh = conv_overhead(params, (h, w), bs)
        elif kind == LayerKind.MAXPOOL:
            spatial_required(kind)
            params = layer.params
            h, w = derive_output_shape(layer, (h, w))
            ovh = params.k * params.k * c * h * w * bs
        elif kind == LayerKind.AVGPOOL:
            spatial_required(kind)
            ovh = c * h * w * bs
            h = w = 1
        elif kind == LayerKind.LINEAR:
            params = layer.params
            incoming = feats if feats is not None else c * h * w
            if params.f_in != incoming:
                raise InvalidArchitectureError(
                    f"layer {idx}: linear f_in={params.f_in} but incoming features={incoming}"
                )
            ovh = linear_overhead(params, bs)
            feats = params.f_out
        elif kind == LayerKind.ADD:
            src = spec.skip_source_for(idx)
            if src is None:
                raise InvalidArchitectureError(f"layer {idx}: Add without a skip edge")
            if not (0 <= src < idx - 1):
                raise InvalidArchitectureError(f"layer {idx}: bad skip source {src}")
            src_info = infos[src]
            cur = (
                (feats,)
                if feats is not None
                else (c, h, w)
            )
            other = (
                (src_info.out_features,)
                if src_info.out_features is not None
                else (src_info.out_channels, src_info.out_h, src_info.out_w)
            )
            if cur != other:
                raise InvalidArchitectureError(
                    f"layer {idx}: Add shapes differ {cur} vs {other}"
                )
            ovh = bs
            for dim in cur:
                ovh *= dim
        else:  # BATCHNORM / RELU: pointwise passthrough
            if feats is not None:
                ovh = feats * bs
            else:
                ovh = c * h * w * bs
        infos.append(
            LayerShapeInfo(
                kind=kind,
                out_channels=None if feats is not None else c,
                out_h=None if feats is not None else h,
                out_w=None if feats is not None else w,
                out_features=feats,
                overhead=ovh,
            )
        )
    return infos


def validate(
    spec: ArchSpec,
    input_shape: Optional[InputShape] = None,
    class_count: Optional[int] = DEFAULT_CLASS_COUNT,
) -> list[str]:
    """Collect every invariant violation in a spec (empty list == valid).

    Structural rules are always checked; shape chaining additionally when an
    input shape is supplied. ``class_count`` is the allowed final-linear
    width besides powers of two; pass None to skip that check.
    """
    violations: list[str] = []
    layers = spec.layers
    if not layers:
        violations.append("empty layer list")
        return violations

    for idx, layer in enumerate(layers):
        kind, params = layer.kind, layer.params
        where = f"layer {idx} ({KIND_NAMES[kind]})"
        if idx > 0 and layers[idx - 1].kind == kind:
            violations.append(f"{where}: consecutive identical layer kinds")
        if kind == LayerKind.CONV:
            if not isinstance(params, ConvParams):
                violations.append(f"{where}: missing conv params")
                continue
            if params.k not in CONV_K_CHOICES:
                violations.append(f"{where}: k={params.k} not in {CONV_K_CHOICES}")
            if params.s not in CONV_S_CHOICES:
                violations.append(f"{where}: s={params.s} not in {CONV_S_CHOICES}")
            if params.d != 1 or params.g != 1:
                violations.append(f"{where}: dilation/groups must be 1")
            if params.p != conv_padding_for(params.k, params.d):
                violations.append(f"{where}: p={params.p} != floor((k-1)/2)*d")
            if not is_pow2(params.c_out):
                violations.append(f"{where}: c_out={params.c_out} not a power of two >= 16")
        elif kind == LayerKind.MAXPOOL:
            if not isinstance(params, MaxPoolParams):
                violations.append(f"{where}: missing maxpool params")
                continue
            if params.k not in MP_K_CHOICES:
                violations.append(f"{where}: k={params.k} not in {MP_K_CHOICES}")
            if params.s not in MP_S_CHOICES:
                violations.append(f"{where}: s={params.s} not in {MP_S_CHOICES}")
            if params.p not in MP_P_CHOICES:
                violations.append(f"{where}: p={params.p} not in {MP_P_CHOICES}")
            if params.d != 1:
                violations.append(f"{where}: dilation must be 1")
        elif kind == LayerKind.LINEAR:
            if not isinstance(params, LinearParams):
                violations.append(f"{where}: missing linear params")
                continue
            ok = is_pow2(params.f_out) or (class_count is not None and params.f_out == class_count)
            if class_count is None:
                ok = ok or params.f_out > 0
            if not ok:
                violations.append(
                    f"{where}: f_out={params.f_out} neither a power of two >= 16 "
                    f"nor the class count"
                )
        elif kind == LayerKind.ADD:
            if spec.skip_source_for(idx) is None:
                violations.append(f"{where}: no skip edge targets this Add")

    add_targets = [tgt for _, tgt in spec.skip_edges]
    if len(add_targets) != len(set(add_targets)):
        violations.append("multiple skip edges target the same Add")
    for src, tgt in spec.skip_edges:
        if not (0 <= tgt < len(layers)) or layers[tgt].kind != LayerKind.ADD:
            violations.append(f"skip edge ({src}, {tgt}): target is not an Add layer")
        elif not (0 <= src < tgt - 1):
            violations.append(f"skip edge ({src}, {tgt}): source must precede target - 1")

    if input_shape is not None and not violations:
        try:
            propagate_shapes(spec, input_shape)
        except InvalidArchitectureError as exc:
            violations.append(str(exc))
    return violations


def rebind_linear_inputs(spec: ArchSpec, input_shape: InputShape) -> ArchSpec:
    """Recompute every linear f_in for a new input size.

    The layer sequence and all other hyperparameters are size-independent;
    only flatten-derived feature sizes change when the same architecture is
    queried at a different image size.
    """
    c, h, w = input_shape.c, input_shape.h, input_shape.w
    feats: Optional[int] = None
    layers: list[LayerSpec] = []
    for layer in spec.layers:
        kind = layer.kind
        if kind == LayerKind.CONV:
            h, w = derive_output_shape(layer, (h, w))
            c = layer.params.c_out
        elif kind == LayerKind.MAXPOOL:
            h, w = derive_output_shape(layer, (h, w))
        elif kind == LayerKind.AVGPOOL:
            h = w = 1
        elif kind == LayerKind.LINEAR:
            incoming = feats if feats is not None else c * h * w
            layer = LayerSpec(kind, LinearParams(incoming, layer.params.f_out))
            feats = layer.params.f_out
        layers.append(layer)
    return ArchSpec(layers=layers, skip_edges=list(spec.skip_edges), family=spec.family)


# ---------------------------------------------------------------------------
# Serialization (versioned JSON; field names match the hyperparameter table)
# ---------------------------------------------------------------------------

ARCHSPEC_FORMAT_VERSION = 1


def _layer_to_dict(layer: LayerSpec) -> dict:
    rec = {"kind": KIND_NAMES[layer.kind]}
    if isinstance(layer.params, ConvParams):
        rec.update(
            c_in=layer.params.c_in, c_out=layer.params.c_out, k=layer.params.k,
            s=layer.params.s, p=layer.params.p, d=layer.params.d, g=layer.params.g,
        )
    elif isinstance(layer.params, MaxPoolParams):
        rec.update(k=layer.params.k, s=layer.params.s, p=layer.params.p, d=layer.params.d)
    elif isinstance(layer.params, LinearParams):
        rec.update(f_in=layer.params.f_in, f_out=layer.params.f_out)
    return rec


def _layer_from_dict(rec: dict) -> LayerSpec:
    kind = KINDS_BY_NAME[rec["kind"]]
    if kind == LayerKind.CONV:
        params = ConvParams(
            c_in=rec["c_in"], c_out=rec["c_out"], k=rec["k"], s=rec["s"],
            p=rec["p"], d=rec.get("d", 1), g=rec.get("g", 1),
        )
    elif kind == LayerKind.MAXPOOL:
        params = MaxPoolParams(k=rec["k"], s=rec["s"], p=rec["p"], d=rec.get("d", 1))
    elif kind == LayerKind.LINEAR:
        params = LinearParams(f_in=rec["f_in"], f_out=rec["f_out"])
    else:
        params = None
    return LayerSpec(kind, params)


def to_dict(spec: ArchSpec) -> dict:
    return {
        "version": ARCHSPEC_FORMAT_VERSION,
        "family": spec.family,
        "layers": [_layer_to_dict(l) for l in spec.layers],
        "skip_edges": [list(edge) for edge in spec.skip_edges],
    }


def from_dict(doc: dict) -> ArchSpec:
    if doc.get("version") != ARCHSPEC_FORMAT_VERSION:
        raise ValueError(f"unsupported archspec version {doc.get('version')!r}")
    return ArchSpec(
        layers=[_layer_from_dict(rec) for rec in doc["layers"]],
        skip_edges=[tuple(edge) for edge in doc["skip_edges"]],
        family=doc.get("family", "random"),
    )


def save_json(spec: ArchSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(spec), fh, indent=1)


def load_json(path) -> ArchSpec:
    with open(path) as fh:
        return from_dict(json.load(fh))
