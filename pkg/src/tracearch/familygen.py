"""Randomized generators for VGG-, ResNet-, and free-form model families.

Depth counts Conv plus Linear layers, the usual naming convention (a
"152-layer" net has 152 such layers; BN/ReLU/pool/Add entries come on top).
Every generator is a pure function of its seed and ends with a class-count
linear head.
"""

from __future__ import annotations

import random

from .archspec import (
    DEFAULT_CLASS_COUNT,
    ArchSpec,
    ConvParams,
    InputShape,
    InvalidArchitectureError,
    LayerKind,
    LayerSpec,
    LinearParams,
    MaxPoolParams,
    conv_padding_for,
    validate,
)

FAMILIES = ("vgg", "resnet", "random")

MIN_DEPTH = 2
MAX_DEPTH = 152


class GenerationError(RuntimeError):
    """Requested family/depth/shape combination cannot be generated."""


def _conv(c_in, c_out, k, s=1) -> LayerSpec:
    return LayerSpec(LayerKind.CONV, ConvParams(c_in, c_out, k, s, conv_padding_for(k)))


def _split_into(rng: random.Random, total: int, parts: int) -> list[int]:
    """Random composition of `total` into `parts` summands, each >= 1."""
    if parts <= 0 or total < parts:
        raise GenerationError(f"cannot split {total} into {parts} parts")
    cuts = sorted(rng.sample(range(1, total), parts - 1)) if parts > 1 else []
    bounds = [0] + cuts + [total]
    return [bounds[i + 1] - bounds[i] for i in range(parts)]


def _pow2_near(rng: random.Random, lo_exp: int, hi_exp: int) -> int:
    return 1 << rng.randint(lo_exp, hi_exp)


# ---------------------------------------------------------------------------
# VGG-style: conv/ReLU stages with halving max-pools, then a linear stack
# ---------------------------------------------------------------------------

def _gen_vgg(rng: random.Random, depth: int, input_shape: InputShape, class_count: int) -> ArchSpec:
    n_lin = min(rng.randint(1, 3), depth - 1)
    n_conv = depth - n_lin
    if n_conv < 1:
        raise GenerationError(f"vgg depth {depth} leaves no conv layers")

    max_stages = min(5, n_conv, max(1, (min(input_shape.h, input_shape.w) // 8).bit_length()))
    n_stages = rng.randint(1, max_stages)
    stage_convs = _split_into(rng, n_conv, n_stages)
    use_bn = rng.random() < 0.5

    layers: list[LayerSpec] = []
    c = input_shape.c
    width = rng.choice([32, 64])
    for stage, count in enumerate(stage_convs):
        for _ in range(count):
            layers.append(_conv(c, width, k=3))
            c = width
            if use_bn:
                layers.append(LayerSpec(LayerKind.BATCHNORM))
            layers.append(LayerSpec(LayerKind.RELU))
        layers.append(LayerSpec(LayerKind.MAXPOOL, MaxPoolParams(k=2, s=2, p=0)))
        width = min(width * 2, 512)
    layers.append(LayerSpec(LayerKind.AVGPOOL))

    f_in = c
    for i in range(n_lin):
        last = i == n_lin - 1
        f_out = class_count if last else _pow2_near(rng, 9, 12)
        layers.append(LayerSpec(LayerKind.LINEAR, LinearParams(f_in, f_out)))
        if not last:
            layers.append(LayerSpec(LayerKind.RELU))
        f_in = f_out
    return ArchSpec(layers=layers, family="vgg")


# ---------------------------------------------------------------------------
# ResNet-style: stem + residual blocks + global pool + linear head.
#
# Blocks keep the channel chain strictly sequential: where torchvision runs a
# projection conv on a parallel branch, these variants run the projection
# first and branch the residual from its output, so every conv's c_in equals
# the previous producer's c_out and Add still sees two equal-shape inputs.
# ---------------------------------------------------------------------------

def _resnet_options(depth: int) -> list[tuple[str, int, int]]:
    """Feasible (block_type, n_stages, n_blocks) triples for an exact depth."""
    options = []
    budget = depth - 2  # minus stem conv and final linear
    for n_stages in range(1, 5):
        rem = budget - (n_stages - 1)  # one strided projection per later stage
        if rem >= 2 * n_stages and rem % 2 == 0:
            options.append(("basic", n_stages, rem // 2))
        rem_b = rem - 1  # stage-1 projection (64 -> 4*width) always needed
        if rem_b >= 3 * n_stages and rem_b % 3 == 0:
            options.append(("bottleneck", n_stages, rem_b // 3))
    return options


def _emit_basic_block(layers, skips, c_in, width, downsample):
    if downsample:
        layers.append(_conv(c_in, width, k=1, s=2))
        layers.append(LayerSpec(LayerKind.BATCHNORM))
    src = len(layers) - 1
    layers.append(_conv(width, width, k=3))
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    layers.append(LayerSpec(LayerKind.RELU))
    layers.append(_conv(width, width, k=3))
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    skips.append((src, len(layers)))
    layers.append(LayerSpec(LayerKind.ADD))
    layers.append(LayerSpec(LayerKind.RELU))
    return width


def _emit_preact_basic_block(layers, skips, c_in, width, downsample):
    """Pre-activation ordering: BN/ReLU precede each conv, Add closes the block."""
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    layers.append(LayerSpec(LayerKind.RELU))
    if downsample:
        layers.append(_conv(c_in, width, k=1, s=2))
        layers.append(LayerSpec(LayerKind.BATCHNORM))
        src = len(layers) - 1
        layers.append(_conv(width, width, k=3))
    else:
        src = len(layers) - 3  # block entry, before the BN
        layers.append(_conv(c_in, width, k=3))
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    layers.append(LayerSpec(LayerKind.RELU))
    layers.append(_conv(width, width, k=3))
    skips.append((src, len(layers)))
    layers.append(LayerSpec(LayerKind.ADD))
    return width


def _emit_bottleneck_block(layers, skips, c_in, width, project, stride):
    c_out = width * 4
    if project:
        layers.append(_conv(c_in, c_out, k=1, s=stride))
        layers.append(LayerSpec(LayerKind.BATCHNORM))
        c_in = c_out
    src = len(layers) - 1
    layers.append(_conv(c_in, width, k=1))
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    layers.append(LayerSpec(LayerKind.RELU))
    layers.append(_conv(width, width, k=3))
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    layers.append(LayerSpec(LayerKind.RELU))
    layers.append(_conv(width, c_out, k=1))
    layers.append(LayerSpec(LayerKind.BATCHNORM))
    skips.append((src, len(layers)))
    layers.append(LayerSpec(LayerKind.ADD))
    layers.append(LayerSpec(LayerKind.RELU))
    return c_out


def _gen_resnet(rng: random.Random, depth: int, input_shape: InputShape, class_count: int) -> ArchSpec:
    options = _resnet_options(depth)
    if not options:
        raise GenerationError(f"no resnet layout reaches depth {depth}")
    block_type, n_stages, n_blocks = rng.choice(options)
    preact = block_type == "basic" and rng.random() < 0.5
    stage_blocks = _split_into(rng, n_blocks, n_stages)
    base = rng.choice([32, 64])
    widths = [min(base * (1 << i), 512) for i in range(n_stages)]

    layers: list[LayerSpec] = [_conv(input_shape.c, base, k=7, s=2)]
    skips: list[tuple[int, int]] = []
    if not preact:
        layers.append(LayerSpec(LayerKind.BATCHNORM))
        layers.append(LayerSpec(LayerKind.RELU))
    layers.append(LayerSpec(LayerKind.MAXPOOL, MaxPoolParams(k=3, s=2, p=1)))

    c = base
    for stage, count in enumerate(stage_blocks):
        width = widths[stage]
        for b in range(count):
            first = b == 0
            if block_type == "basic":
                emit = _emit_preact_basic_block if preact else _emit_basic_block
                if first and stage > 0:
                    c = emit(layers, skips, c, width, downsample=True)
                else:
                    c = emit(layers, skips, c, c, downsample=False)
            else:
                project = first
                stride = 2 if (first and stage > 0) else 1
                c = _emit_bottleneck_block(layers, skips, c, width, project, stride)

    if preact:
        layers.append(LayerSpec(LayerKind.BATCHNORM))
        layers.append(LayerSpec(LayerKind.RELU))
    layers.append(LayerSpec(LayerKind.AVGPOOL))
    layers.append(LayerSpec(LayerKind.LINEAR, LinearParams(c, class_count)))
    return ArchSpec(layers=layers, skip_edges=skips, family="resnet")


# ---------------------------------------------------------------------------
# Free-form nets: either MLPs or conv/act/pool/norm chains
# ---------------------------------------------------------------------------

def _gen_mlp(rng: random.Random, depth: int, input_shape: InputShape, class_count: int) -> ArchSpec:
    layers: list[LayerSpec] = []
    f_in = input_shape.c * input_shape.h * input_shape.w
    for i in range(depth):
        last = i == depth - 1
        f_out = class_count if last else _pow2_near(rng, 4, 12)
        layers.append(LayerSpec(LayerKind.LINEAR, LinearParams(f_in, f_out)))
        if not last:
            layers.append(LayerSpec(LayerKind.RELU))
        f_in = f_out
    return ArchSpec(layers=layers, family="random")


def _gen_random_cnn(rng: random.Random, depth: int, input_shape: InputShape, class_count: int) -> ArchSpec:
    n_lin = min(rng.randint(1, 2), depth - 1)
    n_conv = depth - n_lin
    use_bn = rng.random() < 0.5
    relu_then_bn = use_bn and rng.random() < 0.4  # activation-first ordering

    layers: list[LayerSpec] = []
    c, h = input_shape.c, min(input_shape.h, input_shape.w)
    width = rng.choice([16, 32, 64])
    for i in range(n_conv):
        k = rng.choice([1, 3, 3, 3, 5, 7])
        s = 2 if (h >= 16 and rng.random() < 0.15) else 1
        layers.append(_conv(c, width, k=k, s=s))
        c = width
        h = (h + 2 * conv_padding_for(k) - (k - 1) - 1) // s + 1
        with_bn = use_bn and rng.random() < 0.8
        if with_bn and relu_then_bn:
            layers.append(LayerSpec(LayerKind.RELU))
            layers.append(LayerSpec(LayerKind.BATCHNORM))
        elif with_bn:
            layers.append(LayerSpec(LayerKind.BATCHNORM))
            layers.append(LayerSpec(LayerKind.RELU))
        else:
            layers.append(LayerSpec(LayerKind.RELU))
        if h >= 8 and rng.random() < 0.3:
            k_p = rng.choice([2, 3])
            p_p = rng.choice([0, 1]) if k_p == 3 else 0
            layers.append(LayerSpec(LayerKind.MAXPOOL, MaxPoolParams(k=k_p, s=2, p=p_p)))
            h = (h + 2 * p_p - (k_p - 1) - 1) // 2 + 1
        if i + 1 < n_conv and rng.random() < 0.5:
            width = min(width * 2, 1024)

    if rng.random() < 0.8 or input_shape.h != input_shape.w:
        layers.append(LayerSpec(LayerKind.AVGPOOL))
        f_in = c
    else:
        f_in = c * h * h
    for i in range(n_lin):
        last = i == n_lin - 1
        f_out = class_count if last else _pow2_near(rng, 6, 12)
        layers.append(LayerSpec(LayerKind.LINEAR, LinearParams(f_in, f_out)))
        if not last:
            layers.append(LayerSpec(LayerKind.RELU))
        f_in = f_out
    return ArchSpec(layers=layers, family="random")


def _gen_random(rng: random.Random, depth: int, input_shape: InputShape, class_count: int) -> ArchSpec:
    if depth == 2:
        # shallowest case: one conv, one linear
        width = rng.choice([16, 32, 64])
        k = rng.choice([3, 5, 7])
        h_out = input_shape.h + 2 * conv_padding_for(k) - k + 1
        w_out = input_shape.w + 2 * conv_padding_for(k) - k + 1
        return ArchSpec(
            layers=[
                _conv(input_shape.c, width, k=k),
                LayerSpec(LayerKind.LINEAR, LinearParams(width * h_out * w_out, class_count)),
            ],
            family="random",
        )
    if rng.random() < 0.3:
        return _gen_mlp(rng, depth, input_shape, class_count)
    return _gen_random_cnn(rng, depth, input_shape, class_count)


# ---------------------------------------------------------------------------

def generate_family(
    family: str,
    depth_range: tuple[int, int] | int,
    input_shape: InputShape,
    rng_seed: int,
    class_count: int = DEFAULT_CLASS_COUNT,
) -> ArchSpec:
    """Generate one valid ArchSpec; deterministic in (family, range, seed)."""
    family = family.lower()
    if family not in FAMILIES:
        raise GenerationError(f"unknown family {family!r}")
    lo, hi = (depth_range, depth_range) if isinstance(depth_range, int) else depth_range
    if lo < MIN_DEPTH or hi > MAX_DEPTH or lo > hi:
        raise GenerationError(f"depth range [{lo}, {hi}] outside [{MIN_DEPTH}, {MAX_DEPTH}]")
    rng = random.Random(rng_seed)

    if family == "resnet":
        feasible = [d for d in range(max(lo, 4), hi + 1) if _resnet_options(d)]
        if not feasible:
            raise GenerationError(f"no feasible resnet depth in [{lo}, {hi}]")
        depth = rng.choice(feasible)
        spec = _gen_resnet(rng, depth, input_shape, class_count)
    elif family == "vgg":
        depth = rng.randint(lo, hi)
        spec = _gen_vgg(rng, depth, input_shape, class_count)
    else:
        depth = rng.randint(lo, hi)
        spec = _gen_random(rng, depth, input_shape, class_count)

    try:
        problems = validate(spec, input_shape, class_count)
    except InvalidArchitectureError as exc:  # pragma: no cover - generator bug guard
        raise GenerationError(str(exc))
    if problems:
        raise GenerationError(f"generated spec invalid: {problems[:3]}")
    if spec.depth() != depth:
        raise GenerationError(f"generator produced depth {spec.depth()}, wanted {depth}")
    return spec
