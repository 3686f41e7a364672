"""Trace segmentation: hybrid conv/recurrent network, losses, training.

The network is a 1-D U-Net (4 residual encoder stages with max-pool
downsampling, 4 decoder stages with linear-interpolation upsampling and
encoder skips) whose bottleneck runs through a bidirectional LSTM; the
temporal features are upsampled and concatenated into every decoder. The
output is a per-sample probability over the 7 layer kinds.

Training minimizes a standard per-sample cross-entropy plus a per-layer
term: for every annotated layer span the mean predicted probability of the
true kind is driven to 1 via its negative log. The per-layer term weights a
one-sample layer as much as a thousand-sample one, which is what keeps rare
short layers from being washed out.
"""

from __future__ import annotations

import dataclasses
import hashlib
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archspec import BACKGROUND, LayerKind
from .traceio import Annotation, Trace, normalize

EPS = 1e-12

CHECKPOINT_VERSION = 1


@dataclass
class SegNetConfig:
    channels: tuple = ("pp0", "dram")
    class_count: int = 7
    encoder_widths: tuple = (64, 128, 256, 512)
    temporal_hidden: int = 256
    lambda_up: float = 1.0
    use_temporal: bool = True
    min_run: int = 1

    @property
    def in_channels(self) -> int:
        return len(self.channels)

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.encoder_widths)

    def check(self):
        if len(self.encoder_widths) != 4:
            raise ValueError("exactly 4 encoder stages (downsample factor 16)")
        if self.lambda_up < 0:
            raise ValueError("lambda_up must be >= 0")


@dataclass
class SegmentationMap:
    """Row-stochastic (length x class_count) probability matrix."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        rows = self.probs.sum(axis=1)
        if self.probs.size and not np.allclose(rows, 1.0, atol=1e-5):
            raise ValueError("rows must sum to 1")

    @property
    def length(self) -> int:
        return self.probs.shape[0]

    def argmax_labels(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


class ResBlock1d(nn.Module):
    """Two same-padding k=3 convolutions with an identity/projection shortcut."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm1d(c_out)
        if c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv1d(c_in, c_out, 1), nn.BatchNorm1d(c_out))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SegNet(nn.Module):
    def __init__(self, config: SegNetConfig):
        super().__init__()
        config.check()
        self.config = config
        w = config.encoder_widths
        self.encoders = nn.ModuleList()
        c_prev = config.in_channels
        for width in w:
            self.encoders.append(ResBlock1d(c_prev, width))
            c_prev = width
        self.pool = nn.MaxPool1d(2)

        t_ch = 0
        if config.use_temporal:
            self.temporal = nn.LSTM(
                w[-1], config.temporal_hidden, batch_first=True, bidirectional=True
            )
            t_ch = 2 * config.temporal_hidden
            bott_ch = t_ch
        else:
            self.temporal = None
            bott_ch = w[-1]

        self.decoders = nn.ModuleList()
        dec_out = [w[2], w[1], w[0], w[0]]
        c_prev = bott_ch
        for skip_ch, out_ch in zip([w[3], w[2], w[1], w[0]], dec_out):
            self.decoders.append(ResBlock1d(c_prev + skip_ch + t_ch, out_ch))
            c_prev = out_ch
        self.head = nn.Conv1d(dec_out[-1], config.class_count, 1)

    def forward(self, x):
        """(batch, channels, length) -> logits (batch, class_count, length).

        Length must be a multiple of the downsample factor (16).
        """
        length = x.shape[-1]
        if length % self.config.downsample_factor != 0:
            raise ValueError(
                f"input length {length} not a multiple of {self.config.downsample_factor}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)

        if self.temporal is not None:
            t, _ = self.temporal(x.permute(0, 2, 1))
            t = t.permute(0, 2, 1)
            x = t
        else:
            t = None

        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="linear", align_corners=False)
            parts = [x, skip]
            if t is not None:
                parts.append(
                    F.interpolate(t, size=x.shape[-1], mode="linear", align_corners=False)
                )
            x = dec(torch.cat(parts, dim=1))
        return self.head(x)

    @torch.no_grad()
    def segment(self, trace: Trace) -> SegmentationMap:
        """Per-sample class probabilities for one normalized, padded trace."""
        was_training = self.training
        self.eval()
        x = torch.from_numpy(np.asarray(trace.samples, dtype=np.float32)).unsqueeze(0)
        logits = self.forward(x)
        probs = F.softmax(logits, dim=1)[0].T.cpu().numpy()
        if was_training:
            self.train()
        return SegmentationMap(probs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _onehot(labels, class_count):
    labels = _as_tensor(labels)
    if labels.ndim == 1:
        return F.one_hot(labels.long(), class_count).to(torch.float64)
    return labels


def ce_loss(probs, labels):
    """Cross-entropy against one-hot labels, summed over samples."""
    probs_t = _as_tensor(probs)
    y = _onehot(labels, probs_t.shape[-1])
    out = -(y * torch.log(torch.clamp(probs_t, min=EPS))).sum()
    return out if isinstance(probs, torch.Tensor) else float(out)


def up_loss(probs, positions, labels):
    """Per-layer unique-path loss.

    For each layer span the true-class probability is averaged over its
    samples; the loss is the negative log of the product of those averages
    (equivalently the sum of negative logs).
    """
    probs_t = _as_tensor(probs)
    y = _onehot(labels, probs_t.shape[-1])
    p_true = (y * probs_t).sum(dim=-1)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    total = probs_t.new_zeros(())
    for start, end in positions:
        if start > end or start < 0 or end >= probs_t.shape[0]:
            raise ValueError(f"invalid layer span ({start}, {end})")
        p_iso = p_true[start : end + 1].mean()
        total = total - torch.log(torch.clamp(p_iso, min=EPS))
    return total if isinstance(probs, torch.Tensor) else float(total)


def total_loss(probs, labels, positions, lambda_up: float = 1.0):
    """ce_loss + lambda * up_loss."""
    out = ce_loss(probs, labels) + lambda_up * up_loss(probs, positions, labels)
    return out


# ---------------------------------------------------------------------------
# Batched training losses (normalized: mean over samples/layers, then traces)
# ---------------------------------------------------------------------------

def _batch_losses(logits, labels, layer_ids, n_layers):
    """logits (B,k,l); labels (B,l) with -100 padding/background ignored;
    layer_ids (B,l) mapping samples to per-trace layer rows (-1 outside).
    Returns (ce, up) each averaged per trace then over the batch."""
    B, k, l = logits.shape
    logp = F.log_softmax(logits, dim=1)

    valid = labels >= 0
    safe_labels = labels.clamp(min=0)
    nll = -logp.gather(1, safe_labels.unsqueeze(1)).squeeze(1)
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    per_trace_ce = nll.sum(dim=1) / valid.sum(dim=1).clamp(min=1)
    ce = per_trace_ce.mean()

    probs_true = torch.exp(logp.gather(1, safe_labels.unsqueeze(1)).squeeze(1))
    max_layers = int(layer_ids.max().item()) + 1 if layer_ids.numel() else 0
    if max_layers <= 0:
        return ce, logits.new_zeros(())
    flat_ids = (layer_ids + torch.arange(B, device=logits.device).unsqueeze(1) * max_layers)
    in_layer = layer_ids >= 0
    flat_ids = flat_ids[in_layer]
    vals = probs_true[in_layer]
    sums = logits.new_zeros(B * max_layers).index_add_(0, flat_ids, vals)
    counts = logits.new_zeros(B * max_layers).index_add_(0, flat_ids, torch.ones_like(vals))
    p_iso = sums / counts.clamp(min=1)
    p_iso = p_iso.view(B, max_layers)
    layer_mask = counts.view(B, max_layers) > 0
    neglog = -torch.log(torch.clamp(p_iso, min=EPS)) * layer_mask
    per_trace_up = neglog.sum(dim=1) / n_layers.clamp(min=1)
    up = per_trace_up.mean()
    return ce, up


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------

@dataclass
class SegSample:
    """One trace prepared for training: normalized samples + aligned labels."""

    values: np.ndarray  # (c, l) float32, normalized
    labels: np.ndarray  # (l,) int64, BACKGROUND -> -100
    layer_ids: np.ndarray  # (l,) int64, -1 outside layers
    n_layers: int


def prepare_sample(trace: Trace, annotation: Annotation, channels: Sequence[str]) -> SegSample:
    values = normalize(trace.select_channels(list(channels)).samples)
    labels = annotation.labels.copy()
    labels[labels == BACKGROUND] = -100
    layer_ids = np.full(trace.length, -1, dtype=np.int64)
    for m, (start, end) in enumerate(annotation.positions):
        layer_ids[start : end + 1] = m
    return SegSample(values, labels, layer_ids, annotation.n_layers)


def _collate(batch: list[SegSample], factor: int) -> tuple:
    max_len = max(s.values.shape[1] for s in batch)
    max_len = ((max_len + factor - 1) // factor) * factor
    B, C = len(batch), batch[0].values.shape[0]
    x = np.zeros((B, C, max_len), dtype=np.float32)
    labels = np.full((B, max_len), -100, dtype=np.int64)
    layer_ids = np.full((B, max_len), -1, dtype=np.int64)
    n_layers = np.zeros(B, dtype=np.int64)
    for i, s in enumerate(batch):
        l = s.values.shape[1]
        x[i, :, :l] = s.values
        labels[i, :l] = s.labels
        layer_ids[i, :l] = s.layer_ids
        n_layers[i] = s.n_layers
    return (
        torch.from_numpy(x),
        torch.from_numpy(labels),
        torch.from_numpy(layer_ids),
        torch.from_numpy(n_layers),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(
    samples: list[SegSample],
    config: SegNetConfig,
    epochs: int = 100,
    batch_size: int = 32,
    lr: float = 0.01,
    momentum: float = 0.9,
    seed: int = 0,
    checkpoint_path=None,
    resume_from=None,
    stop_after_epoch: Optional[int] = None,
    corpus_hash: str = "",
    log_every: int = 0,
) -> tuple[SegNet, dict]:
    """SGD + cosine-annealed lr over per-batch padded traces.

    Deterministic for a fixed seed: weight init from `seed`, batch order from
    (seed, epoch), so a run interrupted at some epoch (`stop_after_epoch`)
    and resumed from its checkpoint replays the uninterrupted schedule.
    """
    if not samples:
        raise ValueError("empty training corpus")
    if any(s.n_layers == 0 for s in samples):
        raise ValueError("corpus trace without layer positions")
    torch.manual_seed(seed)
    model = SegNet(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
    history: dict = {"loss": [], "ce": [], "up": []}
    start_epoch = 0

    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        history = payload["meta"]["history"]
        start_epoch = payload["meta"]["epoch"]

    for epoch in range(start_epoch, epochs):
        # order is a pure function of (seed, epoch) so resumed runs replay it
        order = np.random.default_rng((seed, epoch)).permutation(len(samples))
        model.train()
        tot = tot_ce = tot_up = 0.0
        n_batches = 0
        t0 = time.time()
        for i in range(0, len(order), batch_size):
            batch = [samples[j] for j in order[i : i + batch_size]]
            x, labels, layer_ids, n_layers = _collate(batch, config.downsample_factor)
            logits = model(x)
            ce, up = _batch_losses(logits, labels, layer_ids, n_layers)
            loss = ce + config.lambda_up * up
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            optimizer.step()
            tot += float(loss.detach())
            tot_ce += float(ce.detach())
            tot_up += float(up.detach())
            n_batches += 1
        scheduler.step()
        history["loss"].append(tot / n_batches)
        history["ce"].append(tot_ce / n_batches)
        history["up"].append(tot_up / n_batches)
        if log_every and (epoch + 1) % log_every == 0:
            print(
                f"epoch {epoch + 1}/{epochs} loss {history['loss'][-1]:.4f} "
                f"ce {history['ce'][-1]:.4f} up {history['up'][-1]:.4f} "
                f"({time.time() - t0:.1f}s)"
            )
        if checkpoint_path is not None:
            save_checkpoint(
                model, checkpoint_path,
                meta={"seed": seed, "corpus_hash": corpus_hash,
                      "epoch": epoch + 1, "history": history},
                optimizer=optimizer, scheduler=scheduler,
            )
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    return model, history


def corpus_fingerprint(samples: list[SegSample]) -> str:
    h = hashlib.sha256()
    for s in samples[:64]:
        h.update(s.values.tobytes()[:4096])
        h.update(bytes(str(s.n_layers), "ascii"))
    h.update(str(len(samples)).encode())
    return h.hexdigest()[:16]


def save_checkpoint(model: SegNet, path, meta: dict, optimizer=None, scheduler=None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "segnet",
        "config": dataclasses.asdict(model.config),
        "state_dict": model.state_dict(),
        "meta": meta,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if scheduler is not None:
        payload["scheduler"] = scheduler.state_dict()
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "segnet":
        raise ValueError(f"{path}: not a compatible segnet checkpoint")
    cfg = payload["config"]
    cfg["channels"] = tuple(cfg["channels"])
    cfg["encoder_widths"] = tuple(cfg["encoder_widths"])
    model = SegNet(SegNetConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["meta"]


# ---------------------------------------------------------------------------
# Map -> layer sequence
# ---------------------------------------------------------------------------

def _rle(labels: np.ndarray) -> list[list]:
    runs = []
    for i, v in enumerate(labels):
        if runs and runs[-1][0] == v:
            runs[-1][2] = i
        else:
            runs.append([int(v), i, i])
    return runs


def extract_segments(
    seg_map: SegmentationMap,
    min_run: int = 1,
    background_class: Optional[int] = None,
) -> tuple[list[LayerKind], np.ndarray]:
    """Argmax + run-length decode a segmentation map into layers.

    Runs shorter than `min_run` are absorbed into whichever neighbor's class
    has the higher mean probability over the run; identical neighbors are
    then collapsed, and background runs are dropped from the sequence.
    """
    if seg_map.length == 0:
        return [], np.zeros((0, 2), dtype=np.int64)
    labels = seg_map.argmax_labels()
    runs = _rle(labels)

    if min_run > 1:
        while len(runs) > 1:
            short = [
                i for i, (v, s, e) in enumerate(runs) if e - s + 1 < min_run
            ]
            if not short:
                break
            i = min(short, key=lambda i: runs[i][2] - runs[i][1])
            v, s, e = runs[i]
            cands = []
            if i > 0:
                cands.append(runs[i - 1][0])
            if i + 1 < len(runs):
                cands.append(runs[i + 1][0])
            best = max(cands, key=lambda c: seg_map.probs[s : e + 1, c].mean())
            runs[i][0] = best
            merged = []
            for run in runs:
                if merged and merged[-1][0] == run[0]:
                    merged[-1][2] = run[2]
                else:
                    merged.append(run)
            runs = merged

    collapsed = []
    for run in runs:
        if collapsed and collapsed[-1][0] == run[0]:
            collapsed[-1][2] = run[2]
        else:
            collapsed.append(list(run))

    kinds = []
    positions = []
    for v, s, e in collapsed:
        if background_class is not None and v == background_class:
            continue
        kinds.append(LayerKind(v))
        positions.append((s, e))
    return kinds, np.asarray(positions, dtype=np.int64).reshape(-1, 2)
