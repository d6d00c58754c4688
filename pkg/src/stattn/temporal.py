"""Temporal attention over masked frames driving a ConvLSTM classifier.

Shapes carry an optional leading batch axis B: frames are (n, C, H, W)
or (B, n, C, H, W); hidden/cell states are (C_h, H, W) or (B, C_h, H, W).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import DimensionError, Tensor, ops
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .spatial import MaskNetwork, apply_mask, mask_forward


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise DimensionError(f"hidden {self.h.shape} and cell {self.c.shape} shapes differ")


class EnergyNetworks(Module):
    """Phi_H: hidden state -> n scores; Phi_X: masked frame -> one score.

    Each is a K3 conv, ReLU, global spatial mean, then an affine map.
    """

    def __init__(self, hidden_channels: int, feat_channels: int, n_frames: int,
                 width: int = 8, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_frames = n_frames
        self.h_conv = Conv2d(hidden_channels, width, 3, 1, 1, rng)
        self.h_fc = Linear(width, n_frames, rng)
        self.x_conv = Conv2d(feat_channels, width, 3, 1, 1, rng)
        self.x_fc = Linear(width, 1, rng)


def _pool_affine(conv: Conv2d, fc: Linear, x: Tensor) -> Tensor:
    # x: (N, C, H, W) -> (N, F_out)
    return fc(ops.mean(ops.relu(conv(x)), axes=(2, 3)))


def frame_energy(nets: EnergyNetworks, frames: Tensor) -> Tensor:
    """Phi_X for every frame: (n, C, H, W) -> (n,) or (B, n, C, H, W) -> (B, n)."""
    lead = frames.shape[:-3]
    flat = ops.reshape(frames, (-1,) + frames.shape[-3:])
    return ops.reshape(_pool_affine(nets.x_conv, nets.x_fc, flat), lead)


def hidden_energy(nets: EnergyNetworks, h_prev: Tensor) -> Tensor:
    """Phi_H of the previous hidden state: (C_h, H, W) -> (n,) or batched -> (B, n)."""
    batched = h_prev.ndim == 4
    h4 = h_prev if batched else ops.reshape(h_prev, (1,) + h_prev.shape)
    if h4.shape[1] != nets.h_conv.weight.shape[1]:
        raise DimensionError(f"hidden state has {h4.shape[1]} channels, Phi_H expects {nets.h_conv.weight.shape[1]}")
    out = _pool_affine(nets.h_conv, nets.h_fc, h4)
    return out if batched else ops.reshape(out, (nets.n_frames,))


def energies(nets: EnergyNetworks, h_prev: Tensor, frames: Tensor, frame_part: Tensor | None = None) -> Tensor:
    """e[i] = Phi_H(H_prev)[i] + Phi_X(frames[i]).

    ``frame_part`` may carry a precomputed ``frame_energy(nets, frames)``;
    it does not depend on the step.
    """
    if frames.shape[-4] != nets.n_frames:
        raise DimensionError(f"got {frames.shape[-4]} frames, energy networks built for {nets.n_frames}")
    if frame_part is None:
        frame_part = frame_energy(nets, frames)
    return ops.add(hidden_energy(nets, h_prev), frame_part)


def attention_weights(e: Tensor) -> Tensor:
    return ops.softmax(e, axis=-1)


def aggregate(w: Tensor, frames: Tensor, prefactor: bool = True) -> Tensor:
    """Y = (1/n) * sum_i w[i] * frames[i]; the 1/n is dropped when ``prefactor`` is False."""
    n = frames.shape[-4]
    if w.shape != frames.shape[:-3]:
        raise DimensionError(f"weights {w.shape} do not match frame stack {frames.shape}")
    wb = ops.broadcast_to(ops.reshape(w, w.shape + (1, 1, 1)), frames.shape)
    y = ops.sum(ops.mul(wb, frames), axes=frames.ndim - 4)
    return ops.scale(y, 1.0 / n) if prefactor else y


class ConvLSTMCell(Module):
    """Input, forget, output and candidate convolutions over [Y_t, H_{t-1}].

    The four gate kernels are stacked along the output axis of one conv, in
    the order i, f, o, g.
    """

    def __init__(self, in_channels: int, hidden_channels: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        cat = in_channels + hidden_channels
        self.gates = Conv2d(cat, 4 * hidden_channels, 3, 1, 1, rng)


def convlstm_step(cell: ConvLSTMCell, y: Tensor, state: ConvLSTMState) -> ConvLSTMState:
    axis = y.ndim - 3
    if y.shape[axis] != cell.in_channels or state.h.shape[axis] != cell.hidden_channels:
        raise DimensionError(
            f"ConvLSTM expects {cell.in_channels} input / {cell.hidden_channels} hidden channels, "
            f"got {y.shape} and {state.h.shape}"
        )
    z = ops.concat([y, state.h], axis=axis)
    pre = cell.gates(z)
    hc = cell.hidden_channels
    lead = (slice(None),) * axis
    sig = ops.sigmoid(pre[lead + (slice(0, 3 * hc),)])
    i = sig[lead + (slice(0, hc),)]
    f = sig[lead + (slice(hc, 2 * hc),)]
    o = sig[lead + (slice(2 * hc, 3 * hc),)]
    g = ops.tanh(pre[lead + (slice(3 * hc, 4 * hc),)])
    c = ops.add(ops.mul(f, state.c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return ConvLSTMState(h, c)


class InitNetwork(Module):
    """conv-BN-ReLU-conv-BN from mean features to a ConvLSTM state tensor."""

    def __init__(self, in_channels: int, hidden_channels: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(in_channels, hidden_channels, 3, 1, 1, rng)
        self.bn1 = BatchNorm2d(hidden_channels)
        self.conv2 = Conv2d(hidden_channels, hidden_channels, 3, 1, 1, rng)
        self.bn2 = BatchNorm2d(hidden_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))


def init_states(g_c: InitNetwork, g_h: InitNetwork, frames: Tensor) -> ConvLSTMState:
    """C_0 = g_c(mean frame), H_0 = g_h(mean frame)."""
    avg = ops.mean(frames, axes=frames.ndim - 4)
    return ConvLSTMState(h=g_h(avg), c=g_c(avg))


class AttentionModel(Module):
    """Mask network, energy networks, ConvLSTM, init networks and classifier."""

    def __init__(self, feat_channels: int, n_frames: int, n_classes: int, hidden_channels: int = 16,
                 mask_c1: int = 64, mask_c2: int = 32, energy_width: int = 8,
                 aggregate_prefactor: bool = True, mask_bias: float = 0.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feat_channels = feat_channels
        self.n_frames = n_frames
        self.n_classes = n_classes
        self.hidden_channels = hidden_channels
        self.aggregate_prefactor = aggregate_prefactor
        self.mask_net = MaskNetwork(feat_channels, mask_c1, mask_c2, rng, final_bias=mask_bias)
        self.energy = EnergyNetworks(hidden_channels, feat_channels, n_frames, energy_width, rng)
        self.cell = ConvLSTMCell(feat_channels, hidden_channels, rng)
        self.g_c = InitNetwork(feat_channels, hidden_channels, rng)
        self.g_h = InitNetwork(feat_channels, hidden_channels, rng)
        self.classifier = Linear(hidden_channels, n_classes, rng)


@dataclass
class VideoOutput:
    logits: Tensor     # (K,) or (B, K)
    attention: Tensor  # (n, n) or (B, n, n); row t holds the weights of step t
    masks: Tensor      # (n, 1, H, W) or (B, n, 1, H, W)


def forward_batch(model: AttentionModel, frames: Tensor) -> VideoOutput:
    """Run a (B, n, C, H, W) feature batch through the whole attention stack."""
    if frames.ndim != 5:
        raise DimensionError(f"forward_batch expects (B, n, C, H, W), got {frames.shape}")
    b, n, c, hh, ww = frames.shape
    if n != model.n_frames or c != model.feat_channels:
        raise DimensionError(
            f"model built for n={model.n_frames}, C={model.feat_channels}; got n={n}, C={c}"
        )
    flat = ops.reshape(frames, (b * n, c, hh, ww))
    masks = mask_forward(model.mask_net, flat)
    attended = ops.reshape(apply_mask(flat, masks), (b, n, c, hh, ww))

    state = init_states(model.g_c, model.g_h, attended)
    frame_part = frame_energy(model.energy, attended)
    rows, hiddens = [], []
    for _ in range(n):
        e = energies(model.energy, state.h, attended, frame_part)
        w = attention_weights(e)
        y = aggregate(w, attended, model.aggregate_prefactor)
        state = convlstm_step(model.cell, y, state)
        rows.append(w)
        hiddens.append(state.h)

    h_bar = ops.mean(ops.stack(hiddens, axis=0), axes=0)
    logits = model.classifier(ops.mean(h_bar, axes=(2, 3)))
    return VideoOutput(
        logits=logits,
        attention=ops.stack(rows, axis=1),
        masks=ops.reshape(masks, (b, n, 1, hh, ww)),
    )


def forward_video(model: AttentionModel, frames: Tensor) -> VideoOutput:
    """Single-video forward: frames (n, C, H, W) -> logits (K,), W (n, n), masks (n, 1, H, W)."""
    if frames.ndim != 4:
        raise DimensionError(f"forward_video expects (n, C, H, W), got {frames.shape}")
    out = forward_batch(model, ops.reshape(frames, (1,) + frames.shape))
    return VideoOutput(
        logits=ops.reshape(out.logits, out.logits.shape[1:]),
        attention=ops.reshape(out.attention, out.attention.shape[1:]),
        masks=ops.reshape(out.masks, out.masks.shape[1:]),
    )


def write_attention_csv(path: str | Path, attention: np.ndarray) -> None:
    """Rows ``t,i,w`` (1-based) for every entry of an (n, n) attention matrix."""
    w = np.asarray(attention, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["t", "i", "w"])
        for t in range(w.shape[0]):
            for i in range(w.shape[1]):
                out.writerow([t + 1, i + 1, f"{w[t, i]:.17g}"])


def read_attention_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n_t = max(int(r["t"]) for r in rows)
    n_i = max(int(r["i"]) for r in rows)
    out = np.zeros((n_t, n_i))
    for r in rows:
        out[int(r["t"]) - 1, int(r["i"]) - 1] = float(r["w"])
    return out
