"""Training loop, momentum SGD, checkpoints and evaluation."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NumericError, Tensor, UsageError
from .config import config_to_text, parse_config_text
from .localization import (
    SPATIAL_ALPHAS,
    TEMPORAL_ALPHAS,
    Detection,
    box_score,
    frame_importance,
    map_table,
    mask_to_bbox,
    temporal_segments,
    upsample_mask,
    write_detections,
)
from .losses import LossBreakdown, LossWeights, MetricsWriter, total_loss
from .model import ModelSpec, VideoModel, encoder_strides
from .spatial import export_masks, write_pgm
from .synthetic import LabeledVideo, derive_seed, stack_frames
from .temporal import write_attention_csv


@dataclass
class TrainConfig:
    lambda_tv: float = 1e-5
    lambda_contrast: float = 1e-4
    lambda_unimodal: float = 1.0
    n_frames: int = 8
    hidden: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    clip: float = 1.0
    epochs: int = 50
    batch_size: int = 10
    seed: int = 0
    aggregate_prefactor: bool = True
    n_classes: int = 4
    frame_height: int = 56
    frame_width: int = 56
    feat_channels: int = 8
    mask_c1: int = 64
    mask_c2: int = 32
    energy_width: int = 8
    mask_bias: float = 0.0
    feature_stride: int = 4

    def __post_init__(self):
        positive = ("n_frames", "hidden", "lr", "batch_size", "n_classes", "frame_height", "frame_width",
                    "feat_channels", "mask_c1", "mask_c2", "energy_width")
        for name in positive:
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.epochs < 0 or self.clip < 0 or not 0.0 <= self.momentum < 1.0:
            raise UsageError("epochs and clip must be non-negative and momentum in [0, 1)")
        self.weights  # validates the lambdas
        encoder_strides(self.feature_stride)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_tv, self.lambda_contrast, self.lambda_unimodal)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            n_frames=self.n_frames,
            n_classes=self.n_classes,
            frame_height=self.frame_height,
            frame_width=self.frame_width,
            feat_channels=self.feat_channels,
            hidden=self.hidden,
            mask_c1=self.mask_c1,
            mask_c2=self.mask_c2,
            energy_width=self.energy_width,
            aggregate_prefactor=self.aggregate_prefactor,
            mask_bias=self.mask_bias,
            feature_stride=self.feature_stride,
        )

    def to_text(self) -> str:
        return config_to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return parse_config_text(text, cls)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


# ------------------------------------------------------------- optimizer

def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
             lr: float, momentum: float, names: Sequence[str] | None = None) -> None:
    """In place: v <- mu v + g; p <- p - lr v.  Nothing is touched if any gradient is non-finite."""
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    if not len(params) == len(grads) == len(velocity) == len(names):
        raise UsageError("params, grads and velocity must align")
    for p, g, v, name in zip(params, grads, velocity, names):
        if g.shape != p.shape or v.shape != p.shape:
            raise UsageError(f"{name}: gradient {g.shape} / velocity {v.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p.data -= lr * v


def clip_scale(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Factor bringing the global L2 norm down to ``max_norm``; 0 disables clipping."""
    if max_norm <= 0:
        return 1.0
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    return 1.0 if norm <= max_norm else max_norm / norm


# ------------------------------------------------------------ checkpoint

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    step: int = 0
    version: int = CKPT_VERSION

    def build_model(self) -> VideoModel:
        model = VideoModel(self.config.model_spec, seed=self.config.seed)
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            raise UsageError("checkpoint parameters do not match the configured model")
        for name, p in named.items():
            if p.shape != self.params[name].shape:
                raise UsageError(f"{name}: checkpoint shape {self.params[name].shape} vs model {p.shape}")
            p.data = self.params[name].copy()
        for name, value in self.buffers.items():
            model.set_buffer(name, value)
        return model


def snapshot(model: VideoModel, cfg: TrainConfig, velocity: Sequence[np.ndarray] | None, step: int) -> Checkpoint:
    named = list(model.named_parameters())
    vel = velocity if velocity is not None else [np.zeros(p.shape) for _, p in named]
    return Checkpoint(
        config=cfg,
        params={n: p.data.copy() for n, p in named},
        buffers={n: b.copy() for n, b in model.named_buffers()},
        velocity={n: v.copy() for (n, _), v in zip(named, vel)},
        step=step,
    )


def _sections(ck: Checkpoint):
    return (("params", ck.params), ("buffers", ck.buffers), ("velocity", ck.velocity))


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    """magic, u16 version, u32 header length, JSON header, then raw little-endian f64 arrays."""
    header = {
        "config": ck.config.to_text(),
        "step": ck.step,
        **{sec: [[k, list(v.shape)] for k, v in arrs.items()] for sec, arrs in _sections(ck)},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", ck.version, len(blob)) + blob)
        for _, arrs in _sections(ck):
            for v in arrs.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise UsageError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {version}")
    start = 10
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    pos = start + hlen
    out: dict[str, dict[str, np.ndarray]] = {}
    for sec in ("params", "buffers", "velocity"):
        out[sec] = {}
        for name, shape in header[sec]:
            count = int(np.prod(shape)) if shape else 1
            out[sec][name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    if pos != len(raw):
        raise UsageError(f"{path}: trailing or missing bytes")
    return Checkpoint(
        config=TrainConfig.from_text(header["config"]),
        step=int(header["step"]),
        version=version,
        **out,
    )


# -------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[LossBreakdown] = field(default_factory=list)


def check_compatible(cfg: TrainConfig, videos: Sequence[LabeledVideo]) -> None:
    for v in videos:
        n, h, w = v.frames.shape
        if (n, h, w) != (cfg.n_frames, cfg.frame_height, cfg.frame_width):
            raise UsageError(
                f"video {v.video_id} is {n}x{h}x{w}, config expects "
                f"{cfg.n_frames}x{cfg.frame_height}x{cfg.frame_width}"
            )
        if not 0 <= v.label < cfg.n_classes:
            raise UsageError(f"video {v.video_id} label {v.label} outside 0..{cfg.n_classes - 1}")


def train(cfg: TrainConfig, videos: Sequence[LabeledVideo], out_dir: str | Path | None = None,
          log=None) -> TrainResult:
    """Train from scratch.  Writes ``metrics.csv`` and ``checkpoint.bin`` into ``out_dir`` when given.

    A non-finite loss or gradient stops training after saving the last finite state.
    """
    if not videos:
        raise UsageError("training set is empty")
    check_compatible(cfg, videos)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.csv") if out is not None else None

    model = VideoModel(cfg.model_spec, seed=cfg.seed)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    velocity = [np.zeros(p.shape) for p in params]
    frames = stack_frames(videos)
    labels = np.array([v.label for v in videos])
    order_rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    weights = cfg.weights
    history: list[LossBreakdown] = []
    step = 0

    def finish() -> Checkpoint:
        ck = snapshot(model, cfg, velocity, step)
        if out is not None:
            save_checkpoint(ck, out / "checkpoint.bin")
        return ck

    model.train()
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(videos))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            # BN running stats mutate during the forward pass, so keep a copy for rollback
            saved = {n: b.copy() for n, b in model.named_buffers()}
            try:
                out_v = model(frames[idx])
                loss = total_loss(out_v.logits, labels[idx], out_v.masks, out_v.attention, weights)
                if not np.isfinite(loss.total):
                    raise NumericError(f"total loss became {loss.total} at step {step + 1}")
            except NumericError:
                _restore_buffers(model, saved)
                finish()
                raise
            model.zero_grad()
            loss.graph.backward()
            grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
            try:
                scale = clip_scale(grads, cfg.clip) if all(np.all(np.isfinite(g)) for g in grads) else 1.0
                sgd_step(params, [g * scale for g in grads], velocity, cfg.lr, cfg.momentum, names)
            except NumericError:
                _restore_buffers(model, saved)
                finish()
                raise
            step += 1
            loss.graph = None
            history.append(loss)
            if writer is not None:
                writer.append(step, loss)
        if log is not None:
            recent = history[-len(range(0, len(perm), cfg.batch_size)):]
            log(f"epoch {epoch + 1}/{cfg.epochs} total={np.mean([h.total for h in recent]):.4f} "
                f"ce={np.mean([h.ce for h in recent]):.4f}")
    return TrainResult(finish(), history)


def _restore_buffers(model: VideoModel, saved: dict[str, np.ndarray]) -> None:
    for name, value in saved.items():
        model.set_buffer(name, value)


# ------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    accuracy: float
    spatial: dict[float, float]
    temporal: dict[float, float]
    predictions: np.ndarray
    attention: np.ndarray
    masks: np.ndarray

    def lines(self) -> list[str]:
        rows = [f"accuracy {self.accuracy:.6f}"]
        rows += [f"spatial_map@{a:g} {v:.6f}" for a, v in self.spatial.items()]
        rows += [f"temporal_map@{a:g} {v:.6f}" for a, v in self.temporal.items()]
        return rows


def predict(model: VideoModel, videos: Sequence[LabeledVideo], chunk: int = 20):
    """Eval-mode forward pass: (predicted labels, attention (N,n,n), masks (N,n,1,h,w))."""
    model.eval()
    frames = stack_frames(videos)
    preds, atts, masks = [], [], []
    for i in range(0, len(frames), chunk):
        o = model(frames[i : i + chunk])
        preds.append(o.logits.data.argmax(axis=1))
        atts.append(o.attention.data)
        masks.append(o.masks.data)
    model.train()
    return np.concatenate(preds), np.concatenate(atts), np.concatenate(masks)


def spatial_detections(video_id: str, label: int, masks: np.ndarray, height: int, width: int) -> list[Detection]:
    """One box per frame whose upsampled mask exceeds 0.5 anywhere; frames are 1-based."""
    dets = []
    for t, m in enumerate(masks):
        up = upsample_mask(m[0] if m.ndim == 3 else m, height, width)
        box = mask_to_bbox(up)
        if box is not None:
            dets.append(Detection(video_id, int(label), box, box_score(up, box), frame=t + 1))
    return dets


def temporal_detections(video_id: str, label: int, attention: np.ndarray) -> list[Detection]:
    return [Detection(video_id, int(label), seg, score) for seg, score in temporal_segments(frame_importance(attention))]


def evaluate(model: VideoModel, videos: Sequence[LabeledVideo], dump_dir: str | Path | None = None) -> EvalReport:
    """Top-1 accuracy and localization mAP; detections are labelled with the predicted class."""
    if not videos:
        raise UsageError("evaluation set is empty")
    spec = model.spec
    for v in videos:
        if v.frames.shape != (spec.n_frames, spec.frame_height, spec.frame_width):
            raise UsageError(f"video {v.video_id} shape {v.frames.shape} does not match the checkpoint config")
    preds, att, masks = predict(model, videos)
    labels = np.array([v.label for v in videos])
    sdets, tdets, sgts, tgts = [], [], [], []
    for v, p, w, m in zip(videos, preds, att, masks):
        sp, tp = v.ground_truth()
        sgts += sp
        tgts.append(tp)
        sdets += spatial_detections(v.video_id, p, m, spec.frame_height, spec.frame_width)
        tdets += temporal_detections(v.video_id, p, w)
    report = EvalReport(
        accuracy=float(np.mean(preds == labels)),
        spatial=map_table(sdets, sgts, SPATIAL_ALPHAS),
        temporal=map_table(tdets, tgts, TEMPORAL_ALPHAS),
        predictions=preds,
        attention=att,
        masks=masks,
    )
    if dump_dir is not None:
        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_detections(d / "spatial_detections.csv", sdets)
        write_detections(d / "temporal_detections.csv", tdets)
        for v, w, m in zip(videos, att, masks):
            write_attention_csv(d / f"{v.video_id}_attention.csv", w)
            export_masks(m, d, v.video_id)
    return report


# -------------------------------------------------------------- heatmaps

def temporal_strip(weights: np.ndarray, cell: int = 8) -> np.ndarray:
    """Grey strip with one ``cell``-wide block per frame, brightness proportional to its weight."""
    w = np.asarray(weights, dtype=np.float64)
    peak = w.max()
    level = w / peak if peak > 0 else np.zeros_like(w)
    return np.repeat(level, cell)[None, :].repeat(cell, axis=0)


def emit_heatmaps(model: VideoModel, video: LabeledVideo, out_dir: str | Path, cell: int = 8) -> list[Path]:
    """Per-frame mask images at frame resolution plus ``<video>_temporal.pgm``."""
    _, att, masks = predict(model, [video])
    return write_heatmaps(video.video_id, att[0], masks[0], out_dir, video.frames.shape[1:], cell)


def write_heatmaps(video_id: str, attention: np.ndarray, masks: np.ndarray, out_dir: str | Path,
                   frame_shape: tuple[int, int], cell: int = 8) -> list[Path]:
    h, w = frame_shape
    up = np.stack([upsample_mask(m[0] if m.ndim == 3 else m, h, w) for m in masks])
    paths = export_masks(up, out_dir, video_id)
    strip = Path(out_dir) / f"{video_id}_temporal.pgm"
    write_pgm(strip, temporal_strip(frame_importance(attention), cell))
    return paths + [strip]


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
