"""Grad-CAM activation maps for the patch embedder and the encoder.

Two layers are explained: the first batch-norm output of the ConvNet
embedder and the first layer norm of the encoder.  Each layer's map is
projected back onto spectrogram coordinates, scaled to a unit maximum, and
the two are summed and rescaled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import PatchSequence

__all__ = ["ActivationMap", "stitch_patches", "gradcam", "mask_input", "call_frame_mask", "localization_score"]


@dataclass
class ActivationMap:
    values: np.ndarray  # (freq_bins, frames), in [0, 1]
    label: int
    layers: dict = field(default_factory=dict)


def stitch_patches(patches: np.ndarray, stride: int) -> np.ndarray:
    """Overlap-average ``(n, freq, width)`` patches back into a ``(freq, frames)`` matrix."""
    patches = np.asarray(patches, dtype=np.float64)
    n, f, w = patches.shape
    frames = (n - 1) * stride + w
    total = np.zeros((f, frames))
    count = np.zeros(frames)
    for i in range(n):
        total[:, i * stride : i * stride + w] += patches[i]
        count[i * stride : i * stride + w] += 1
    return total / count


def _unit(x: np.ndarray) -> np.ndarray:
    peak = x.max(initial=0.0)
    return x / peak if peak > 0 else np.zeros_like(x)


def gradcam(model, seq: PatchSequence, label: int) -> ActivationMap:
    """Activation map of ``label`` over the real patches of ``seq``.

    The ConvNet layer is handled per patch: channel weights are the
    gradients averaged over that patch's feature map.  For the encoder,
    patch tokens play the role of spatial positions (the CLS token is left
    out); each token's weighted activation is spread over the frames of its
    patch.
    """
    cfg = model.config
    if not 0 <= int(label) < cfg.num_classes:
        raise ValueError(f"label {label} outside 0..{cfg.num_classes - 1}")
    patches = seq.patches[seq.mask]
    n, f, w = patches.shape
    stride = cfg.patch_frames - cfg.patch_overlap
    capture: dict = {}
    with ad.Graph():
        logits = model(patches[None], np.ones((1, n), bool), training=False, capture=capture)
        ad.backward(ad.slice(logits, (0, int(label))))

    conv = capture["conv_norm"]
    act = conv.data.astype(np.float64)
    grad = np.zeros_like(act) if conv.grad is None else conv.grad.astype(np.float64)
    alpha = grad.mean(axis=(2, 3))
    conv_cam = np.maximum(np.einsum("nc,nchw->nhw", alpha, act), 0.0)
    if conv_cam.shape[1:] != (f, w):
        raise ad.ShapeError(f"conv map {conv_cam.shape[1:]} does not match patch {(f, w)}")

    enc = capture["encoder_norm"]
    act = enc.data[0, 1:].astype(np.float64)
    grad = np.zeros_like(act) if enc.grad is None else enc.grad[0, 1:].astype(np.float64)
    token_cam = np.maximum(act @ grad.mean(axis=0), 0.0)
    enc_cam = np.broadcast_to(token_cam[:, None, None], (n, f, w))

    layers = {
        "conv_norm": _unit(stitch_patches(conv_cam, stride)),
        "encoder_norm": _unit(stitch_patches(enc_cam, stride)),
    }
    return ActivationMap(_unit(layers["conv_norm"] + layers["encoder_norm"]), int(label), layers)


def mask_input(seq, amap) -> np.ndarray:
    """Element-wise product of an input spectrogram and an activation map.

    A PatchSequence is stitched back to spectrogram coordinates first.
    """
    if isinstance(seq, PatchSequence):
        stride = seq.patches.shape[2] // 2 if seq.meta.get("stride") is None else seq.meta["stride"]
        seq = stitch_patches(seq.patches[seq.mask], stride)
    values = amap.values if isinstance(amap, ActivationMap) else np.asarray(amap)
    seq = np.asarray(seq)
    if seq.shape != values.shape:
        raise ad.ShapeError(f"input {seq.shape} and map {values.shape} do not align")
    return seq * values


def call_frame_mask(calls, num_frames: int, n_fft: int = 512, hop: int = 128, rate: float = 22050.0, time_expansion: float = 10.0) -> np.ndarray:
    """Frames whose centre falls inside any ``(start, end)`` real-time call span."""
    centres = (np.arange(num_frames) * hop + n_fft / 2) / rate / time_expansion
    mask = np.zeros(num_frames, bool)
    for t0, t1 in calls:
        mask |= (centres >= t0) & (centres <= t1)
    return mask


def localization_score(values: np.ndarray, frame_mask: np.ndarray, quantile: float = 0.9) -> float:
    """Share of the top-decile activation mass lying in the marked frames."""
    values = np.asarray(values)
    cut = np.quantile(values, quantile)
    top = np.where(values >= cut, values, 0.0)
    total = top.sum()
    if total <= 0:
        return 0.0
    return float(top[:, frame_mask].sum() / total)
