"""Patch slicing and the ConvNet-Transformer hybrid classifier.

A spectrogram is cut into overlapping fixed-width patches.  Every patch is
embedded by a shared three-block ConvNet, a learned CLS token is prepended,
learned positional embeddings are added and the sequence runs through a
small pre-norm Transformer encoder.  The transformed CLS token is mapped to
one logit per species.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .dsp import Spectrogram

__all__ = [
    "BatConfig",
    "PatchSequence",
    "TooShortError",
    "CheckpointError",
    "slice_patches",
    "stack_sequences",
    "init_embedder",
    "embed_patches",
    "embedder_param_count",
    "BatModel",
    "predict",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
]


class TooShortError(ValueError):
    """Spectrogram has fewer frames than one patch."""


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupt or of an unknown version."""


@dataclass
class BatConfig:
    num_classes: int = 18
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 32
    patch_frames: int = 44
    patch_overlap: int = 22
    seq_len: int = 60
    threshold: float = 0.5
    conv_widths: tuple[int, ...] = (8, 16, 32)
    pool_size: tuple[int, int] = (4, 2)
    species: tuple[str, ...] = ()  # optional class names, stored with checkpoints

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        self.pool_size = tuple(self.pool_size)
        self.species = tuple(self.species)
        if self.species and len(self.species) != self.num_classes:
            raise ValueError("species names must match num_classes")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0 <= self.patch_overlap < self.patch_frames:
            raise ValueError("patch_overlap must be in [0, patch_frames)")
        if self.num_classes < 1 or self.seq_len < 1:
            raise ValueError("num_classes and seq_len must be positive")

    @property
    def patch_stride(self) -> int:
        return self.patch_frames - self.patch_overlap

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["pool_size"] = list(self.pool_size)
        d["species"] = list(self.species)
        return d

    @property
    def class_names(self) -> list[str]:
        return list(self.species) if self.species else [f"class{i}" for i in range(self.num_classes)]


@dataclass
class PatchSequence:
    """Ordered stack of patches ``(num_patches, freq_bins, patch_frames)``.

    ``mask`` is True for real patches and False for zero padding.
    """

    patches: np.ndarray
    mask: np.ndarray = None
    start_frame: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        if self.patches.ndim != 3:
            raise ShapeError(f"patches must be 3-d, got {self.patches.shape}")
        if self.mask is None:
            self.mask = np.ones(len(self.patches), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def num_patches(self) -> int:
        return len(self.patches)

    @property
    def num_real(self) -> int:
        return int(self.mask.sum())

    def padded(self, seq_len: int) -> "PatchSequence":
        n = self.num_patches
        if n > seq_len:
            raise ShapeError(f"sequence of {n} patches exceeds seq_len={seq_len}")
        if n == seq_len:
            return self
        pad = np.zeros((seq_len - n,) + self.patches.shape[1:], dtype=np.float32)
        mask = np.concatenate([self.mask, np.zeros(seq_len - n, dtype=bool)])
        return PatchSequence(np.concatenate([self.patches, pad]), mask, self.start_frame, dict(self.meta))


def slice_patches(
    spec: Spectrogram | np.ndarray,
    patch_frames: int = 44,
    patch_overlap: int = 22,
    seq_len: int | None = None,
) -> PatchSequence:
    """Cut a ``(freq_bins, frames)`` matrix into overlapping patches.

    Patch ``i`` starts at frame ``i * (patch_frames - patch_overlap)``; a
    trailing partial window is dropped.  With ``seq_len`` the result is
    zero-padded (and masked) up to that length.
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    frames = values.shape[1]
    if frames < patch_frames:
        raise TooShortError(f"{frames} frames is shorter than one patch of {patch_frames}")
    stride = patch_frames - patch_overlap
    n = 1 + (frames - patch_frames) // stride
    windows = np.lib.stride_tricks.sliding_window_view(values, patch_frames, axis=1)[:, ::stride][:, :n]
    seq = PatchSequence(np.ascontiguousarray(windows.transpose(1, 0, 2)))
    return seq.padded(seq_len) if seq_len is not None and n < seq_len else seq


def stack_sequences(seqs, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad a list of sequences to ``seq_len`` and stack into batch arrays."""
    padded = [s.padded(seq_len) for s in seqs]
    return np.stack([p.patches for p in padded]), np.stack([p.mask for p in padded])


# ---------------------------------------------------------------- parameters


def _kaiming_uniform(rng, shape, fan_in) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _param(params, name, data):
    params[name] = Tensor(data, requires_grad=True, name=name)


def init_embedder(rng, params: dict, buffers: dict, prefix: str, dim: int, widths=(8, 16, 32), pool=(4, 2)):
    """Add the parameters of the ConvNet patch embedder to ``params``/``buffers``."""
    cin = 1
    for i, cout in enumerate(widths, start=1):
        _param(params, f"{prefix}.conv{i}.weight", _kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9))
        _param(params, f"{prefix}.conv{i}.bias", np.zeros(cout, np.float32))
        _param(params, f"{prefix}.bn{i}.weight", np.ones(cout, np.float32))
        _param(params, f"{prefix}.bn{i}.bias", np.zeros(cout, np.float32))
        buffers[f"{prefix}.bn{i}.running_mean"] = np.zeros(cout, np.float32)
        buffers[f"{prefix}.bn{i}.running_var"] = np.ones(cout, np.float32)
        cin = cout
    flat = widths[-1] * pool[0] * pool[1]
    _param(params, f"{prefix}.proj.weight", _kaiming_uniform(rng, (flat, dim), flat))
    _param(params, f"{prefix}.proj.bias", np.zeros(dim, np.float32))


def embedder_param_count(dim: int = 64, widths=(8, 16, 32), pool=(4, 2)) -> int:
    """Trainable element count of the patch embedder from layer shapes alone."""
    total, cin = 0, 1
    for cout in widths:
        total += cout * cin * 9 + cout  # conv weight + bias
        total += 2 * cout  # batch-norm scale + shift
        cin = cout
    flat = widths[-1] * pool[0] * pool[1]
    return total + flat * dim + dim


def embed_patches(
    params: dict,
    buffers: dict,
    x: Tensor,
    training: bool,
    prefix: str,
    pool=(4, 2),
    capture: dict | None = None,
) -> Tensor:
    """``(n, 1, freq_bins, frames)`` patches -> ``(n, dim)`` embeddings."""
    h = x
    i = 1
    while f"{prefix}.conv{i}.weight" in params:
        p = f"{prefix}.conv{i}"
        b = f"{prefix}.bn{i}"
        h = ad.conv2d(h, params[p + ".weight"], params[p + ".bias"], padding=1)
        h = ad.batchnorm2d(
            h,
            params[b + ".weight"],
            params[b + ".bias"],
            buffers[b + ".running_mean"],
            buffers[b + ".running_var"],
            training=training,
        )
        if capture is not None and i == 1:
            capture["conv_norm"] = h.retain_grad()
        h = ad.relu_maxpool2d(h)
        i += 1
    h = ad.adaptive_avgpool2d(h, pool)
    h = ad.reshape(h, (h.shape[0], -1))
    return ad.linear(h, params[prefix + ".proj.weight"], params[prefix + ".proj.bias"])


# ---------------------------------------------------------------- model


class BatModel:
    """ConvNet patch embedder followed by a Transformer encoder over patches."""

    def __init__(self, config: BatConfig | None = None, seed: int = 0):
        self.config = config or BatConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        d = cfg.embed_dim
        init_embedder(rng, self.params, self.buffers, "embed", d, cfg.conv_widths, cfg.pool_size)
        _param(self.params, "cls_token", (0.02 * rng.standard_normal(d)).astype(np.float32))
        _param(self.params, "pos_embed", (0.02 * rng.standard_normal((cfg.seq_len + 1, d))).astype(np.float32))
        for layer in range(cfg.num_layers):
            p = f"encoder.{layer}"
            _param(self.params, f"{p}.norm1.weight", np.ones(d, np.float32))
            _param(self.params, f"{p}.norm1.bias", np.zeros(d, np.float32))
            _param(self.params, f"{p}.attn.qkv.weight", _kaiming_uniform(rng, (d, 3 * d), d))
            _param(self.params, f"{p}.attn.qkv.bias", np.zeros(3 * d, np.float32))
            _param(self.params, f"{p}.attn.out.weight", _kaiming_uniform(rng, (d, d), d))
            _param(self.params, f"{p}.attn.out.bias", np.zeros(d, np.float32))
            _param(self.params, f"{p}.norm2.weight", np.ones(d, np.float32))
            _param(self.params, f"{p}.norm2.bias", np.zeros(d, np.float32))
            _param(self.params, f"{p}.ffn.fc1.weight", _kaiming_uniform(rng, (d, cfg.ffn_dim), d))
            _param(self.params, f"{p}.ffn.fc1.bias", np.zeros(cfg.ffn_dim, np.float32))
            _param(self.params, f"{p}.ffn.fc2.weight", _kaiming_uniform(rng, (cfg.ffn_dim, d), cfg.ffn_dim))
            _param(self.params, f"{p}.ffn.fc2.bias", np.zeros(d, np.float32))
        _param(self.params, "norm.weight", np.ones(d, np.float32))
        _param(self.params, "norm.bias", np.zeros(d, np.float32))
        _param(self.params, "head.weight", _kaiming_uniform(rng, (d, cfg.num_classes), d))
        _param(self.params, "head.bias", np.zeros(cfg.num_classes, np.float32))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "BatModel":
        """Cast parameters and buffers in place (float64 is used for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(dtype)
        return self

    def state(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=t.data.dtype).reshape(t.shape)
        for k, v in self.buffers.items():
            self.buffers[k] = np.array(state[k], dtype=v.dtype).reshape(v.shape)

    # -------------------------------------------------------------- forward

    def _batch(self, seqs, mask):
        cfg = self.config
        if isinstance(seqs, PatchSequence):
            seqs = [seqs]
        if isinstance(seqs, (list, tuple)):
            longest = max(q.num_patches for q in seqs)
            if longest > cfg.seq_len:
                raise ShapeError(f"sequence length {longest} exceeds seq_len {cfg.seq_len}")
            return stack_sequences(seqs, longest)
        patches = np.asarray(seqs)
        if patches.ndim == 3:
            patches = patches[None]
            mask = None if mask is None else np.asarray(mask)[None]
        if patches.ndim != 4:
            raise ShapeError(f"expected (batch, seq, freq, frames) patches, got {patches.shape}")
        b, s = patches.shape[:2]
        if mask is None:
            if s != cfg.seq_len:
                raise ShapeError(f"sequence length {s} != seq_len {cfg.seq_len} and no mask given")
            mask = np.ones((b, s), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if s > cfg.seq_len:
            raise ShapeError(f"sequence length {s} exceeds seq_len {cfg.seq_len}")
        if mask.shape != (b, s):
            raise ShapeError(f"mask shape {mask.shape} does not match patches {(b, s)}")
        return patches, mask

    def forward(self, seqs, mask=None, training: bool = False, capture: dict | None = None) -> Tensor:
        """Logits ``(batch, num_classes)``.

        ``seqs`` is a PatchSequence, a list of them, or an array
        ``(batch, seq, freq, frames)`` with an optional boolean ``mask``.
        Only unmasked patches are embedded, so padding never touches the
        batch-norm statistics.  Sequences shorter than ``seq_len`` are not
        padded further: masked keys receive exactly zero attention weight, so
        the result equals the fully padded computation.  ``capture`` receives the first ConvNet
        normalisation output (``conv_norm``) and the first encoder
        normalisation output (``encoder_norm``) with gradients retained.
        """
        cfg = self.config
        P = self.params
        patches, mask = self._batch(seqs, mask)
        b, s, f, t = patches.shape
        dtype = P["head.weight"].dtype
        flat_mask = mask.reshape(-1)
        real = np.flatnonzero(flat_mask)
        x = Tensor(patches.reshape(b * s, 1, f, t)[real], dtype=dtype)
        if capture is not None:
            capture["real_index"] = real
            capture["input_shape"] = (b, s, f, t)
        emb = embed_patches(P, self.buffers, x, training, "embed", cfg.pool_size, capture)
        emb = ad.reshape(ad.scatter(emb, real, b * s), (b, s, cfg.embed_dim))
        cls = ad.add(Tensor(np.zeros((b, 1, cfg.embed_dim), dtype)), P["cls_token"])
        h = ad.add(ad.concat([cls, emb], axis=1), ad.slice(P["pos_embed"], np.s_[: s + 1]))

        keep = np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1)
        attn_bias = np.where(keep, 0.0, -1e9).astype(dtype)[:, None, None, :]
        for layer in range(cfg.num_layers):
            p = f"encoder.{layer}"
            hn = ad.layernorm(h, P[p + ".norm1.weight"], P[p + ".norm1.bias"])
            if capture is not None and layer == 0:
                capture["encoder_norm"] = hn.retain_grad()
            h = ad.add(h, self._attention(hn, attn_bias, p))
            hn = ad.layernorm(h, P[p + ".norm2.weight"], P[p + ".norm2.bias"])
            ff = ad.relu(ad.linear(hn, P[p + ".ffn.fc1.weight"], P[p + ".ffn.fc1.bias"]))
            h = ad.add(h, ad.linear(ff, P[p + ".ffn.fc2.weight"], P[p + ".ffn.fc2.bias"]))
        h = ad.layernorm(h, P["norm.weight"], P["norm.bias"])
        cls_out = ad.slice(h, (np.s_[:], 0))
        return ad.linear(cls_out, P["head.weight"], P["head.bias"])

    __call__ = forward

    def _attention(self, x: Tensor, bias: np.ndarray, prefix: str) -> Tensor:
        cfg = self.config
        P = self.params
        b, n, d = x.shape
        nh = cfg.num_heads
        dh = d // nh
        qkv = ad.linear(x, P[prefix + ".attn.qkv.weight"], P[prefix + ".attn.qkv.bias"])
        qkv = ad.transpose(ad.reshape(qkv, (b, n, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = (ad.slice(qkv, i) for i in range(3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ad.softmax(ad.add(scores, Tensor(bias)), axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return ad.linear(ctx, P[prefix + ".attn.out.weight"], P[prefix + ".attn.out.bias"])


def predict(logits, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Multi-hot labels (strict ``sigmoid > threshold``) and sigmoid scores."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    scores = np.exp(-np.logaddexp(0, -z))
    return scores > threshold, scores


def param_count(model) -> int:
    return int(sum(t.size for t in model.params.values()))


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"BATC"
_VERSION = 1


def save_checkpoint(model: BatModel, path) -> None:
    """Write parameters and batch-norm buffers as little-endian float32 records."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, arr in model.state().items():
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read(f, n: int) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise CheckpointError("checkpoint is truncated")
    return chunk


def load_checkpoint(path, model_cls=None) -> BatModel:
    data = Path(path).read_bytes()
    f = io.BytesIO(data)
    if _read(f, 4) != _MAGIC:
        raise CheckpointError(f"{path}: not a BATC checkpoint")
    (version,) = struct.unpack("<I", _read(f, 4))
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _read(f, 4))
    try:
        cfg = BatConfig(**json.loads(_read(f, n)))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config record: {exc}") from None
    state = {}
    while f.tell() < len(data):
        (n,) = struct.unpack("<I", _read(f, 4))
        name = _read(f, n).decode()
        (rank,) = struct.unpack("<I", _read(f, 4))
        dims = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    model = (model_cls or BatModel)(cfg)
    missing = (set(model.params) | set(model.buffers)) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing records {sorted(missing)[:3]}")
    model.load_state(state)
    return model
