"""Datasets: manifests, splits, sequence extraction, mixing and a synthetic corpus.

Recordings are cut into sequence windows in the time domain first; each
window is then turned into a normalised patch sequence.  Keeping the window
waveforms around lets the mixing stream add recordings before the
spectrogram is taken.
"""

from __future__ import annotations

import io
import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import (
    AudioClip,
    Spectrogram,
    denoise,
    log_compress,
    prefilter,
    read_wav,
    stft_spectrogram,
    write_wav,
)
from .model import PatchSequence, embed_patches, init_embedder, slice_patches

__all__ = [
    "MAX_SPECIES",
    "SPLITS",
    "ManifestError",
    "CacheError",
    "ManifestEntry",
    "DatasetManifest",
    "split_dataset",
    "FeatureConfig",
    "sequence_windows",
    "get_sequences",
    "Segment",
    "recording_segments",
    "sequence_features",
    "SequenceSet",
    "load_recording_sequences",
    "build_sequence_sets",
    "labels_to_bits",
    "bits_to_labels",
    "write_cache",
    "read_cache",
    "detect_peaks",
    "get_individuals",
    "CallClassifier",
    "train_call_classifier",
    "MixedSample",
    "mix_samples",
    "SequenceStream",
    "MixedBatchStream",
    "mixed_batch_stream",
    "SynthSpecies",
    "SynthClip",
    "species_table",
    "synth_call",
    "synth_clip",
    "synth_chirp_dataset",
]

MAX_SPECIES = 18
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


class CacheError(ValueError):
    pass


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    path: str
    species: int
    split: str = "train"
    time_expansion: float = 10.0


@dataclass
class DatasetManifest:
    species: list
    entries: list
    root: Path | None = None

    def __post_init__(self):
        n = len(self.species)
        for e in self.entries:
            if not 0 <= e.species < n:
                raise ManifestError(f"{e.path}: species id {e.species} outside 0..{n - 1}")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.path}: unknown split tag {e.split!r}")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def to_dict(self) -> dict:
        return {
            "species": list(self.species),
            "entries": [
                {"path": e.path, "species": e.species, "split": e.split, "time_expansion": e.time_expansion}
                for e in self.entries
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            entries = [
                ManifestEntry(str(e["path"]), int(e["species"]), e.get("split", "train"), float(e.get("time_expansion", 10.0)))
                for e in raw["entries"]
            ]
            species = list(raw["species"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: {exc}") from None
        return cls(species, entries, path.parent)


def split_dataset(manifest: DatasetManifest, fractions=(0.6, 0.25, 0.15), seed: int = 0) -> DatasetManifest:
    """Assign train/test/val tags per recording, stratified by species.

    ``fractions`` is ``(train, test, val)``.  Counts per species are the
    largest-remainder rounding of ``fraction * n``.  Species with fewer than
    three recordings go entirely to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    tags = ("train", "test", "val")
    entries = [ManifestEntry(e.path, e.species, e.split, e.time_expansion) for e in manifest.entries]
    for sp in range(len(manifest.species)):
        idx = [i for i, e in enumerate(entries) if e.species == sp]
        if not idx:
            continue
        if len(idx) < 3:
            warnings.warn(f"species {manifest.species[sp]!r} has {len(idx)} recordings; all assigned to train")
            for i in idx:
                entries[i].split = "train"
            continue
        exact = np.array(fractions) * len(idx)
        counts = np.floor(exact).astype(int)
        rest = len(idx) - counts.sum()
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:rest]] += 1
        perm = rng.permutation(idx)
        pos = 0
        for tag, c in zip(tags, counts):
            for i in perm[pos : pos + c]:
                entries[i].split = tag
            pos += c
    return DatasetManifest(list(manifest.species), entries, manifest.root)


# ---------------------------------------------------------------- features


@dataclass
class FeatureConfig:
    cutoff_hz: float = 1500.0
    filter_order: int = 10
    target_rate: int = 22050
    n_fft: int = 512
    hop: int = 128
    patch_frames: int = 44
    patch_overlap: int = 22
    seq_len: int = 60
    seq_overlap: int = 15
    min_patches: int = 8

    def __post_init__(self):
        if not 0 <= self.seq_overlap < self.seq_len:
            raise ValueError("seq_overlap must lie in [0, seq_len)")
        if not 0 <= self.patch_overlap < self.patch_frames:
            raise ValueError("patch_overlap must lie in [0, patch_frames)")

    @property
    def patch_stride(self) -> int:
        return self.patch_frames - self.patch_overlap

    @property
    def seq_stride(self) -> int:
        return self.seq_len - self.seq_overlap

    def frames_for(self, patches: int) -> int:
        return (patches - 1) * self.patch_stride + self.patch_frames

    def samples_for(self, patches: int) -> int:
        return (self.frames_for(patches) - 1) * self.hop + self.n_fft

    def patches_in(self, num_samples: int) -> int:
        if num_samples < self.n_fft:
            return 0
        frames = 1 + (num_samples - self.n_fft) // self.hop
        return 0 if frames < self.patch_frames else 1 + (frames - self.patch_frames) // self.patch_stride


def sequence_windows(num_patches: int, seq_len: int = 60, seq_overlap: int = 15, min_patches: int = 8) -> list:
    """``(first_patch, count)`` of every sequence window over ``num_patches`` patches.

    Full windows advance by ``seq_len - seq_overlap``.  A trailing window
    that is not full is kept when it holds at least ``min_patches`` patches;
    a recording shorter than one window is a single short window.
    """
    stride = seq_len - seq_overlap
    out = []
    start = 0
    while start < num_patches:
        count = min(seq_len, num_patches - start)
        if count == seq_len or count >= min_patches:
            out.append((start, count))
        if start + seq_len >= num_patches:
            break
        start += stride
    return out


def get_sequences(
    spec: Spectrogram | np.ndarray,
    seq_len: int = 60,
    seq_overlap: int = 15,
    patch_frames: int = 44,
    patch_overlap: int = 22,
    min_patches: int = 8,
) -> list:
    """Group the patches of a spectrogram into (padded, masked) sequences."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if values.shape[1] < patch_frames:
        return []
    patches = slice_patches(values, patch_frames, patch_overlap).patches
    stride = patch_frames - patch_overlap
    out = []
    for start, count in sequence_windows(len(patches), seq_len, seq_overlap, min_patches):
        seq = PatchSequence(patches[start : start + count], start_frame=start * stride, meta={"first_patch": start})
        out.append(seq.padded(seq_len))
    return out


@dataclass
class Segment:
    first_patch: int
    num_patches: int
    start_sample: int
    samples: np.ndarray


def recording_segments(clip: AudioClip, cfg: FeatureConfig | None = None) -> list:
    """Time-domain excerpts covering each sequence window of a prefiltered recording."""
    cfg = cfg or FeatureConfig()
    x = clip.samples
    out = []
    for start, count in sequence_windows(cfg.patches_in(len(x)), cfg.seq_len, cfg.seq_overlap, cfg.min_patches):
        s0 = start * cfg.patch_stride * cfg.hop
        out.append(Segment(start, count, s0, x[s0 : s0 + cfg.samples_for(count)].copy()))
    return out


def sequence_features(samples, cfg: FeatureConfig | None = None, sample_rate: float | None = None) -> PatchSequence:
    """Waveform excerpt -> denoised, log-compressed, max-normalised patch sequence."""
    cfg = cfg or FeatureConfig()
    spec = stft_spectrogram(np.asarray(samples, dtype=np.float64), cfg.n_fft, cfg.hop, sample_rate or cfg.target_rate)
    values = log_compress(denoise(spec).values)
    peak = values.max()
    if peak > 0:
        values = values / peak
    seq = slice_patches(values.astype(np.float32), cfg.patch_frames, cfg.patch_overlap)
    if seq.num_patches > cfg.seq_len:
        raise ad.ShapeError(f"excerpt yields {seq.num_patches} patches, more than seq_len={cfg.seq_len}")
    return seq


# ---------------------------------------------------------------- sequence sets


@dataclass
class SequenceSet:
    """Real patches, multi-hot labels and provenance of a collection of sequences."""

    patches: list
    labels: np.ndarray
    source_ids: list
    waveforms: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.labels.ndim != 2 or len(self.labels) != len(self.patches) or len(self.source_ids) != len(self.patches):
            raise ValueError("patches, labels and source ids must have matching lengths")
        if self.waveforms is not None and len(self.waveforms) != len(self.patches):
            raise ValueError("one waveform per sequence is required")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def recordings(self) -> set:
        return {sid.rsplit(":", 1)[0] for sid in self.source_ids}

    def concat(self, other: "SequenceSet") -> "SequenceSet":
        waves = None
        if self.waveforms is not None and other.waveforms is not None:
            waves = self.waveforms + other.waveforms
        return SequenceSet(
            self.patches + other.patches,
            np.concatenate([self.labels, other.labels]),
            self.source_ids + other.source_ids,
            waves,
        )

    @classmethod
    def empty(cls, num_classes: int, with_waveforms: bool = True) -> "SequenceSet":
        return cls([], np.zeros((0, num_classes), bool), [], [] if with_waveforms else None)


def load_recording_sequences(path, time_expansion: float, cfg: FeatureConfig | None = None):
    """Read, prefilter and cut one recording into ``(segments, sequences)``."""
    cfg = cfg or FeatureConfig()
    clip = prefilter(read_wav(path, time_expansion), cfg.cutoff_hz, cfg.target_rate, cfg.filter_order, 10.0)
    segs = recording_segments(clip, cfg)
    return segs, [sequence_features(s.samples, cfg, clip.sample_rate) for s in segs]


def build_sequence_sets(manifest: DatasetManifest, cfg: FeatureConfig | None = None, threads: int = 1):
    """Run the feature pipeline over every manifest entry.

    Returns ``(sets, missing)``: one SequenceSet per split (in manifest
    order) and the list of ``(path, error)`` pairs that could not be read.
    """
    cfg = cfg or FeatureConfig()
    num_classes = len(manifest.species)

    def work(entry):
        try:
            return load_recording_sequences(manifest.resolve(entry), entry.time_expansion, cfg), None
        except (OSError, ValueError) as exc:
            return None, f"{exc}"

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, manifest.entries))
    else:
        results = [work(e) for e in manifest.entries]

    sets = {name: SequenceSet.empty(num_classes) for name in SPLITS}
    missing = []
    for entry, (res, err) in zip(manifest.entries, results):
        if res is None:
            missing.append((entry.path, err))
            continue
        label = np.zeros(num_classes, bool)
        label[entry.species] = True
        target = sets[entry.split]
        for j, (seg, seq) in enumerate(zip(*res)):
            target.patches.append(seq.patches)
            target.waveforms.append(seg.samples.astype(np.float32))
            target.source_ids.append(f"{entry.path}:{j}")
            target.labels = np.concatenate([target.labels, label[None]])
    return sets, missing


def labels_to_bits(label) -> int:
    idx = np.flatnonzero(np.asarray(label, dtype=bool))
    if idx.size and idx.max() >= 32:
        raise CacheError("label bitmask holds at most 32 classes")
    return int(sum(1 << int(i) for i in idx))


def bits_to_labels(bits: int, num_classes: int) -> np.ndarray:
    return np.array([(bits >> i) & 1 for i in range(num_classes)], dtype=bool)


_CACHE_MAGIC = b"BATD"
_CACHE_VERSION = 1


def write_cache(path, records: SequenceSet, waveforms: bool = False) -> None:
    """Write patch sequences (or, with ``waveforms``, the excerpts) as a BATD file.

    Waveform records use dims ``(1, 1, num_samples)``.
    """
    buf = io.BytesIO()
    buf.write(_CACHE_MAGIC)
    buf.write(struct.pack("<II", _CACHE_VERSION, len(records)))
    items = records.waveforms if waveforms else records.patches
    if items is None:
        raise CacheError("sequence set carries no waveforms")
    for sid, label, arr in zip(records.source_ids, records.labels, items):
        arr = np.asarray(arr, dtype="<f4")
        if waveforms:
            arr = arr.reshape(1, 1, -1)
        if arr.ndim != 3:
            raise CacheError(f"{sid}: record must be 3-d, got {arr.shape}")
        key = sid.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", labels_to_bits(label)))
        buf.write(struct.pack("<3I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_cache(path, num_classes: int, waveforms=None) -> SequenceSet:
    """Load a BATD patch cache, optionally pairing it with a waveform cache."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _CACHE_MAGIC:
        raise CacheError(f"{path}: not a BATD cache")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    pos = 12
    ids, labels, arrays = [], [], []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids.append(data[pos : pos + n].decode())
            pos += n
            (bits,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from("<3I", data, pos + 4)
            pos += 16
            size = 4 * dims[0] * dims[1] * dims[2]
            if pos + size > len(data):
                raise CacheError(f"{path}: truncated record {ids[-1]!r}")
            arrays.append(np.frombuffer(data, "<f4", size // 4, pos).reshape(dims).astype(np.float32))
            pos += size
            labels.append(bits_to_labels(bits, num_classes))
    except struct.error:
        raise CacheError(f"{path}: truncated cache") from None
    if pos != len(data):
        raise CacheError(f"{path}: {len(data) - pos} trailing bytes")
    labels = np.array(labels, dtype=bool).reshape(-1, num_classes)
    waves = None
    if waveforms is not None:
        w = read_cache(waveforms, num_classes)
        if w.source_ids != ids:
            raise CacheError(f"{waveforms}: records do not match {path}")
        waves = [a.reshape(-1) for a in w.patches]
    return SequenceSet(arrays, labels, ids, waves)


# ---------------------------------------------------------------- individual calls


def detect_peaks(spec: Spectrogram | np.ndarray, window: int = 22, wait: int = 22, delta: float | None = None) -> list:
    """Frames whose column-mean energy is a local maximum above ``mean + delta``.

    ``delta`` defaults to twice the median absolute deviation of the energy
    track.  An accepted peak suppresses further peaks for ``wait`` frames.
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    energy = values.mean(axis=0)
    if energy.size == 0:
        return []
    if delta is None:
        delta = 2.0 * float(np.median(np.abs(energy - np.median(energy))))
    level = energy.mean() + delta
    padded = np.pad(energy, window, constant_values=-np.inf)
    local_max = np.lib.stride_tricks.sliding_window_view(padded, 2 * window + 1).max(axis=1)
    peaks = []
    for i in np.flatnonzero((energy >= local_max) & (energy > level)):
        if not peaks or i - peaks[-1] >= wait:
            peaks.append(int(i))
    return peaks


def get_individuals(spec: Spectrogram | np.ndarray, call_classifier=None, patch_frames: int = 44, **peak_args) -> list:
    """One ``patch_frames``-wide patch centred on every detected peak.

    Windows that would cross an edge are shifted inward.  With a
    classifier, patches whose call probability is at most 0.5 are dropped.
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    frames = values.shape[1]
    if frames < patch_frames:
        return []
    patches = []
    for p in detect_peaks(values, **peak_args):
        start = min(max(p - patch_frames // 2, 0), frames - patch_frames)
        patches.append(values[:, start : start + patch_frames])
    if call_classifier is not None and patches:
        keep = call_classifier.predict_proba(np.stack(patches)) > 0.5
        patches = [p for p, k in zip(patches, keep) if k]
    return patches


class CallClassifier:
    """Small ConvNet scoring a single patch as call (1) or not (0)."""

    def __init__(self, dim: int = 64, widths=(8, 16, 32), pool=(4, 2), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.pool = tuple(pool)
        self.params: dict = {}
        self.buffers: dict = {}
        init_embedder(rng, self.params, self.buffers, "embed", dim, widths, pool)
        bound = np.sqrt(6.0 / dim)
        self.params["head.weight"] = Tensor(rng.uniform(-bound, bound, (dim, 1)).astype(np.float32), True, "head.weight")
        self.params["head.bias"] = Tensor(np.zeros(1, np.float32), True, "head.bias")

    def parameters(self) -> list:
        return list(self.params.values())

    @staticmethod
    def _normalise(patches) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float32)
        peak = x.reshape(len(x), -1).max(axis=1)
        return x / np.where(peak > 0, peak, 1.0)[:, None, None]

    def logits(self, patches, training: bool = False) -> Tensor:
        x = self._normalise(patches)
        x = Tensor(x[:, None])
        emb = embed_patches(self.params, self.buffers, x, training, "embed", self.pool)
        out = ad.linear(emb, self.params["head.weight"], self.params["head.bias"])
        return ad.reshape(out, (len(patches),))

    def predict_proba(self, patches) -> np.ndarray:
        with ad.no_record():
            z = self.logits(patches).data.astype(np.float64)
        return np.exp(-np.logaddexp(0.0, -z))


def train_call_classifier(
    call_patches, noise_patches, epochs: int = 15, batch_size: int = 32, lr: float = 1e-3, seed: int = 0
) -> CallClassifier:
    """Fit a CallClassifier with binary cross-entropy and Adam."""
    from .training import Adam, AslConfig, asymmetric_loss

    calls = np.asarray(call_patches, dtype=np.float32)
    noise = np.asarray(noise_patches, dtype=np.float32)
    if len(calls) == 0 or len(noise) == 0:
        raise ValueError("both call and noise patches are required")
    x = np.concatenate([calls, noise])
    y = np.concatenate([np.ones(len(calls)), np.zeros(len(noise))]).astype(np.float32)
    clf = CallClassifier(seed=seed)
    opt = Adam(clf.parameters(), lr)
    bce = AslConfig(0.0, 0.0, 0.0)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                idx = order[max(0, i - 1) : i + 1] if len(order) > 1 else idx
            ad.zero_grad(clf.parameters())
            with ad.Graph():
                z = clf.logits(x[idx], training=True)
                loss = asymmetric_loss(ad.sigmoid(z), y[idx], bce)
                ad.backward(loss)
            opt.step()
    return clf


# ---------------------------------------------------------------- mixing


@dataclass
class MixedSample:
    waveform: AudioClip
    label: np.ndarray
    k: int


def mix_samples(clips, labels) -> MixedSample:
    """Average 1-3 recordings (zero-padded to the longest); labels are OR-ed."""
    clips = list(clips)
    labels = [np.asarray(l, dtype=bool) for l in labels]
    k = len(clips)
    if not 1 <= k <= 3:
        raise ValueError(f"between one and three clips can be mixed, got {k}")
    if len(labels) != k:
        raise ValueError("one label vector per clip is required")
    rates = {c.sample_rate for c in clips}
    if len(rates) != 1:
        raise ValueError(f"clips have different sample rates: {sorted(rates)}")
    n = max(len(c.samples) for c in clips)
    total = np.zeros(n)
    peak = 0.0
    for c in clips:
        total[: len(c.samples)] += c.samples
        peak = max(peak, float(np.max(np.abs(c.samples), initial=0.0)))
    # the clip only removes last-ulp rounding from the division
    out = np.clip(total / k, -peak, peak)
    label = np.logical_or.reduce(labels)
    return MixedSample(AudioClip(out, clips[0].sample_rate, clips[0].time_expansion), label, k)


def _stack(patch_list, labels) -> tuple:
    longest = max(len(p) for p in patch_list)
    shape = (len(patch_list), longest) + patch_list[0].shape[1:]
    batch = np.zeros(shape, np.float32)
    mask = np.zeros(shape[:2], bool)
    for i, p in enumerate(patch_list):
        batch[i, : len(p)] = p
        mask[i, : len(p)] = True
    return batch, mask, np.asarray(labels, dtype=np.float32)


class SequenceStream:
    """Batches of stored sequences; reshuffled per epoch when ``shuffle`` is set."""

    def __init__(self, data: SequenceSet, batch_size: int = 32, shuffle: bool = False, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.data = data
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed

    @property
    def num_batches(self) -> int:
        return math.ceil(len(self.data) / self.batch_size)

    def batches(self, epoch: int = 0):
        n = len(self.data)
        order = np.random.default_rng([self.seed, epoch]).permutation(n) if self.shuffle else np.arange(n)
        for i in range(0, n, self.batch_size):
            idx = order[i : i + self.batch_size]
            yield _stack([self.data.patches[j] for j in idx], self.data.labels[idx])

    def __iter__(self):
        return self.batches(0)


class MixedBatchStream:
    """Freshly mixed batches drawn from the sequence excerpts of one split.

    Per sample, ``k`` is drawn from ``k_choices`` (uniform unless
    ``k_probs`` is given) and ``k`` excerpts are drawn with replacement.
    The mix is converted to features after summation.  Epoch ``e`` uses
    the generator seeded with ``(seed, e)``; with ``fixed`` every epoch
    repeats epoch 0, which is what validation and test sets need.
    """

    def __init__(
        self,
        pool: SequenceSet,
        batch_size: int = 32,
        k_choices=(1, 2, 3),
        k_probs=None,
        seed: int = 0,
        num_samples: int | None = None,
        cfg: FeatureConfig | None = None,
        fixed: bool = False,
    ):
        if len(pool) == 0:
            raise ValueError("cannot mix from an empty split")
        if pool.waveforms is None:
            raise ValueError("mixing needs the waveform excerpts of the split")
        if any(not 1 <= k <= 3 for k in k_choices):
            raise ValueError("k must lie in 1..3")
        self.pool = pool
        self.batch_size = batch_size
        self.k_choices = tuple(int(k) for k in k_choices)
        self.k_probs = None if k_probs is None else np.asarray(k_probs, dtype=float)
        self.seed = seed
        self.num_samples = len(pool) if num_samples is None else int(num_samples)
        self.cfg = cfg or FeatureConfig()
        self.fixed = fixed

    @property
    def num_batches(self) -> int:
        return math.ceil(self.num_samples / self.batch_size)

    def samples(self, epoch: int = 0):
        """Yield ``(MixedSample, source indices)`` for one epoch."""
        rng = np.random.default_rng([self.seed, 0 if self.fixed else epoch])
        rate = self.cfg.target_rate
        for _ in range(self.num_samples):
            k = int(rng.choice(self.k_choices, p=self.k_probs))
            idx = rng.integers(0, len(self.pool), size=k)
            clips = [AudioClip(self.pool.waveforms[i].astype(np.float64), rate) for i in idx]
            yield mix_samples(clips, [self.pool.labels[i] for i in idx]), idx

    def batches(self, epoch: int = 0):
        patches, labels = [], []
        for sample, _ in self.samples(epoch):
            patches.append(sequence_features(sample.waveform.samples, self.cfg, self.cfg.target_rate).patches)
            labels.append(sample.label)
            if len(patches) == self.batch_size:
                yield _stack(patches, labels)
                patches, labels = [], []
        if patches:
            yield _stack(patches, labels)

    def __iter__(self):
        return self.batches(0)


def mixed_batch_stream(pool: SequenceSet, batch_size: int = 32, k_distribution=None, seed: int = 0, **kwargs):
    """Iterator over one epoch of mixed ``(patches, mask, labels)`` batches.

    ``k_distribution`` maps k to a probability; the default is uniform over 1..3.
    """
    if k_distribution is None:
        choices, probs = (1, 2, 3), None
    else:
        choices = tuple(sorted(k_distribution))
        probs = [k_distribution[k] for k in choices]
    return MixedBatchStream(pool, batch_size, choices, probs, seed, **kwargs).batches(0)


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SynthSpecies:
    name: str
    f_low: float  # real-time Hz
    f_high: float
    sweep: str = "linear"


@dataclass
class SynthClip:
    samples: np.ndarray
    clean: np.ndarray
    calls: list = field(default_factory=list)  # (start, end) in real-time seconds
    snr_db: float = 20.0


def species_table(num_species: int, f_min: float = 20e3, f_max: float = 95e3, gap: float = 2e3, max_width: float = 10e3) -> list:
    """Evenly spaced, non-overlapping real-frequency bands, ``gap`` apart at least."""
    if not 1 <= num_species <= MAX_SPECIES:
        raise ValueError(f"num_species must lie in 1..{MAX_SPECIES}, got {num_species}")
    slot = (f_max - f_min) / num_species
    width = min(max_width, slot - gap)
    out = []
    for s in range(num_species):
        lo = f_min + s * slot + (slot - gap - width) / 2
        out.append(SynthSpecies(f"sp{s:02d}", lo, lo + width, "linear" if s % 2 == 0 else "hyperbolic"))
    return out


def synth_call(f_start: float, f_end: float, duration: float, sample_rate: float, sweep: str = "linear") -> np.ndarray:
    """Unit-amplitude downward FM sweep with tapered ends (frequencies in the file's time base)."""
    n = max(int(round(duration * sample_rate)), 2)
    u = np.arange(n) / n
    if sweep == "linear":
        f = f_start + (f_end - f_start) * u
    elif sweep == "hyperbolic":
        f = 1.0 / (1.0 / f_start + (1.0 / f_end - 1.0 / f_start) * u)
    else:
        raise ValueError(f"unknown sweep shape {sweep!r}")
    phase = 2 * np.pi * np.cumsum(f) / sample_rate
    taper = np.ones(n)
    edge = max(n // 8, 1)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    taper[:edge] = ramp
    taper[n - edge :] = ramp[::-1]
    return np.sin(phase) * taper


def synth_clip(
    species: SynthSpecies,
    rng: np.random.Generator,
    duration: float = 0.12,
    sample_rate: int = 96000,
    time_expansion: float = 10.0,
    snr_db: float | None = None,
) -> SynthClip:
    """One time-expanded recording of a single species.

    ``duration`` is real time; the file holds ``duration * time_expansion``
    seconds at ``sample_rate``.  Call lengths follow N(25 ms, 5 ms) and
    onsets are spaced by N(111 ms, 20 ms), both in real time.
    """
    te = time_expansion
    n = int(round(duration * te * sample_rate))
    clean = np.zeros(n)
    calls = []
    width = species.f_high - species.f_low
    dur = float(np.clip(rng.normal(0.025, 0.005), 0.005, 0.8 * duration))
    t = rng.uniform(0.0, max(min(0.111, duration - dur), 0.0))
    while t < duration:
        hi = species.f_high - rng.uniform(0, 0.15) * width
        lo = species.f_low + rng.uniform(0, 0.15) * width
        call = rng.uniform(0.4, 1.0) * synth_call(hi / te, lo / te, dur * te, sample_rate, species.sweep)
        i0 = int(round(t * te * sample_rate))
        seg = call[: max(n - i0, 0)]
        clean[i0 : i0 + len(seg)] += seg
        calls.append((t, min(t + dur, duration)))
        t += max(rng.normal(0.111, 0.020), dur + 0.01)
        dur = float(np.clip(rng.normal(0.025, 0.005), 0.005, 0.8 * duration))
    snr = float(rng.uniform(10, 30)) if snr_db is None else float(snr_db)
    power = np.mean(clean**2)
    noisy = clean + rng.normal(0.0, np.sqrt(power / 10 ** (snr / 10)), n)
    scale = 0.9 / max(np.max(np.abs(noisy)), 1e-12)
    return SynthClip(noisy * scale, clean * scale, calls, snr)


def synth_chirp_dataset(
    out_dir,
    num_species: int = 4,
    clips_per_species: int = 100,
    seed: int = 0,
    clip_seconds: float = 0.12,
    sample_rate: int = 96000,
    time_expansion: float = 10.0,
    fractions=(0.6, 0.25, 0.15),
    threads: int = 1,
) -> DatasetManifest:
    """Write a synthetic chirp corpus (16-bit WAVs) plus ``manifest.json``.

    Every clip draws from its own generator seeded by ``(seed, species,
    index)``, so the corpus is identical regardless of ``threads``.
    """
    table = species_table(num_species)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(s, i) for s in range(num_species) for i in range(clips_per_species)]

    def work(job):
        s, i = job
        rng = np.random.default_rng([seed, s, i])
        clip = synth_clip(table[s], rng, clip_seconds, sample_rate, time_expansion)
        rel = f"{table[s].name}/{table[s].name}_{i:04d}.wav"
        (out / table[s].name).mkdir(exist_ok=True)
        write_wav(out / rel, clip.samples, sample_rate, bits=16)
        return ManifestEntry(rel, s, "train", time_expansion)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(work, jobs))
    else:
        entries = [work(j) for j in jobs]
    manifest = split_dataset(DatasetManifest([sp.name for sp in table], entries, out), fractions, seed)
    manifest.save(out / "manifest.json")
    return manifest
