"""Offline pseudo-labeling: MFCC-style features plus a k-means codebook.

Clean sources are clustered into K classes; label id K is reserved for the
silence token assigned to absent-speaker slots.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.fftpack import dct

from .audio import AudioClip
from .errors import ConfigError, FeatureError, InsufficientDataError

CODEBOOK_MAGIC = b"SAWL-KM1"
LOG_FLOOR = 1e-10


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    window: int = 400  # 25 ms
    hop: int = 320  # 20 ms -> 50 frames/s
    n_fft: int = 512
    n_mels: int = 26
    n_ceps: int = 13
    delta_width: int = 2

    @property
    def dim(self) -> int:
        return 3 * self.n_ceps


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.window:
        raise FeatureError(
            f"clip of {n_samples} samples shorter than one {cfg.window}-sample window"
        )
    return (n_samples - cfg.window) // cfg.hop + 1


_FBANK_CACHE: dict = {}


def _mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels)
    cached = _FBANK_CACHE.get(key)
    if cached is not None:
        return cached

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    low, high = hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0)
    mel_points = np.linspace(low, high, cfg.n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bins = np.floor((cfg.n_fft + 1) * hz_points / cfg.sample_rate).astype(int)
    fbank = np.zeros((cfg.n_mels, cfg.n_fft // 2 + 1))
    for m in range(1, cfg.n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fbank[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fbank[m - 1, k] = (right - k) / (right - center)
    _FBANK_CACHE[key] = fbank
    return fbank


def _delta(feat: np.ndarray, width: int) -> np.ndarray:
    """Regression deltas with edge replication."""
    denom = 2 * sum(n * n for n in range(1, width + 1))
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    out = np.zeros_like(feat)
    for n in range(1, width + 1):
        out += n * (padded[width + n : width + n + len(feat)] - padded[width - n : width - n + len(feat)])
    return out / denom


def frame_spectral_features(audio: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    """13 MFCCs + deltas + delta-deltas at 50 frames/s, shape (T, 39)."""
    x = audio.samples
    T = frame_count(len(x), cfg)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(T)[:, None]
    frames = x[idx] * np.hamming(cfg.window)[None, :]
    spec = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = spec @ _mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    # c1..c13: excluding c0 keeps the features invariant to signal gain
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, 1 : cfg.n_ceps + 1]
    d1 = _delta(ceps, cfg.delta_width)
    d2 = _delta(d1, cfg.delta_width)
    return np.concatenate([ceps, d1, d2], axis=1)


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, F)
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def silence_id(self) -> int:
        return self.k

    @property
    def vocab_size(self) -> int:
        return self.k + 1


def _kmeans_pp_init(feats: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(feats)
    centers = np.empty((k, feats.shape[1]))
    centers[0] = feats[int(rng.integers(n))]
    d2 = np.sum((feats - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = feats[int(rng.integers(n))]
        else:
            centers[i] = feats[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((feats - centers[i]) ** 2, axis=1))
    return centers


def _assign(feats: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin breaks ties toward the lower centroid index
    d2 = (
        np.sum(feats**2, axis=1, keepdims=True)
        - 2.0 * feats @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def fit_codebook(
    features: np.ndarray,
    k: int,
    seed: int,
    feature_cfg: FeatureConfig | None = None,
    max_iter: int = 100,
) -> Codebook:
    """K-means with k-means++ init; stops when assignments are unchanged."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ConfigError("features must be a 2-D (frames, dim) array")
    if len(np.unique(feats, axis=0)) < k:
        raise InsufficientDataError(
            f"need at least {k} distinct frames to fit {k} clusters"
        )
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(feats, k, rng)
    assignment = _assign(feats, centroids)
    for _ in range(max_iter):
        for j in range(k):
            members = feats[assignment == j]
            if len(members) == 0:
                # empty-cluster repair: split the largest cluster at its
                # farthest member
                counts = np.bincount(assignment, minlength=k)
                big = int(np.argmax(counts))
                big_feats = feats[assignment == big]
                far = np.argmax(np.sum((big_feats - centroids[big]) ** 2, axis=1))
                centroids[j] = big_feats[far]
            else:
                centroids[j] = members.mean(axis=0)
        new_assignment = _assign(feats, centroids)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return Codebook(centroids, feature_cfg or FeatureConfig())


@dataclass
class PseudoLabelSeq:
    labels: np.ndarray  # (T,) int, values in [0, K]

    def __len__(self):
        return len(self.labels)


def _align_length(labels: np.ndarray, target_frames: int) -> np.ndarray:
    diff = target_frames - len(labels)
    if abs(diff) > 2:
        raise ConfigError(
            f"label/frame count mismatch of {abs(diff)} frames exceeds the "
            "trim/pad tolerance of 2"
        )
    if diff > 0:
        labels = np.concatenate([labels, np.repeat(labels[-1], diff)])
    elif diff < 0:
        labels = labels[:target_frames]
    return labels


def assign_labels(
    clean: AudioClip,
    codebook: Codebook,
    target_frames: int | None = None,
) -> PseudoLabelSeq:
    """Nearest-centroid labels for a clean clip, aligned to the model frame count."""
    feats = frame_spectral_features(clean, codebook.feature_cfg)
    if feats.shape[1] != codebook.centroids.shape[1]:
        raise ConfigError(
            f"feature dim {feats.shape[1]} does not match codebook dim "
            f"{codebook.centroids.shape[1]}"
        )
    labels = _assign(feats, codebook.centroids).astype(np.int64)
    if target_frames is not None:
        labels = _align_length(labels, target_frames)
    return PseudoLabelSeq(labels)


def silence_labels(t: int, codebook: Codebook) -> PseudoLabelSeq:
    """All-silence sequence for an absent or synthetic speaker slot."""
    if t <= 0:
        raise ConfigError(f"frame count must be positive, got {t}")
    return PseudoLabelSeq(np.full(t, codebook.silence_id, dtype=np.int64))


def save_codebook(path: str, codebook: Codebook) -> None:
    """Binary layout: magic, K and F as LE uint32, K*F LE float64, JSON trailer."""
    k, f = codebook.centroids.shape
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<II", k, f))
        fh.write(codebook.centroids.astype("<f8").tobytes())
        fh.write(json.dumps(asdict(codebook.feature_cfg)).encode("utf-8"))


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as fh:
        magic = fh.read(len(CODEBOOK_MAGIC))
        if magic != CODEBOOK_MAGIC:
            raise ConfigError(f"{path}: bad codebook magic {magic!r}")
        k, f = struct.unpack("<II", fh.read(8))
        centroids = np.frombuffer(fh.read(8 * k * f), dtype="<f8").reshape(k, f)
        cfg = FeatureConfig(**json.loads(fh.read().decode("utf-8")))
    return Codebook(centroids.copy(), cfg)


def save_labels(path: str, seq: PseudoLabelSeq) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(int(v)) for v in seq.labels) + "\n")


def load_labels(path: str) -> PseudoLabelSeq:
    with open(path, encoding="utf-8") as fh:
        return PseudoLabelSeq(np.array([int(line) for line in fh if line.strip()]))
