"""Differentiable core: conv frame encoder, masking, conditional layer norm,
speaker-adapted transformer encoder, speaker merge block, dual prediction
heads, the summed masked-prediction loss, and the speaker shuffling strategy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateBatchError, ShapeError
from .labeler import Codebook, PseudoLabelSeq, silence_labels

# Counts per-slot CE evaluations; the loss scores each (head, slot) pairing
# exactly once, so this advances by 2 per batch (no permutation search).
CE_CALL_COUNTER = {"calls": 0}


def reset_ce_counter() -> None:
    CE_CALL_COUNTER["calls"] = 0


@dataclass
class ModelConfig:
    dim: int = 64  # D, frame feature dimension
    embed_dim: int = 32  # E, speaker embedding dimension
    layer_count: int = 4
    satl_layer_index: int = 1  # 1-based; which layer is speaker-adapted
    attention_heads: int = 4
    ffn_dim: int = 256
    k: int = 32  # codebook size; vocabulary is k+1 with the silence token
    mask_start_prob: float = 0.065
    mask_span: int = 10
    conv_kernels: tuple = (10, 8, 4, 4)
    conv_strides: tuple = (8, 5, 4, 2)
    conv_channels: tuple = ()  # empty -> all stages at `dim` channels

    def __post_init__(self):
        self.conv_kernels = tuple(self.conv_kernels)
        self.conv_strides = tuple(self.conv_strides)
        if not self.conv_channels:
            self.conv_channels = tuple([self.dim] * len(self.conv_kernels))
        else:
            self.conv_channels = tuple(self.conv_channels)
        if len(self.conv_kernels) != len(self.conv_strides) or len(
            self.conv_kernels
        ) != len(self.conv_channels):
            raise ConfigError("conv kernels/strides/channels lengths differ")
        if self.conv_channels[-1] != self.dim:
            raise ConfigError("last conv channel count must equal dim")
        if int(np.prod(self.conv_strides)) != 320:
            raise ConfigError("product of conv strides must be 320 (20 ms at 16 kHz)")
        if not (1 <= self.satl_layer_index <= self.layer_count):
            raise ConfigError(
                f"satl_layer_index {self.satl_layer_index} out of "
                f"[1, {self.layer_count}]"
            )

    @property
    def vocab_size(self) -> int:
        return self.k + 1

    def encoder_frames(self, n_samples: int) -> int:
        """Output frame count of the conv stack for an input length."""
        t = n_samples
        for kern, stride in zip(self.conv_kernels, self.conv_strides):
            t = (t - kern) // stride + 1
            if t < 1:
                raise ShapeError(
                    f"input of {n_samples} samples shorter than the conv receptive field"
                )
        return t

    @property
    def min_samples(self) -> int:
        """Smallest input length producing one frame."""
        t = 1
        for kern, stride in zip(
            reversed(self.conv_kernels), reversed(self.conv_strides)
        ):
            t = (t - 1) * stride + kern
        return t


def layer_norm(
    h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, epsilon: float
) -> torch.Tensor:
    """Per-frame normalization over the feature dimension (biased variance),
    followed by elementwise affine."""
    mean = h.mean(dim=-1, keepdim=True)
    var = h.var(dim=-1, unbiased=False, keepdim=True)
    return (h - mean) / torch.sqrt(var + epsilon) * gamma + beta


def cln(
    h: torch.Tensor,
    e: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    epsilon: float,
    w_proj: nn.Linear,
    theta_proj: nn.Linear,
) -> torch.Tensor:
    """Conditional layer norm: the scale becomes w(e)*gamma + theta(e)."""
    if e.shape[-1] != w_proj.in_features:
        raise ShapeError(
            f"embedding dim {e.shape[-1]} does not match projection input "
            f"{w_proj.in_features}"
        )
    mean = h.mean(dim=-1, keepdim=True)
    var = h.var(dim=-1, unbiased=False, keepdim=True)
    norm = (h - mean) / torch.sqrt(var + epsilon)
    scale = w_proj(e) * gamma + theta_proj(e)
    if h.dim() == 3 and scale.dim() == 2:
        scale = scale.unsqueeze(1)  # broadcast over time
    return norm * scale + beta


class FrameLayerNorm(nn.Module):
    """Unconditioned layer normalization."""

    def __init__(self, dim: int, epsilon: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.epsilon = epsilon

    def forward(self, h, e=None):
        return layer_norm(h, self.gamma, self.beta, self.epsilon)


class ConditionalLayerNorm(nn.Module):
    """Layer norm whose scale is modulated by a projected speaker embedding."""

    def __init__(self, dim: int, embed_dim: int, epsilon: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.epsilon = epsilon
        self.w_proj = nn.Linear(embed_dim, dim)
        self.theta_proj = nn.Linear(embed_dim, dim)

    def forward(self, h, e):
        if e is None:
            raise ConfigError("conditional layer norm requires a speaker embedding")
        return cln(h, e, self.gamma, self.beta, self.epsilon, self.w_proj, self.theta_proj)

    def collapse_to_plain(self) -> None:
        """Make conditioning a no-op: w(e) == 1, theta(e) == 0 for all e."""
        with torch.no_grad():
            self.w_proj.weight.zero_()
            self.w_proj.bias.fill_(1.0)
            self.theta_proj.weight.zero_()
            self.theta_proj.bias.zero_()


class TransformerLayer(nn.Module):
    """Pre-norm transformer block; conditioned=True swaps both norms for CLN."""

    def __init__(self, cfg: ModelConfig, conditioned: bool = False):
        super().__init__()
        self.conditioned = conditioned
        norm = (
            (lambda: ConditionalLayerNorm(cfg.dim, cfg.embed_dim))
            if conditioned
            else (lambda: FrameLayerNorm(cfg.dim))
        )
        self.norm1 = norm()
        self.norm2 = norm()
        self.attn = nn.MultiheadAttention(
            cfg.dim, cfg.attention_heads, batch_first=True
        )
        self.ffn = nn.Sequential(
            nn.Linear(cfg.dim, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.dim),
        )

    def forward(self, h: torch.Tensor, e: Optional[torch.Tensor] = None):
        if not torch.all(torch.isfinite(h)):
            raise ShapeError("non-finite input to transformer layer")
        x = self.norm1(h, e) if self.conditioned else self.norm1(h)
        attn_out, _ = self.attn(x, x, x, need_weights=False)
        h = h + attn_out
        x = self.norm2(h, e) if self.conditioned else self.norm2(h)
        return h + self.ffn(x)


class ConvFrameEncoder(nn.Module):
    """Strided conv stack with GELU; total stride 320 (20 ms at 16 kHz)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        in_ch = 1
        for kern, stride, out_ch in zip(
            cfg.conv_kernels, cfg.conv_strides, cfg.conv_channels
        ):
            layers.append(nn.Conv1d(in_ch, out_ch, kern, stride=stride))
            layers.append(nn.GELU())
            in_ch = out_ch
        self.stack = nn.Sequential(*layers)
        self.cfg = cfg

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, n_samples) -> (B, T, D)."""
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        if wave.shape[-1] < self.cfg.min_samples:
            raise ShapeError(
                f"input of {wave.shape[-1]} samples below the minimum "
                f"{self.cfg.min_samples}"
            )
        return self.stack(wave.unsqueeze(1)).transpose(1, 2)


@dataclass
class MaskSpec:
    """Boolean (B, T) mask of frame positions replaced by the mask embedding."""

    indices: np.ndarray

    @property
    def any_masked(self) -> bool:
        return bool(self.indices.any())


def apply_mask(
    h: torch.Tensor,
    rng: np.random.Generator,
    cfg: ModelConfig,
    mask_embedding: torch.Tensor,
):
    """Span masking: each frame starts a span of mask_span frames with
    probability mask_start_prob; masked rows are replaced by the embedding."""
    if cfg.mask_span <= 0:
        raise ConfigError(f"mask_span must be positive, got {cfg.mask_span}")
    squeeze = h.dim() == 2
    if squeeze:
        h = h.unsqueeze(0)
    b, t, _ = h.shape
    starts = rng.random((b, t)) < cfg.mask_start_prob
    mask = np.zeros((b, t), dtype=bool)
    for i in range(b):
        for s in np.nonzero(starts[i])[0]:
            mask[i, s : s + cfg.mask_span] = True
    mask_t = torch.from_numpy(mask)
    out = torch.where(mask_t.unsqueeze(-1), mask_embedding.to(h.dtype), h)
    if squeeze:
        out = out.squeeze(0)
    return out, MaskSpec(mask)


class PositionalConv(nn.Module):
    """Additive convolutional positional embedding over the frame axis."""

    def __init__(self, dim: int, kernel: int = 15):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + F.gelu(self.conv(h.transpose(1, 2))).transpose(1, 2)


class SpeakerAdaptedEncoder(nn.Module):
    """Transformer encoder with one speaker-adapted layer among vanilla ones."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_conv = PositionalConv(cfg.dim)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg, conditioned=(i + 1 == cfg.satl_layer_index))
            for i in range(cfg.layer_count)
        )

    def forward(
        self,
        h: torch.Tensor,
        e: torch.Tensor,
        return_all_layers: bool = False,
    ):
        h = self.pos_conv(h)
        outputs = [h]
        for layer in self.layers:
            h = layer(h, e) if layer.conditioned else layer(h)
            outputs.append(h)
        return outputs if return_all_layers else h


class SpeakerMergeBlock(nn.Module):
    """Concat along features, project down, one vanilla transformer layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(2 * cfg.dim, cfg.dim)
        self.vtl = TransformerLayer(cfg, conditioned=False)

    def forward(self, c_a: torch.Tensor, c_b: torch.Tensor) -> torch.Tensor:
        if c_a.shape != c_b.shape:
            raise ShapeError(
                f"per-speaker representations differ in shape: "
                f"{tuple(c_a.shape)} vs {tuple(c_b.shape)}"
            )
        return self.vtl(self.proj(torch.cat([c_a, c_b], dim=-1)))


class SAWavLM(nn.Module):
    """Extract-merge-predict model for two speaker slots."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvFrameEncoder(cfg)
        self.mask_embedding = nn.Parameter(torch.empty(cfg.dim).uniform_(-0.1, 0.1))
        self.sate = SpeakerAdaptedEncoder(cfg)
        self.smb = SpeakerMergeBlock(cfg)
        self.head1 = nn.Linear(cfg.dim, cfg.vocab_size)
        self.head2 = nn.Linear(cfg.dim, cfg.vocab_size)
        # learnable non-speaker embedding e^s
        self.e_s = nn.Parameter(torch.randn(cfg.embed_dim) * 0.02)

    def encode_frames(self, wave: torch.Tensor) -> torch.Tensor:
        return self.encoder(wave)

    def extract(self, h_masked, e, return_all_layers=False):
        return self.sate(h_masked, e, return_all_layers=return_all_layers)

    def forward(self, h_masked: torch.Tensor, e1: torch.Tensor, e2: torch.Tensor):
        """Per-slot extraction, merge, and the two head projections."""
        c1 = self.sate(h_masked, e1)
        c2 = self.sate(h_masked, e2)
        c_m = self.smb(c1, c2)
        return self.head1(c_m), self.head2(c_m)


class BaselineWavLM(nn.Module):
    """Unconditioned encoder with a single head (primary-speaker objective)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvFrameEncoder(cfg)
        self.mask_embedding = nn.Parameter(torch.empty(cfg.dim).uniform_(-0.1, 0.1))
        self.pos_conv = PositionalConv(cfg.dim)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg, conditioned=False) for _ in range(cfg.layer_count)
        )
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)

    def encode_frames(self, wave: torch.Tensor) -> torch.Tensor:
        return self.encoder(wave)

    def forward(self, h_masked: torch.Tensor) -> torch.Tensor:
        h = self.pos_conv(h_masked)
        for layer in self.layers:
            h = layer(h)
        return self.head(h)


def _slot_ce(z: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor):
    """Masked-frame cross entropy for one (head, slot) pairing."""
    CE_CALL_COUNTER["calls"] += 1
    z_m = z[mask]
    u_m = labels[mask]
    ce = F.cross_entropy(z_m, u_m)
    with torch.no_grad():
        acc = (z_m.argmax(dim=-1) == u_m).double().mean().item()
    return ce, acc


def sa_loss(
    z1: torch.Tensor,
    z2: torch.Tensor,
    labels1: torch.Tensor,
    labels2: torch.Tensor,
    mask: MaskSpec,
):
    """Summed masked CE over the two slots; slot i is scored by head i only
    (the head order is tied to the embedding order, so no permutation search).

    Returns (loss, stats) with per-slot CE and masked accuracy.
    """
    m = torch.from_numpy(np.atleast_2d(mask.indices))
    if not mask.any_masked:
        raise DegenerateBatchError("no masked frames in batch")
    if z1.dim() == 2:
        z1, z2 = z1.unsqueeze(0), z2.unsqueeze(0)
        labels1, labels2 = labels1.unsqueeze(0), labels2.unsqueeze(0)
    ce1, acc1 = _slot_ce(z1, labels1, m)
    ce2, acc2 = _slot_ce(z2, labels2, m)
    loss = ce1 + ce2
    stats = {
        "ce_slot1": ce1.item(),
        "ce_slot2": ce2.item(),
        "acc_slot1": acc1,
        "acc_slot2": acc2,
    }
    return loss, stats


def baseline_loss(z: torch.Tensor, labels: torch.Tensor, mask: MaskSpec):
    """Masked CE for the single primary-speaker slot."""
    m = torch.from_numpy(np.atleast_2d(mask.indices))
    if not mask.any_masked:
        raise DegenerateBatchError("no masked frames in batch")
    if z.dim() == 2:
        z, labels = z.unsqueeze(0), labels.unsqueeze(0)
    ce, acc = _slot_ce(z, labels, m)
    return ce, {"ce_slot1": ce.item(), "acc_slot1": acc}


@dataclass
class SpeakerEmbedding:
    vector: torch.Tensor  # (E,)
    kind: str  # real | distractor | non_speaker
    speaker_id: Optional[str] = None


@dataclass
class SpeakerSlot:
    embedding: SpeakerEmbedding
    labels: PseudoLabelSeq


def _seed_from_string(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode("utf-8")).digest()[:8], "little")


def lookup_embedding(speaker_id: str, embed_dim: int, kind: str = "real") -> SpeakerEmbedding:
    """Deterministic unit vector derived from the speaker id."""
    rng = np.random.default_rng(_seed_from_string(speaker_id))
    v = rng.standard_normal(embed_dim)
    v = v / np.linalg.norm(v)
    return SpeakerEmbedding(torch.tensor(v, dtype=torch.float32), kind, speaker_id)


_ENROLL_PROJ_SEED = 1315423911


def enrollment_embedding(
    enrollment_wave: torch.Tensor, model, kind: str = "real", speaker_id=None
) -> SpeakerEmbedding:
    """Unit-normalized time-mean of encoder frames, projected to E dims by a
    fixed seeded map."""
    cfg = model.cfg
    with torch.no_grad():
        h = model.encode_frames(enrollment_wave)
    mean = h.mean(dim=(0, 1)).numpy()
    rng = np.random.default_rng(_ENROLL_PROJ_SEED)
    proj = rng.standard_normal((cfg.embed_dim, cfg.dim)) / np.sqrt(cfg.dim)
    v = proj @ mean
    norm = np.linalg.norm(v)
    if norm <= 0:
        raise ConfigError("enrollment produced a zero embedding")
    v = v / norm
    return SpeakerEmbedding(torch.tensor(v, dtype=torch.float32), kind, speaker_id)


def speaker_embedding(
    mode: str,
    embed_dim: int = 32,
    speaker_id: Optional[str] = None,
    enrollment_wave: Optional[torch.Tensor] = None,
    model=None,
) -> SpeakerEmbedding:
    if mode == "lookup":
        if speaker_id is None:
            raise ConfigError("lookup mode requires speaker_id")
        return lookup_embedding(speaker_id, embed_dim)
    if mode == "enrollment_mean":
        if enrollment_wave is None or model is None:
            raise ConfigError("enrollment_mean mode requires enrollment audio and model")
        return enrollment_embedding(enrollment_wave, model, speaker_id=speaker_id)
    raise ConfigError(f"unknown speaker embedding mode: {mode!r}")


def shuffle_slots(
    scenario_kind: str,
    real_slots: list,
    rng: np.random.Generator,
    alpha: float,
    e_s: torch.Tensor,
    codebook: Codebook,
    distractor_candidates: Optional[list] = None,
    shuffle: bool = True,
):
    """Build the ordered slot pair fed to extraction and the heads.

    Two-speaker items keep both real slots. One-speaker items gain either a
    distractor embedding of a different speaker (probability alpha) or the
    learnable non-speaker embedding (probability 1 - alpha); the synthetic
    slot carries all-silence labels. The final pair order is then uniformly
    shuffled (unless disabled for ablation).
    """
    if scenario_kind in ("overlap", "noisy_overlap"):
        if len(real_slots) != 2:
            raise ConfigError(
                f"two-speaker scenario needs 2 real slots, got {len(real_slots)}"
            )
        pair = list(real_slots)
    else:
        if len(real_slots) != 1:
            raise ConfigError(
                f"one-speaker scenario needs 1 real slot, got {len(real_slots)}"
            )
        t = len(real_slots[0].labels)
        if rng.random() < alpha:
            present = real_slots[0].embedding.speaker_id
            pool = [
                c
                for c in (distractor_candidates or [])
                if c.speaker_id != present
            ]
            if not pool:
                raise ConfigError("distractor pool empty for shuffle strategy")
            chosen = pool[int(rng.integers(len(pool)))]
            synth = SpeakerEmbedding(chosen.vector, "distractor", chosen.speaker_id)
        else:
            synth = SpeakerEmbedding(e_s, "non_speaker", None)
        pair = [real_slots[0], SpeakerSlot(synth, silence_labels(t, codebook))]
    if shuffle and rng.random() < 0.5:
        pair = [pair[1], pair[0]]
    return pair[0], pair[1]
