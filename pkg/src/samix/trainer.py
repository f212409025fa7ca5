"""Pre-training loop: batch assembly, optimization, scheduling, checkpointing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .audio import AudioClip, SAMPLE_RATE
from .errors import ConfigError, SimulationError, TrainingError
from .labeler import Codebook, assign_labels
from .mixsim import (
    CorpusManifest,
    SimConfig,
    MixtureSample,
    render_constrained_mixture,
    render_mixture,
    sample_scenario,
)
from .model import (
    BaselineWavLM,
    MaskSpec,
    ModelConfig,
    SAWavLM,
    SpeakerSlot,
    apply_mask,
    baseline_loss,
    lookup_embedding,
    sa_loss,
    shuffle_slots,
)

OBJECTIVES = ("sa_wavlm", "baseline_wavlm")


@dataclass
class TrainConfig:
    steps: int = 1000
    learning_rate: float = 1e-3
    warmup_steps: int = 500
    batch_size: int = 8
    seed: int = 0
    alpha: float = 0.5
    objective: str = "sa_wavlm"
    crop_seconds: float = 3.0
    checkpoint_every: int = 500
    shuffle: bool = True  # speaker shuffling strategy on/off (ablation)

    def __post_init__(self):
        if self.warmup_steps > self.steps and self.steps > 0:
            raise ConfigError("warmup_steps must not exceed steps")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha out of [0,1]: {self.alpha}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective: {self.objective!r}")
        if self.learning_rate < 0 or self.crop_seconds <= 0:
            raise ConfigError("learning_rate must be >= 0 and crop_seconds > 0")


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.learning_rate, then linear decay to 0."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    if cfg.steps == cfg.warmup_steps:
        return cfg.learning_rate
    frac = (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)
    return cfg.learning_rate * max(frac, 0.0)


@dataclass
class Batch:
    h_masked: torch.Tensor  # (B, T, D), graph-connected to the encoder
    mask: MaskSpec
    slot_pairs: list  # list[(SpeakerSlot, SpeakerSlot)] for sa_wavlm
    primary_labels: Optional[torch.Tensor] = None  # (B, T) for baseline
    item_ids: list = field(default_factory=list)

    def slot_tensors(self):
        """Stacked embeddings (B, E) per slot position and labels (B, T)."""
        e1 = torch.stack([p[0].embedding.vector for p in self.slot_pairs])
        e2 = torch.stack([p[1].embedding.vector for p in self.slot_pairs])
        u1 = torch.stack(
            [torch.from_numpy(p[0].labels.labels) for p in self.slot_pairs]
        )
        u2 = torch.stack(
            [torch.from_numpy(p[1].labels.labels) for p in self.slot_pairs]
        )
        return e1, e2, u1, u2


def _crop(samples: np.ndarray, start: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    end = min(start + length, len(samples))
    out[: end - start] = samples[start:end]
    return out


def _crop_window(mix_len: int, crop_len: int, rng: np.random.Generator) -> int:
    if mix_len <= crop_len:
        return 0
    return int(rng.integers(mix_len - crop_len + 1))


def _item_slots(
    sample: MixtureSample,
    crop_start: int,
    crop_len: int,
    t_enc: int,
    codebook: Codebook,
    model_cfg: ModelConfig,
):
    """Real speaker slots for one rendered item, labels on the cropped tracks."""
    slots = []
    for i, src in enumerate(sample.sources):
        track = _crop(sample.source_track(i), crop_start, crop_len)
        clip = AudioClip(track, SAMPLE_RATE, speaker_id=src.clip.speaker_id)
        labels = assign_labels(clip, codebook, target_frames=t_enc)
        emb = lookup_embedding(src.clip.speaker_id, model_cfg.embed_dim)
        slots.append(SpeakerSlot(emb, labels))
    return slots


def assemble_batch(
    corpus: CorpusManifest,
    codebook: Codebook,
    model,
    sim_cfg: SimConfig,
    cfg: TrainConfig,
    step: int,
) -> Batch:
    """Deterministic batch for (cfg.seed, step): render, crop, encode, mask,
    build slots, shuffle."""
    rng = np.random.default_rng([cfg.seed, step])
    crop_len = int(round(cfg.crop_seconds * SAMPLE_RATE))
    t_enc = model.cfg.encoder_frames(crop_len)

    distractors = [
        lookup_embedding(spk, model.cfg.embed_dim) for spk in corpus.speakers()
    ]

    waves, slot_pairs, primary_labels, item_ids = [], [], [], []
    for _ in range(cfg.batch_size):
        if cfg.objective == "baseline_wavlm":
            sample = render_constrained_mixture(corpus, rng, sim_cfg.sir_range)
        else:
            # a drawn overlap can be infeasible for the drawn clips; redraw
            for attempt in range(20):
                spec = sample_scenario(rng, sim_cfg)
                try:
                    sample = render_mixture(spec, corpus, rng)
                    break
                except SimulationError:
                    if attempt == 19:
                        raise
        start = _crop_window(len(sample.mixture.samples), crop_len, rng)
        waves.append(_crop(sample.mixture.samples, start, crop_len))
        item_ids.append(
            "+".join(s.clip.utterance_id for s in sample.sources)
            + f"@{sample.scenario.kind}"
        )
        slots = _item_slots(sample, start, crop_len, t_enc, codebook, model.cfg)
        if cfg.objective == "baseline_wavlm":
            primary_labels.append(
                torch.from_numpy(slots[sample.primary_index].labels.labels)
            )
        else:
            pair = shuffle_slots(
                sample.scenario.kind if len(slots) == 2 else "clean",
                slots if len(slots) == 2 else slots[:1],
                rng,
                cfg.alpha,
                model.e_s,
                codebook,
                distractor_candidates=distractors,
                shuffle=cfg.shuffle,
            )
            slot_pairs.append(pair)

    wave_t = torch.tensor(np.stack(waves), dtype=torch.float32)
    h = model.encode_frames(wave_t)
    h_masked, mask = apply_mask(h, rng, model.cfg, model.mask_embedding)
    return Batch(
        h_masked,
        mask,
        slot_pairs,
        primary_labels=torch.stack(primary_labels) if primary_labels else None,
        item_ids=item_ids,
    )


def _grad_norm(model) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total**0.5


def train_step(
    batch: Batch, model, optimizer: torch.optim.Optimizer, lr: float, objective: str
):
    """One gradient step; returns the metrics record."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    if objective == "baseline_wavlm":
        z = model(batch.h_masked)
        loss, stats = baseline_loss(z, batch.primary_labels, batch.mask)
    else:
        e1, e2, u1, u2 = batch.slot_tensors()
        z1, z2 = model(batch.h_masked, e1, e2)
        loss, stats = sa_loss(z1, z2, u1, u2, batch.mask)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss on batch items: {batch.item_ids}")
    loss.backward()
    grad_norm = _grad_norm(model)
    if lr > 0:
        optimizer.step()
    metrics = {"loss": loss.item(), "grad_norm": grad_norm, "lr": lr}
    metrics.update(stats)
    return metrics


def build_model(model_cfg: ModelConfig, objective: str, seed: int):
    torch.manual_seed(seed)
    if objective == "baseline_wavlm":
        return BaselineWavLM(model_cfg)
    return SAWavLM(model_cfg)


def run_pretraining(
    cfg: TrainConfig,
    corpus: CorpusManifest,
    codebook: Codebook,
    model_cfg: ModelConfig,
    sim_cfg: SimConfig,
    out_dir: str,
    resume_from: Optional[str] = None,
    codebook_hash: str = "",
):
    """Full pre-training run; returns (final checkpoint path, metrics list)."""
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(model_cfg, cfg.objective, cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    start_step = 0
    if resume_from is not None:
        if ckpt.read_header(resume_from)["extra"].get("objective") != cfg.objective:
            raise TrainingError(
                "checkpoint objective does not match config; refusing to resume"
            )
        header = ckpt.load_checkpoint(resume_from, model, optimizer, model_cfg)
        start_step = header["step"]

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    log_mode = "a" if start_step > 0 else "w"
    final_path = os.path.join(out_dir, "checkpoint_final.bin")

    def save(path, step):
        ckpt.save_checkpoint(
            path,
            model,
            step,
            cfg.alpha,
            codebook_hash=codebook_hash,
            optimizer=optimizer,
            extra={"objective": cfg.objective},
        )

    if cfg.steps == 0:
        save(final_path, 0)
        return final_path, []

    records = []
    with open(metrics_path, log_mode, encoding="utf-8") as log:
        for step in range(start_step + 1, cfg.steps + 1):
            batch = assemble_batch(corpus, codebook, model, sim_cfg, cfg, step)
            lr = learning_rate_at(step, cfg)
            metrics = train_step(batch, model, optimizer, lr, cfg.objective)
            metrics["step"] = step
            records.append(metrics)
            log.write(json.dumps(metrics) + "\n")
            if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
                save(os.path.join(out_dir, f"checkpoint_{step:07d}.bin"), step)
    save(final_path, cfg.steps)
    return final_path, records
