"""Verification kit: metrics, gradient checks, probing, order-swap
measurement, and the aggregated invariant suite."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import checkpoint as ckpt
from .audio import AudioClip, SAMPLE_RATE, write_wav
from .errors import ConfigError, DegenerateSignalError, ShapeError, SimulationError
from .labeler import (
    Codebook,
    FeatureConfig,
    assign_labels,
    fit_codebook,
    silence_labels,
)
from .mixsim import (
    CorpusManifest,
    ScenarioSpec,
    SimConfig,
    load_manifest,
    measured_ratio_db,
    render_constrained_mixture,
    render_mixture,
)
from .model import (
    CE_CALL_COUNTER,
    ConditionalLayerNorm,
    MaskSpec,
    ModelConfig,
    SAWavLM,
    SpeakerMergeBlock,
    TransformerLayer,
    apply_mask,
    layer_norm,
    reset_ce_counter,
    sa_loss,
)

SI_SDR_CAP_DB = 80.0


def masked_accuracy(z, labels, mask: MaskSpec):
    """Fraction of masked frames whose argmax (ties toward the lower class)
    matches the label; None when nothing is masked."""
    z = np.asarray(z.detach() if isinstance(z, torch.Tensor) else z, dtype=np.float64)
    labels = np.asarray(
        labels.detach() if isinstance(labels, torch.Tensor) else labels
    )
    m = np.atleast_2d(mask.indices)
    if z.ndim == 2:
        z = z[None]
        labels = np.atleast_2d(labels)
    if z.shape[:2] != m.shape or labels.shape != m.shape:
        raise ShapeError("logits/labels/mask shapes inconsistent")
    if not m.any():
        return None
    pred = np.argmax(z[m], axis=-1)  # np.argmax takes the first (lowest) maximum
    return float(np.mean(pred == labels[m]))


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at +80 for numerically exact matches."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0:
        raise DegenerateSignalError("zero reference in si_sdr")
    scale = float(np.dot(est, ref)) / ref_energy
    target = scale * ref
    residual = est - target
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den <= 0 or 10.0 * np.log10(num / den) > SI_SDR_CAP_DB:
        return SI_SDR_CAP_DB
    return 10.0 * np.log10(num / den)


def layer_weighted_sum(per_layer_reps: list, weights) -> np.ndarray:
    """Convex combination of per-layer (T, D) matrices."""
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(per_layer_reps):
        raise ShapeError(
            f"{len(w)} weights for {len(per_layer_reps)} layers"
        )
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("weights must be nonnegative and sum to 1")
    reps = [np.asarray(r, dtype=np.float64) for r in per_layer_reps]
    out = np.zeros_like(reps[0])
    for wi, r in zip(w, reps):
        out += wi * r
    return out


def finite_difference_grad_error(build_loss, tensors, step=1e-5, max_entries=None):
    """Max relative error between autograd and central finite differences.

    All tensors must be float64 leaves with requires_grad=True; build_loss
    must be a pure closure over them.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for p, g in zip(tensors, grads):
        if g is None:
            continue
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        idx = range(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            sel = np.random.default_rng(0).choice(
                flat.numel(), size=max_entries, replace=False
            )
            idx = [int(i) for i in sel]
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            lp = build_loss().item()
            flat[i] = orig - step
            lm = build_loss().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            an = gflat[i].item()
            denom = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst


@dataclass
class EvalItem:
    """One eval mixture: wave crop, masked/unmasked frame count, and the two
    real speaker slots (slot 0 is the mixture-timeline target)."""

    wave: np.ndarray
    slots: list
    scenario_kind: str


def build_eval_items(
    corpus: CorpusManifest,
    codebook: Codebook,
    model_cfg: ModelConfig,
    n_items: int,
    seed: int,
    crop_seconds: float = 1.0,
    kind: str = "overlap",
    sim_cfg: SimConfig | None = None,
    overlap_range: tuple = (0.5, 1.0),
):
    """Render eval mixtures with per-slot ground-truth teacher labels."""
    from .trainer import _crop, _crop_window, _item_slots
    from .mixsim import sample_scenario

    sim_cfg = sim_cfg or SimConfig()
    rng = np.random.default_rng([seed, 0xE7A1])
    crop_len = int(round(crop_seconds * SAMPLE_RATE))
    t_enc = model_cfg.encoder_frames(crop_len)
    items = []
    while len(items) < n_items:
        if kind == "any":
            spec = sample_scenario(rng, sim_cfg)
        else:
            spec = ScenarioSpec(
                kind=kind,
                overlap_ratio=float(rng.uniform(*overlap_range)) if kind in ("overlap", "noisy_overlap") else 0.0,
                sir_db=float(rng.uniform(*sim_cfg.sir_range)),
                snr_db=float(rng.uniform(*sim_cfg.snr_range)),
            )
        try:
            sample = render_mixture(spec, corpus, rng)
        except SimulationError:
            continue  # infeasible overlap for the drawn clips; redraw
        if kind in ("overlap", "noisy_overlap") and len(sample.sources) < 2:
            continue
        start = _crop_window(len(sample.mixture.samples), crop_len, rng)
        wave = _crop(sample.mixture.samples, start, crop_len)
        slots = _item_slots(sample, start, crop_len, t_enc, codebook, model_cfg)
        items.append(EvalItem(wave, slots, spec.kind))
    return items


def _frozen_layer_stack(model: SAWavLM, wave: np.ndarray, e: torch.Tensor):
    """All SATE layer outputs (L+1, T, D) on unmasked input, no gradients."""
    with torch.no_grad():
        h = model.encode_frames(torch.tensor(wave[None], dtype=torch.float32))
        layers = model.extract(h, e[None], return_all_layers=True)
    return torch.stack([x.squeeze(0) for x in layers])


def _probe_split(n_items: int) -> int:
    """Boundary index between probe-training items and held-out items."""
    if n_items < 2:
        raise ConfigError("probing needs at least 2 items for a held-out split")
    return max(1, (2 * n_items) // 3)


def _train_probe(stacks, targets, vocab_size, epochs=150, lr=5e-2, seed=0):
    """Fit a linear classifier over a learned softmax-weighted layer sum on a
    training split and report accuracy on the held-out items."""
    torch.manual_seed(seed)
    n_layers, _, dim = stacks[0].shape
    split = _probe_split(len(stacks))
    logits_w = torch.zeros(n_layers, requires_grad=True)
    clf = torch.nn.Linear(dim, vocab_size)
    opt = torch.optim.Adam([logits_w, *clf.parameters()], lr=lr)
    x = torch.cat(stacks[:split], dim=1)  # (L+1, sum_T, D)
    y = torch.cat(targets[:split])
    for _ in range(epochs):
        opt.zero_grad()
        w = torch.softmax(logits_w, dim=0)
        feats = (w[:, None, None] * x).sum(dim=0)
        loss = torch.nn.functional.cross_entropy(clf(feats), y)
        loss.backward()
        opt.step()
    with torch.no_grad():
        w = torch.softmax(logits_w, dim=0)
        x_eval = torch.cat(stacks[split:], dim=1)
        y_eval = torch.cat(targets[split:])
        feats = (w[:, None, None] * x_eval).sum(dim=0)
        acc = (clf(feats).argmax(dim=-1) == y_eval).double().mean().item()
    return acc


def probe_target_labeling(
    model: SAWavLM,
    items: list,
    baseline_model=None,
    epochs: int = 150,
    seed: int = 0,
) -> dict:
    """Frozen-representation probe accuracies per conditioning condition,
    measured on items held out from probe training.

    Conditions: 'correct' conditions extraction on the target speaker's
    embedding, 'interferer' on the other slot's embedding, 'baseline' (when a
    baseline model is given) uses the unconditioned encoder. Targets are the
    target speaker's teacher labels on unmasked mixtures.
    """
    before = ckpt.state_hash(model)
    vocab = model.cfg.vocab_size
    targets = [torch.from_numpy(it.slots[0].labels.labels) for it in items]

    conditions = {}
    for name, pick in (("correct", 0), ("interferer", 1)):
        stacks = [
            _frozen_layer_stack(model, it.wave, it.slots[pick].embedding.vector)
            for it in items
        ]
        conditions[name] = _train_probe(stacks, targets, vocab, epochs=epochs, seed=seed)

    if baseline_model is not None:
        stacks = []
        with torch.no_grad():
            for it in items:
                h = baseline_model.encode_frames(
                    torch.tensor(it.wave[None], dtype=torch.float32)
                )
                outs = [baseline_model.pos_conv(h)]
                for layer in baseline_model.layers:
                    outs.append(layer(outs[-1]))
                stacks.append(torch.stack([x.squeeze(0) for x in outs]))
        conditions["baseline"] = _train_probe(
            stacks, targets, vocab, epochs=epochs, seed=seed
        )

    if ckpt.state_hash(model) != before:
        raise ConfigError("probe training modified the frozen encoder")
    return conditions


def order_swap_consistency(model: SAWavLM, items: list) -> float:
    """Mean per-frame total-variation distance between the prediction for a
    speaker under slot order (a, b) and under the swapped order (b, a)."""
    gaps = []
    with torch.no_grad():
        for it in items:
            h = model.encode_frames(torch.tensor(it.wave[None], dtype=torch.float32))
            e_a = it.slots[0].embedding.vector[None]
            e_b = it.slots[1].embedding.vector[None]
            z1_ab, z2_ab = model(h, e_a, e_b)
            z1_ba, z2_ba = model(h, e_b, e_a)
            p_a_first = torch.softmax(z1_ab, dim=-1)
            p_a_second = torch.softmax(z2_ba, dim=-1)
            p_b_second = torch.softmax(z2_ab, dim=-1)
            p_b_first = torch.softmax(z1_ba, dim=-1)
            tv_a = 0.5 * (p_a_first - p_a_second).abs().sum(dim=-1).mean()
            tv_b = 0.5 * (p_b_second - p_b_first).abs().sum(dim=-1).mean()
            gaps.append(0.5 * (tv_a + tv_b).item())
    return float(np.mean(gaps))


def export_frozen_reps(model: SAWavLM, wave: np.ndarray, e: torch.Tensor, out_prefix: str):
    """Write all-layer representations as raw float32 plus a JSON sidecar."""
    stack = _frozen_layer_stack(model, wave, e).numpy().astype("<f4")
    with open(out_prefix + ".bin", "wb") as fh:
        fh.write(stack.tobytes())
    sidecar = {"layers": stack.shape[0], "frames": stack.shape[1], "dim": stack.shape[2]}
    with open(out_prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)
    return sidecar


@dataclass
class EvalReport:
    checks: list = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)

    def add(self, check_id, passed, value=None, tolerance=None, details=""):
        if any(c["check_id"] == check_id for c in self.checks):
            raise ConfigError(f"duplicate check id: {check_id}")
        self.checks.append(
            {
                "check_id": check_id,
                "passed": bool(passed),
                "value": value,
                "tolerance": tolerance,
                "details": details,
            }
        )

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)

    def to_table(self) -> str:
        lines = [f"{'check':42s} {'result':6s} value"]
        for c in self.checks:
            status = "PASS" if c["passed"] else "FAIL"
            val = "" if c["value"] is None else f"{c['value']:.3e}"
            lines.append(f"{c['check_id']:42s} {status:6s} {val}")
        return "\n".join(lines)


def _synthetic_corpus(tmpdir: str, n_speakers=3, utts_per_speaker=2, seconds=1.5, with_noise=True):
    """Tiny tone-based corpus written to disk with a manifest, for self-
    contained simulator checks."""
    rng = np.random.default_rng(7)
    lines = []
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    for s in range(n_speakers):
        base = 220.0 * (s + 1)
        for u in range(utts_per_speaker):
            sig = 0.3 * np.sin(2 * np.pi * (base + 10 * u) * t)
            sig += 0.1 * np.sin(2 * np.pi * 2 * (base + 10 * u) * t)
            utt = f"s{s}_u{u}"
            path = os.path.join(tmpdir, f"{utt}.wav")
            write_wav(path, AudioClip(sig, SAMPLE_RATE, f"spk{s}", utt))
            lines.append(f"{utt}\tspk{s}\t{path}\t{seconds}")
    if with_noise:
        noise = 0.05 * rng.standard_normal(n)
        path = os.path.join(tmpdir, "noise0.wav")
        write_wav(path, AudioClip(noise, SAMPLE_RATE, "NOISE", "noise0"))
        lines.append(f"noise0\tNOISE\t{path}\t{seconds}")
    manifest = os.path.join(tmpdir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return load_manifest(manifest)


def _check(report, check_id, fn, tolerance=None):
    try:
        value, passed, details = fn()
        report.add(check_id, passed, value=value, tolerance=tolerance, details=details)
    except Exception as exc:  # individual failures never abort the suite
        report.add(check_id, False, details=f"{type(exc).__name__}: {exc}")


def run_invariant_suite(
    model: SAWavLM | None = None,
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    grad_checks: bool = True,
) -> EvalReport:
    """Architecture, labeler, and simulator invariants on fresh or given params."""
    cfg = model_cfg or (model.cfg if model is not None else ModelConfig())
    if model is None:
        torch.manual_seed(seed)
        model = SAWavLM(cfg)
    report = EvalReport(fingerprint={"seed": seed, "model_config": asdict(cfg)})
    rng = np.random.default_rng(seed)

    def norm_core():
        h = torch.tensor(rng.standard_normal((4, 16, cfg.dim)))
        gamma = torch.ones(cfg.dim, dtype=torch.float64)
        beta = torch.zeros(cfg.dim, dtype=torch.float64)
        out = layer_norm(h, gamma, beta, 1e-5)
        mean = out.mean(dim=-1).abs().max().item()
        var_err = (out.var(dim=-1, unbiased=False) - 1.0).abs().max().item()
        return max(mean, var_err), mean < 1e-5 and var_err < 1e-4, ""

    _check(report, "normalization_core", norm_core, tolerance=1e-4)

    def cln_collapse():
        layer_c = TransformerLayer(cfg, conditioned=True)
        layer_v = TransformerLayer(cfg, conditioned=False)
        layer_v.attn.load_state_dict(layer_c.attn.state_dict())
        layer_v.ffn.load_state_dict(layer_c.ffn.state_dict())
        for norm_c, norm_v in ((layer_c.norm1, layer_v.norm1), (layer_c.norm2, layer_v.norm2)):
            norm_c.collapse_to_plain()
            with torch.no_grad():
                norm_v.gamma.copy_(norm_c.gamma)
                norm_v.beta.copy_(norm_c.beta)
        h = torch.tensor(rng.standard_normal((2, 12, cfg.dim)), dtype=torch.float32)
        e = torch.tensor(rng.standard_normal((2, cfg.embed_dim)), dtype=torch.float32)
        with torch.no_grad():
            diff = (layer_c(h, e) - layer_v(h)).abs().max().item()
        return diff, diff < 1e-6, ""

    _check(report, "cln_collapse_to_layer_norm", cln_collapse, tolerance=1e-6)

    def masking_exact():
        h = torch.tensor(
            rng.standard_normal((3, 40, cfg.dim)), dtype=torch.float32
        )
        masked, spec = apply_mask(h, np.random.default_rng(seed), cfg, model.mask_embedding)
        m = torch.from_numpy(spec.indices)
        ok_out = torch.equal(masked[~m], h[~m])
        emb = model.mask_embedding.detach()
        ok_in = bool(((masked[m] - emb).abs().max() == 0).item()) if m.any() else True
        return None, ok_out and ok_in, ""

    _check(report, "masking_exactness", masking_exact)

    def pit_free():
        reset_ce_counter()
        t, v = 20, cfg.vocab_size
        z = torch.tensor(rng.standard_normal((1, t, v)))
        u = torch.from_numpy(rng.integers(0, v, size=(1, t)))
        mask = MaskSpec(np.ones((1, t), dtype=bool))
        sa_loss(z, z.clone(), u, u.clone(), mask)
        calls = CE_CALL_COUNTER["calls"]
        return calls, calls == 2, "per-slot CE evaluations per batch item"

    _check(report, "pit_free_ce_counter", pit_free)

    if grad_checks:
        _check(report, "grad_cln", lambda: _grad_cln(), tolerance=1e-4)
        _check(report, "grad_satl", lambda: _grad_satl(), tolerance=1e-4)
        _check(report, "grad_smb", lambda: _grad_smb(), tolerance=1e-4)
        _check(report, "grad_sa_loss", lambda: _grad_sa_loss(), tolerance=1e-4)

    def codebook_det():
        feats = rng.standard_normal((60, 6))
        cb1 = fit_codebook(feats, 4, seed=3)
        cb2 = fit_codebook(feats, 4, seed=3)
        same = np.array_equal(cb1.centroids, cb2.centroids)
        return None, same, ""

    _check(report, "codebook_determinism", codebook_det)

    def label_alignment():
        fcfg = FeatureConfig()
        cb = fit_codebook(rng.standard_normal((80, fcfg.dim)), 4, seed=1, feature_cfg=fcfg)
        ok = True
        for seconds in (0.5, 1.0, 2.7, 10.0):
            n = int(seconds * SAMPLE_RATE)
            clip = AudioClip(0.1 * rng.standard_normal(n))
            t_enc = cfg.encoder_frames(n)
            labels = assign_labels(clip, cb, target_frames=t_enc)
            ok = ok and len(labels) == t_enc
            ok = ok and labels.labels.max() < cb.k
        sil = silence_labels(7, cb)
        ok = ok and np.all(sil.labels == cb.silence_id)
        return None, ok, ""

    _check(report, "label_alignment_and_range", label_alignment)

    def simulator():
        with tempfile.TemporaryDirectory() as tmp:
            corpus = _synthetic_corpus(tmp)
            worst_recon, worst_ratio = 0.0, 0.0
            constrained_ok = True
            for i in range(50):
                r = np.random.default_rng([seed, i])
                spec = ScenarioSpec("noisy_overlap", overlap_ratio=0.8, sir_db=2.0, snr_db=10.0)
                sample = render_mixture(spec, corpus, r)
                err = np.max(np.abs(sample.mixture.samples - sample.reconstruct()))
                worst_recon = max(worst_recon, err)
                if len(sample.sources) == 2:
                    worst_ratio = max(worst_ratio, abs(measured_ratio_db(sample) - 2.0))
                c = render_constrained_mixture(corpus, np.random.default_rng([seed, 1000 + i]))
                itf = c.sources[1]
                constrained_ok = constrained_ok and len(itf.clip.samples) < 0.5 * len(
                    c.mixture.samples
                )
            # determinism
            a = render_mixture(ScenarioSpec("overlap", 0.7, 1.0, 0.0), corpus, np.random.default_rng(5))
            b = render_mixture(ScenarioSpec("overlap", 0.7, 1.0, 0.0), corpus, np.random.default_rng(5))
            det = np.array_equal(a.mixture.samples, b.mixture.samples)
            ok = worst_recon <= 1e-7 and worst_ratio <= 0.1 and constrained_ok and det
            return max(worst_recon, worst_ratio), ok, ""

    _check(report, "simulator_fidelity", simulator, tolerance=0.1)

    def ckpt_roundtrip():
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "ck.bin")
            wave = torch.tensor(
                rng.standard_normal((1, cfg.min_samples * 4)), dtype=torch.float32
            )
            e1 = torch.tensor(rng.standard_normal((1, cfg.embed_dim)), dtype=torch.float32)
            e2 = torch.tensor(rng.standard_normal((1, cfg.embed_dim)), dtype=torch.float32)
            with torch.no_grad():
                h = model.encode_frames(wave)
                z_before = model(h, e1, e2)[0]
            ckpt.save_checkpoint(path, model, 0, 0.5)
            torch.manual_seed(seed + 1)
            other = SAWavLM(cfg)
            ckpt.load_checkpoint(path, other)
            with torch.no_grad():
                h2 = other.encode_frames(wave)
                z_after = other(h2, e1, e2)[0]
            diff = (z_before - z_after).abs().max().item()
            return diff, diff <= 1e-7, ""

    _check(report, "checkpoint_roundtrip", ckpt_roundtrip, tolerance=1e-7)

    def metric_props():
        x = rng.standard_normal(400)
        noisy = x + 0.3 * rng.standard_normal(400)
        base = si_sdr(noisy, x)
        scaled = si_sdr(2.5 * noisy, x)
        ok = abs(base - scaled) < 1e-9
        reps = [rng.standard_normal((5, 4)) for _ in range(3)]
        w1 = np.array([0.2, 0.3, 0.5])
        w2 = np.array([0.6, 0.1, 0.3])
        lhs = 0.5 * (layer_weighted_sum(reps, w1) + layer_weighted_sum(reps, w2))
        rhs = layer_weighted_sum(reps, 0.5 * (w1 + w2))
        ok = ok and np.max(np.abs(lhs - rhs)) < 1e-10
        return None, ok, ""

    _check(report, "metric_properties", metric_props)

    return report


def _small_cfg():
    return ModelConfig(dim=8, embed_dim=4, layer_count=1, satl_layer_index=1,
                       attention_heads=2, ffn_dim=16, k=4)


def _grad_cln():
    cfg = _small_cfg()
    torch.manual_seed(0)
    norm = ConditionalLayerNorm(cfg.dim, cfg.embed_dim).double()
    with torch.no_grad():
        for p in norm.parameters():
            p.add_(0.05 * torch.randn_like(p))
    h = torch.randn(4, cfg.dim, dtype=torch.float64, requires_grad=True)
    e = torch.randn(cfg.embed_dim, dtype=torch.float64, requires_grad=True)
    params = [h, e] + list(norm.parameters())
    err = finite_difference_grad_error(lambda: norm(h, e).pow(2).sum(), params)
    return err, err < 1e-4, ""


def _grad_satl():
    cfg = _small_cfg()
    torch.manual_seed(1)
    layer = TransformerLayer(cfg, conditioned=True).double()
    h = torch.randn(1, 4, cfg.dim, dtype=torch.float64, requires_grad=True)
    e = torch.randn(1, cfg.embed_dim, dtype=torch.float64, requires_grad=True)
    params = [h, e] + list(layer.parameters())
    err = finite_difference_grad_error(lambda: layer(h, e).pow(2).sum(), params)
    return err, err < 1e-4, ""


def _grad_smb():
    cfg = _small_cfg()
    torch.manual_seed(2)
    smb = SpeakerMergeBlock(cfg).double()
    c_a = torch.randn(1, 4, cfg.dim, dtype=torch.float64, requires_grad=True)
    c_b = torch.randn(1, 4, cfg.dim, dtype=torch.float64, requires_grad=True)
    params = [c_a, c_b] + list(smb.parameters())
    err = finite_difference_grad_error(lambda: smb(c_a, c_b).pow(2).sum(), params)
    return err, err < 1e-4, ""


def _grad_sa_loss():
    cfg = _small_cfg()
    rng = np.random.default_rng(3)
    t, v = 6, cfg.vocab_size
    z1 = torch.tensor(rng.standard_normal((1, t, v)), requires_grad=True)
    z2 = torch.tensor(rng.standard_normal((1, t, v)), requires_grad=True)
    u1 = torch.from_numpy(rng.integers(0, v, size=(1, t)))
    u2 = torch.from_numpy(rng.integers(0, v, size=(1, t)))
    mask = MaskSpec(rng.random((1, t)) < 0.6)
    err = finite_difference_grad_error(
        lambda: sa_loss(z1, z2, u1, u2, mask)[0], [z1, z2]
    )
    return err, err < 1e-4, ""
