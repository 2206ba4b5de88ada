"""End-to-end orchestration of the two training stages and reconstruction.

Stage 1 aligns the signal encoder with the text, image, and action targets.
Stage 2 adds retrieval: encoded tokens route over the memory pool, the
top-K entries are re-weighted by a softmax over their own scores through a
straight-through ratio (forward value exactly 1, so retrieval stays exact
while the router and query projections receive gradients), and the fused
tokens condition the denoiser.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .brain import BrainModel, BrainModelConfig
from .diffusion import (DecoderConfig, Denoiser, NoiseSchedule, diffusion_loss,
                        sample)
from .errors import ConfigError, DimensionError, TrainingDivergedError
from .fusion import FusionParams, attend_memories, fuse
from .losses import Stage1Batch, Stage1Weights, stage1_loss, stage1_terms
from .memory import (MemoryEntry, MemoryPool, QueryProjections, RetrievalResult,
                     RouterParams, RoutingWeights, mixture_scores,
                     mixture_scores_batch, query_batch, query_projections,
                     retrieve, route, route_batch, topk_positions)
from .metrics import (MetricReport, epe, nway_topk, psnr, retrieval_protocol,
                      ssim, temporal_consistency)
from .optim import AdamW, OneCycle


@dataclass
class PipelineConfig:
    brain: BrainModelConfig = field(default_factory=BrainModelConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    top_k: int = 4
    score_temperature: float = 0.1
    alpha: float = 1.0

    def validate(self):
        self.brain.validate()
        self.decoder.validate()
        if self.decoder.d_cond != self.brain.d_clip:
            raise ConfigError(
                f"decoder d_cond {self.decoder.d_cond} must equal "
                f"brain d_clip {self.brain.d_clip}; fused tokens live there")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.score_temperature <= 0.0:
            raise ConfigError("score_temperature must be positive")
        return self


class Pipeline:
    """The full model bundle; every component owns uniquely named parameters."""

    def __init__(self, cfg: PipelineConfig, rng: T.Rng):
        cfg.validate()
        self.cfg = cfg
        self.brain = BrainModel(cfg.brain, rng.split("brain"))
        self.router = RouterParams(cfg.brain.d_model)
        self.queries = QueryProjections(cfg.brain.d_model, cfg.brain.d_clip,
                                        cfg.brain.d_act, rng.split("query"))
        self.fusion = FusionParams.create(cfg.brain.d_model, cfg.brain.d_clip,
                                          cfg.brain.d_act, rng.split("fusion"),
                                          alpha=cfg.alpha)
        self.denoiser = Denoiser(cfg.decoder, rng.split("denoiser"))

    def named_parameters(self):
        out = (self.brain.named_parameters() + self.router.named_parameters()
               + self.queries.named_parameters() + self.fusion.named_parameters()
               + self.denoiser.named_parameters())
        names = [name for name, _ in out]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate parameter names {dupes}")
        return out

    def init_queries_from_brain(self):
        """Warm-start the query projections from the trained alignment heads.

        The pooled tokens live in the same feature space the out head was
        trained on, so out (and out composed with the action head) gives
        retrieval queries that already point at the right pool entries
        instead of random directions.
        """
        out_w = self.brain.out.weight.data
        out_b = self.brain.out.bias.data
        act_w = self.brain.action_head.weight.data
        act_b = self.brain.action_head.bias.data
        self.queries.to_clip.weight.data = out_w.copy()
        self.queries.to_clip.bias.data = out_b.copy()
        self.queries.to_act.weight.data = (out_w @ act_w).astype(out_w.dtype)
        self.queries.to_act.bias.data = (out_b @ act_w + act_b).astype(out_b.dtype)


def batch_from_samples(samples) -> Stage1Batch:
    if not samples:
        raise DimensionError("empty batch")
    return Stage1Batch(
        signals=T.astensor(np.stack([s.signal for s in samples])),
        frames=T.astensor(np.stack([s.e_img for s in samples])),
        text=T.astensor(np.stack([s.e_txt for s in samples])),
        action=T.astensor(np.stack([s.e_act for s in samples])),
        labels=np.stack([s.labels for s in samples]))


def clips_from_samples(samples):
    return np.stack([s.clip for s in samples])


def _pick_batch(n, batch_size, rng):
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def _check_finite(value, step):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at step {step}")


def train_stage1(model, samples, weights: Stage1Weights, steps, batch_size,
                 rng: T.Rng, max_lr=2e-3, weight_decay=0.01, log=None):
    """Optimize the encoder on the alignment losses; returns per-step history."""
    weights.validate()
    opt = AdamW(model.named_parameters(), weight_decay=weight_decay)
    sched = OneCycle(max_lr, max(steps, 1))
    history = []
    for step in range(steps):
        idx = _pick_batch(len(samples), batch_size, rng.split(f"batch{step}"))
        batch = batch_from_samples([samples[i] for i in idx])
        opt.zero_grad()
        total, terms = stage1_loss(batch, model, weights)
        _check_finite(float(total.data), step)
        total.backward()
        lr = sched.lr_at(step)
        opt.step(lr)
        row = {"step": step, "lr": lr, "total": float(total.data), **terms}
        history.append(row)
        if log is not None:
            log(f"stage1 step {step} lr {lr:.6g} loss {row['total']:.6g} "
                f"clip {terms['clip']:.6g} action {terms['action']:.6g} "
                f"cls {terms['cls']:.6g}")
    return history


def build_pool(model, samples, tag_prefix="train") -> MemoryPool:
    """One pool entry per sample: raw text/action targets plus the
    consolidated per-frame image embedding."""
    entries = []
    with T.no_grad():
        for i, s in enumerate(samples):
            e_img = model.consolidate_frames(T.astensor(s.e_img)).data
            entries.append(MemoryEntry(
                id=i,
                e_txt=np.asarray(s.e_txt, dtype=np.float32),
                e_img=e_img.astype(np.float32),
                e_act=np.asarray(s.e_act, dtype=np.float32),
                source_tag=f"{tag_prefix}:{i}"))
    return MemoryPool(entries)


@dataclass
class Stage2Weights:
    stage1: Stage1Weights = field(default_factory=Stage1Weights)
    lambda_stage1: float = 1.0
    lambda_diffusion: float = 1.0

    def validate(self):
        self.stage1.validate()
        if self.lambda_stage1 < 0.0 or self.lambda_diffusion < 0.0:
            raise ConfigError("stage-2 term weights must be >= 0")
        return self


def condition_batch(pipe: Pipeline, pool: MemoryPool, embedding,
                    straight_through=False):
    """Route, retrieve, and fuse for a batch of encoded token stacks.

    Returns (cond, route_w, positions): fused conditioning tokens
    [B, L, d_clip], the routing simplex [B, 3] as a graph node, and the
    retrieved pool positions [B, K].  With `straight_through` the memories
    are scaled by omega / detach(omega), which is exactly 1 in the forward
    pass but carries gradient from the loss into the scores.
    """
    f_e = T.astensor(embedding)
    if f_e.ndim == 2:
        f_e = T.reshape(f_e, (1,) + f_e.shape)
    route_w = route_batch(f_e, pipe.router)
    q_clip, q_act = query_batch(f_e, pipe.queries)
    scores = mixture_scores_batch(q_clip, q_act, route_w, pool)
    B = scores.shape[0]
    k = min(pipe.cfg.top_k, len(pool))
    positions = np.stack([topk_positions(scores.data[b], pool.ids, k)
                          for b in range(B)])
    text = np.stack([pool.entries[positions[b, 0]].e_txt for b in range(B)])
    imgs = np.stack([[pool.entries[i].e_img for i in positions[b]]
                     for b in range(B)])
    acts = np.stack([[pool.entries[i].e_act for i in positions[b]]
                     for b in range(B)])
    text_t, img_t, act_t = T.Tensor(text), T.Tensor(imgs), T.Tensor(acts)
    if straight_through:
        gathered = T.gather_last(scores, positions)
        omega = T.softmax(T.mul(gathered, 1.0 / pipe.cfg.score_temperature),
                          axis=-1)
        # exactly 1.0 elementwise in the forward pass; cast keeps the
        # float64 scoring path from promoting the fused tokens
        ratio = T.cast(T.div(omega, T.detach(omega)), text_t.data.dtype)
        text_t = T.mul(text_t, ratio[:, 0:1])
        img_t = T.mul(img_t, T.reshape(ratio, (B, k, 1)))
        act_t = T.mul(act_t, T.reshape(ratio, (B, k, 1)))
    f_hat = attend_memories(f_e, img_t, act_t, pipe.fusion)
    cond = fuse(f_hat, text_t, pipe.fusion)
    return cond, route_w, positions


def stage2_loss(batch: Stage1Batch, clips, pipe: Pipeline, pool: MemoryPool,
                weights: Stage2Weights, rng: T.Rng, schedule: NoiseSchedule,
                straight_through=True):
    """Joint second-stage objective; returns (scalar Tensor, breakdown dict).

    A zero lambda drops its term from the graph entirely, so the total is
    exactly the other term.  `straight_through=False` detaches the router
    and query projections from the loss (the forward value is unchanged);
    training keeps the default so they receive gradients.
    """
    weights.validate()
    enc = pipe.brain.encode_batch(batch.signals)
    l_clip, l_action, l_cls = stage1_terms(pipe.brain, batch, weights.stage1,
                                           encoding=enc)
    s1 = weights.stage1
    stage1_total = T.add(l_clip, T.add(T.mul(l_action, s1.lambda_action),
                                       T.mul(l_cls, s1.lambda_cls)))
    cond, route_w, _ = condition_batch(pipe, pool, enc.embedding,
                                       straight_through=straight_through)
    diff = diffusion_loss(T.astensor(clips), cond.tokens, pipe.denoiser,
                          rng, schedule)
    if weights.lambda_stage1 == 0.0:
        total = T.mul(diff, weights.lambda_diffusion)
    elif weights.lambda_diffusion == 0.0:
        total = T.mul(stage1_total, weights.lambda_stage1)
    else:
        total = T.add(T.mul(stage1_total, weights.lambda_stage1),
                      T.mul(diff, weights.lambda_diffusion))
    breakdown = {"stage1": float(stage1_total.data),
                 "clip": float(l_clip.data), "action": float(l_action.data),
                 "cls": float(l_cls.data), "diffusion": float(diff.data),
                 "route": route_w.data.mean(axis=0)}
    return total, breakdown


def train_stage2(pipe: Pipeline, samples, pool: MemoryPool,
                 weights: Stage2Weights, steps, batch_size, rng: T.Rng,
                 schedule: NoiseSchedule = None, max_lr=1e-3,
                 weight_decay=0.01, log=None):
    """Jointly optimize encoder, router, queries, fusion, and denoiser."""
    weights.validate()
    if schedule is None:
        schedule = NoiseSchedule()
    opt = AdamW(pipe.named_parameters(), weight_decay=weight_decay)
    sched = OneCycle(max_lr, max(steps, 1))
    history = []
    for step in range(steps):
        idx = _pick_batch(len(samples), batch_size, rng.split(f"batch{step}"))
        picked = [samples[i] for i in idx]
        batch = batch_from_samples(picked)
        clips = clips_from_samples(picked)
        opt.zero_grad()
        total, terms = stage2_loss(batch, clips, pipe, pool, weights,
                                   rng.split(f"noise{step}"), schedule)
        _check_finite(float(total.data), step)
        total.backward()
        lr = sched.lr_at(step)
        opt.step(lr)
        w_txt, w_img, w_act = (float(x) for x in terms["route"])
        row = {"step": step, "lr": lr, "total": float(total.data),
               "stage1": terms["stage1"], "diffusion": terms["diffusion"],
               "clip": terms["clip"], "action": terms["action"],
               "cls": terms["cls"], "w_txt": w_txt, "w_img": w_img,
               "w_act": w_act}
        history.append(row)
        if log is not None:
            log(f"stage2 step {step} lr {lr:.6g} loss {row['total']:.6g} "
                f"stage1 {row['stage1']:.6g} diffusion {row['diffusion']:.6g} "
                f"route {w_txt:.3f}/{w_img:.3f}/{w_act:.3f}")
    return history


@dataclass
class ReconstructionResult:
    clip: np.ndarray
    retrieval: RetrievalResult
    weights: RoutingWeights
    cond_tokens: np.ndarray


def reconstruct(pipe: Pipeline, pool: MemoryPool, signal,
                schedule: NoiseSchedule, rng: T.Rng) -> ReconstructionResult:
    """Encode one signal, retrieve and fuse memories, run reverse diffusion."""
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise DimensionError(f"reconstruct takes one [n_voxels] signal, got {signal.shape}")
    with T.no_grad():
        enc = pipe.brain.encode_batch(T.astensor(signal[None]))
        f_e = enc.embedding
        weights = route(f_e, pipe.router)
        q_clip, q_act = query_projections(f_e, pipe.queries)
        scores = mixture_scores(q_clip, q_act, weights, pool)
        res = retrieve(scores, pool, min(pipe.cfg.top_k, len(pool)),
                       weights=weights)
        cond, _, _ = condition_batch(pipe, pool, f_e)
        tokens = cond.tokens.data[0]
        clip = sample(T.Tensor(tokens), pipe.denoiser, schedule,
                      rng.split("sample"))
    return ReconstructionResult(clip=clip, retrieval=res, weights=weights,
                                cond_tokens=tokens)


def encode_globals(model, samples):
    """Stacked global tokens [M, d_clip] for a sample list, no gradients."""
    with T.no_grad():
        enc = model.encode_batch(T.astensor(np.stack([s.signal for s in samples])))
    return enc.global_token.data.copy()


def centroid_flow(clip):
    """Translation flow estimated from intensity centroid drift.

    Treats pixel values in [-1, 1] as blob mass after shifting to [0, 1];
    returns a constant [F-1, H, W, 2] field per frame pair, matching the
    generator's flow convention (x displacement first).
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4:
        raise DimensionError(f"centroid_flow expects [F, C, H, W], got {clip.shape}")
    frames, _, h, w = clip.shape
    mass = (clip.mean(axis=1) + 1.0) * 0.5
    ys, xs = np.mgrid[0:h, 0:w]
    cents = []
    for f in range(frames):
        m = mass[f]
        tot = m.sum()
        if tot <= 0.0:
            cents.append((0.5 * (w - 1), 0.5 * (h - 1)))
        else:
            cents.append(((m * xs).sum() / tot, (m * ys).sum() / tot))
    flow = np.zeros((frames - 1, h, w, 2), dtype=np.float32)
    for f in range(frames - 1):
        flow[f, ..., 0] = cents[f + 1][0] - cents[f][0]
        flow[f, ..., 1] = cents[f + 1][1] - cents[f][1]
    return flow


def evaluate_battery(pipe: Pipeline, pool: MemoryPool, samples,
                     schedule: NoiseSchedule, rng: T.Rng, subset_size=300,
                     nway_trials=10, recon_count=0):
    """Run the retrieval, classification, and reconstruction metrics.

    Returns a list of MetricReport rows; reconstruction metrics appear only
    when recon_count > 0.
    """
    if not samples:
        raise DimensionError("evaluate_battery needs at least one sample")
    reports = []
    m = len(samples)
    f_c = encode_globals(pipe.brain, samples)
    targets = np.stack([s.e_txt for s in samples])

    if m >= subset_size:
        fwd, bwd = retrieval_protocol(f_c, targets, rng.split("protocol"),
                                      subset_size=subset_size)
        cfg = {"n": m, "subset_size": subset_size}
        reports.append(MetricReport("retrieval_forward", fwd, config=cfg))
        reports.append(MetricReport("retrieval_backward", bwd, config=cfg))

    unit_f = f_c / np.maximum(np.linalg.norm(f_c, axis=1, keepdims=True), 1e-12)
    unit_t = targets / np.maximum(
        np.linalg.norm(targets, axis=1, keepdims=True), 1e-12)
    sims = unit_f @ unit_t.T
    for n_way in (2, 50):
        if m < n_way:
            continue
        accs = [nway_topk(sims[i], i, n_way, 1, rng.split(f"nway{n_way}_{i}"),
                          trials=nway_trials) for i in range(m)]
        reports.append(MetricReport(
            f"nway{n_way}_top1", float(np.mean(accs)),
            std=float(np.std(accs)), n_trials=m * nway_trials,
            config={"n_way": n_way, "top_k": 1, "n": m}))

    if recon_count > 0:
        recon_count = min(recon_count, m)
        maes, ssims, psnrs, tcs, epes = [], [], [], [], []
        h, w = pipe.cfg.decoder.height, pipe.cfg.decoder.width
        for i in range(recon_count):
            s = samples[i]
            rec = reconstruct(pipe, pool, s.signal, schedule,
                              rng.split(f"recon{i}"))
            maes.append(float(np.mean(np.abs(rec.clip - s.clip))))
            a01 = (rec.clip + 1.0) * 0.5
            b01 = (s.clip + 1.0) * 0.5
            psnrs.append(psnr(a01, b01))
            if min(h, w) >= 11:
                ssims.append(float(np.mean(
                    [ssim(a01[f, c], b01[f, c])
                     for f in range(a01.shape[0]) for c in range(a01.shape[1])])))
            if rec.clip.shape[0] >= 2:
                tcs.append(temporal_consistency(
                    rec.clip.reshape(rec.clip.shape[0], -1)))
                epes.append(epe(centroid_flow(rec.clip), s.flow_gt))
        cfg = {"n": recon_count}
        reports.append(MetricReport("recon_mae", float(np.mean(maes)),
                                    std=float(np.std(maes)),
                                    n_trials=recon_count, config=cfg))
        finite_psnr = [p for p in psnrs if np.isfinite(p)]
        reports.append(MetricReport(
            "recon_psnr", float(np.mean(finite_psnr)) if finite_psnr
            else float("inf"), n_trials=recon_count, config=cfg))
        if ssims:
            reports.append(MetricReport("recon_ssim", float(np.mean(ssims)),
                                        std=float(np.std(ssims)),
                                        n_trials=recon_count, config=cfg))
        if tcs:
            reports.append(MetricReport(
                "recon_temporal_consistency", float(np.mean(tcs)),
                n_trials=recon_count, config=cfg))
            reports.append(MetricReport("recon_epe", float(np.mean(epes)),
                                        n_trials=recon_count, config=cfg))
    return reports
