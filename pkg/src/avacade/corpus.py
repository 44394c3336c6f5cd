"""Synthetic corpora and small training recipes used by tests and demos.

Everything here is generated from named seeds: smooth structured clips for
flow training, paired low/high resolution keyframes for upscaler training,
two-rectangle scenes with exact ground-truth occupancy for gate training,
and clips whose frame-to-frame motion follows a given loudness series
exactly.  Recipes wrap the training loops with tuned defaults so callers
get a working model from one call.
"""

from __future__ import annotations

import numpy as np

from .audio import AudioFeatureSeq
from .backbone import (
    FlowExample,
    ModelConfig,
    ModelWeights,
    encode_reference,
    sample,
    train_flow,
)
from .conditioning import (
    frame_tokens,
    make_conditioning,
    merge_token_seqs,
    project_audio,
)
from .distill import (
    DistillTask,
    TimeSchedule,
    analyze_timesteps,
    build_schedule,
    distill,
)
from .harness import sync_score
from .maskhead import (
    HeadExample,
    MaskHeadWeights,
    compute_tap,
    downsample_mask,
    mask_iou,
    predict_masks,
    threshold_mask,
    train_head,
)
from .rng import Rng, derive_seed, hash64
from .video import LatentVideo, block_downsample, nn_upsample

RECT_IDENTS = ("spk0", "spk1")
PATTERN_AMP = 2.0
SR_BASE_AMP = 0.8
SR_DETAIL_AMP = 0.2


def _smooth_field(rng: Rng, frames: int, h: int, w: int, d: int, n_parts: int = 2) -> np.ndarray:
    """Sum of a few separable low-frequency space-time waves."""
    f_idx = np.arange(frames)[:, None, None]
    r_idx = np.arange(h)[None, :, None]
    c_idx = np.arange(w)[None, None, :]
    out = np.zeros((frames, h, w, d))
    for _ in range(n_parts):
        kr = rng.integer(3)
        kc = rng.integer(3)
        kf = rng.integer(2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        tphase = rng.uniform(0.0, 2.0 * np.pi)
        spatial = np.sin(2.0 * np.pi * (kr * r_idx / h + kc * c_idx / w) + phase)
        temporal = np.cos(2.0 * np.pi * kf * f_idx / max(frames, 1) + tphase)
        chan = rng.normals(d)
        chan /= np.sqrt(np.mean(chan * chan))
        out += (spatial * temporal)[..., None] * chan
    return out / np.sqrt(n_parts)


def toy_flow_corpus(n: int, seed: int, cfg: ModelConfig, frames: int = 4) -> list[FlowExample]:
    """Smooth structured clips with a fixed prompt; the easiest flow target."""
    out = []
    for i in range(n):
        rng = Rng(derive_seed(seed, "toy-flow", i))
        x0 = _smooth_field(rng, frames, cfg.height, cfg.width, cfg.channels)
        out.append(FlowExample(x0, make_conditioning("pattern clip", dim=cfg.model_dim)))
    return out


def rect_pattern(ident: str, channels: int) -> np.ndarray:
    rng = Rng(hash64("rect-pattern-v1", ident))
    return rng.normals(channels) * PATTERN_AMP


def reference_frame(ident: str, cfg: ModelConfig) -> np.ndarray:
    """The identity's pattern alone on a clean background, centered."""
    frame = np.zeros((cfg.height, cfg.width, cfg.channels))
    r0 = cfg.height // 2 - 2
    c0 = cfg.width // 2 - 2
    frame[r0 : r0 + 4, c0 : c0 + 4, :] = rect_pattern(ident, cfg.channels)
    return frame


def two_rect_scene(
    seed: int, cfg: ModelConfig, frames: int = 4, background: float = 0.3
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """A scene with one identity rectangle per half, plus exact pixel masks.

    Rectangles sit on even coordinates with even sizes, so token-grid block
    coverage is exactly 0 or 1 and thresholded targets are unambiguous.
    """
    rng = Rng(seed)
    h, w, d = cfg.height, cfg.width, cfg.channels
    x0 = background * rng.normals((frames, h, w, d))
    gt: dict[str, np.ndarray] = {}
    half = w // 2
    for k, ident in enumerate(RECT_IDENTS):
        size = 2 + 2 * rng.integer(2)  # 2 or 4
        r0 = 2 * rng.integer((h - size) // 2 + 1)
        lo = k * half
        c0 = lo + 2 * rng.integer((half - size) // 2 + 1)
        x0[:, r0 : r0 + size, c0 : c0 + size, :] += rect_pattern(ident, d)
        mask = np.zeros((frames, h, w))
        mask[:, r0 : r0 + size, c0 : c0 + size] = 1.0
        gt[ident] = mask
    return x0, gt


def two_rect_corpus(
    n: int, seed: int, backbone: ModelWeights, frames: int = 4
) -> list[HeadExample]:
    cfg = backbone.config
    refs = [
        (ident, encode_reference(backbone, reference_frame(ident, cfg), ident))
        for ident in RECT_IDENTS
    ]
    out = []
    for i in range(n):
        x0, gt_pixel = two_rect_scene(derive_seed(seed, "two-rect", i), cfg, frames)
        cond = make_conditioning("two speakers", dim=cfg.model_dim, references=refs)
        gt = {ident: downsample_mask(m, cfg.grid) for ident, m in gt_pixel.items()}
        out.append(HeadExample(x0, cond, gt))
    return out


def head_recipe(
    backbone: ModelWeights,
    seed: int,
    n_examples: int = 40,
    steps: int = 2000,
    lr: float = 0.05,
) -> tuple[MaskHeadWeights, list[float]]:
    examples = two_rect_corpus(n_examples, derive_seed(seed, "head-corpus"), backbone)
    return train_head(backbone, examples, steps=steps, lr=lr, seed=derive_seed(seed, "head-fit"))


def eval_head_iou(
    backbone: ModelWeights, head: MaskHeadWeights, seed: int, n_scenes: int = 10
) -> dict[str, float]:
    """Mean thresholded IoU per identity on freshly drawn scenes."""
    cfg = backbone.config
    examples = two_rect_corpus(n_scenes, derive_seed(seed, "head-eval"), backbone)
    scores: dict[str, list[float]] = {ident: [] for ident in RECT_IDENTS}
    for i, ex in enumerate(examples):
        cond = make_conditioning(
            "two speakers",
            dim=cfg.model_dim,
            audio=[(ident, np.zeros((ex.x0.shape[0], cfg.model_dim))) for ident in RECT_IDENTS],
            references=ex.cond.references,
        )
        tap = compute_tap(backbone, ex, derive_seed(seed, "eval-noise", i))
        grid = (ex.x0.shape[0], *cfg.grid)
        masks = predict_masks(head, tap, cond, grid)
        for ident in RECT_IDENTS:
            pred = threshold_mask(masks[ident])
            truth = threshold_mask(ex.gt[ident])
            scores[ident].append(mask_iou(pred, truth))
    return {ident: float(np.mean(vals)) for ident, vals in scores.items()}


def sr_corpus(n: int, seed: int, sr_cfg: ModelConfig) -> list[FlowExample]:
    """Residual detail fields conditioned on a frame's own coarse upsample.

    Each example pairs a smooth base field with fine detail noise.  The
    training target is the residual between the full-resolution frame and
    the nearest-neighbour upsample of its block-mean downsample, and the
    conditioning tokens carry that upsample.  Every 2x2 block of the true
    residual averages to zero exactly, so a model fit on this corpus
    produces samples whose block means stay near zero, which keeps the
    reconstruction (upsample + sampled residual) consistent with the
    low-resolution input under block-mean downsampling.
    """
    out = []
    for i in range(n):
        rng = Rng(derive_seed(seed, "sr", i))
        base = SR_BASE_AMP * _smooth_field(rng, 1, sr_cfg.height, sr_cfg.width, sr_cfg.channels)
        detail = SR_DETAIL_AMP * rng.normals(base.shape)
        high = base + detail
        low = block_downsample(LatentVideo(high, "high"), 2)
        up = nn_upsample(low, 2)
        extra = frame_tokens(up.data[0], (2, 2), sr_cfg.model_dim, frame_index=0)
        cond = make_conditioning("fine detail frame", dim=sr_cfg.model_dim, extra=extra)
        out.append(FlowExample(high - up.data, cond))
    return out


def sr_eval_lows(n: int, seed: int, sr_cfg: ModelConfig) -> list[np.ndarray]:
    """Held-out low-tier frames drawn from the detail corpus distribution."""
    out = []
    for i in range(n):
        rng = Rng(derive_seed(seed, "sr-eval", i))
        base = SR_BASE_AMP * _smooth_field(rng, 1, sr_cfg.height, sr_cfg.width, sr_cfg.channels)
        detail = SR_DETAIL_AMP * rng.normals(base.shape)
        low = block_downsample(LatentVideo(base + detail, "high"), 2)
        out.append(low.data[0])
    return out


def sr_recipe(
    sr_cfg: ModelConfig, seed: int, n_examples: int = 48, steps: int = 1500, lr: float = 0.01
) -> tuple[ModelWeights, list[float]]:
    data = sr_corpus(n_examples, derive_seed(seed, "sr-corpus"), sr_cfg)
    return train_flow(sr_cfg, data, steps=steps, lr=lr, seed=derive_seed(seed, "sr-fit"))


def teacher_recipe(
    cfg: ModelConfig, seed: int, n_examples: int = 32, steps: int = 1200, lr: float = 0.01
) -> tuple[ModelWeights, list[float]]:
    data = toy_flow_corpus(n_examples, derive_seed(seed, "teacher-corpus"), cfg)
    return train_flow(cfg, data, steps=steps, lr=lr, seed=derive_seed(seed, "teacher-fit"))


def speaking_clip(
    seed: int,
    rms: np.ndarray,
    region: np.ndarray,
    cfg: ModelConfig,
) -> LatentVideo:
    """A clip whose masked motion follows the loudness series exactly.

    Inside the region every element moves by +-rms[f] between frames f and
    f+1, so the mean absolute difference over the region equals rms[f]
    exactly.  Outside the region nothing moves.
    """
    rng = Rng(seed)
    k = len(rms)
    h, w, d = cfg.height, cfg.width, cfg.channels
    frames = np.zeros((k + 1, h, w, d))
    frames[0] = rng.normals((h, w, d))
    region3 = np.asarray(region, dtype=bool)[..., None]
    for f in range(k):
        signs = np.where(rng.uniforms(h * w * d).reshape(h, w, d) < 0.5, -1.0, 1.0)
        step = np.where(region3, signs * rms[f], 0.0)
        frames[f + 1] = frames[f] + step
    return LatentVideo(frames, cfg.tier)


def _first_last_example(ex: FlowExample, cfg: ModelConfig) -> FlowExample:
    n = ex.x0.shape[0]
    extra = merge_token_seqs(
        [
            frame_tokens(ex.x0[0], cfg.patch[1:], cfg.model_dim, frame_index=0),
            frame_tokens(ex.x0[n - 1], cfg.patch[1:], cfg.model_dim, frame_index=n - 1),
        ]
    )
    cond = make_conditioning(
        "pattern clip", dim=cfg.model_dim,
        anchors={0: ex.x0[0], n - 1: ex.x0[n - 1]}, extra=extra,
    )
    return FlowExample(ex.x0, cond)


def distill_datasets(
    cfg: ModelConfig, seed: int, n_per_kind: int = 8, frames: int = 4
) -> dict[str, list[FlowExample]]:
    """One example list per distillation task flavor, all seed-derived."""
    text = toy_flow_corpus(n_per_kind, derive_seed(seed, "distill-text"), cfg, frames)
    anchored = [
        _first_last_example(ex, cfg)
        for ex in toy_flow_corpus(n_per_kind, derive_seed(seed, "distill-anchor"), cfg, frames)
    ]
    audio = []
    for i in range(n_per_kind):
        rng = Rng(derive_seed(seed, "distill-audio", i))
        rms = 0.2 + 0.3 * rng.uniforms(frames - 1)
        region = np.zeros((cfg.height, cfg.width), dtype=bool)
        region[: cfg.height // 2, : cfg.width // 2] = True
        clip = speaking_clip(derive_seed(seed, "distill-clip", i), rms, region, cfg)
        feats = np.full((frames, 9), np.log(1e-8))
        feats[1:, 8] = rms
        stream = project_audio(AudioFeatureSeq(feats, 8.0), cfg.model_dim)
        cond = make_conditioning(
            "speaking pattern", dim=cfg.model_dim, audio=[("spk0", stream)]
        )
        audio.append(FlowExample(clip.data, cond))
    return {"text_conditioned": text, "first_last_frame": anchored, "audio_driven": audio}


def default_distill_tasks() -> list[DistillTask]:
    return [
        DistillTask("text_conditioned", 0.5),
        DistillTask("first_last_frame", 0.25),
        DistillTask("audio_driven", 0.25),
    ]


def distill_recipe(
    cfg: ModelConfig,
    seed: int,
    teacher: ModelWeights | None = None,
    steps: int = 2000,
    segments: int = 4,
    lr: float = 0.005,
    grid: int = 8,
) -> tuple[ModelWeights, ModelWeights, TimeSchedule]:
    """Teacher (trained here unless given), schedule, and distilled student."""
    if teacher is None:
        teacher, _ = teacher_recipe(cfg, seed)
    datasets = distill_datasets(cfg, derive_seed(seed, "distill-data"))
    probe = datasets["text_conditioned"][:4]
    profile = analyze_timesteps(teacher, probe, grid, seed=derive_seed(seed, "probe"))
    schedule = build_schedule(profile, segments)
    student, _ = distill(
        teacher, default_distill_tasks(), schedule, datasets,
        steps=steps, lr=lr, seed=derive_seed(seed, "distill-fit"),
    )
    return teacher, student, schedule


def eval_distill(
    teacher: ModelWeights,
    student: ModelWeights,
    schedule: TimeSchedule,
    seed: int,
    n_seeds: int = 20,
    ref_steps: int = 32,
) -> tuple[int, list[tuple[float, float]]]:
    """Count held-out seeds where the student's few-step samples sit closer
    (MSE) to a long teacher reference than the teacher's own few-step ones.
    """
    cfg = teacher.config
    conds = toy_flow_corpus(n_seeds, derive_seed(seed, "distill-eval"), cfg)
    wins, pairs = 0, []
    for i in range(n_seeds):
        cond = conds[i].cond
        s = derive_seed(seed, "eval-seed", i)
        frames = conds[i].x0.shape[0]
        ref, _ = sample(teacher, cond, frames, s, steps=ref_steps, guidance=1.0)
        stu, _ = sample(
            student, cond, frames, s, schedule=list(schedule.breakpoints), guidance=1.0
        )
        tea, _ = sample(teacher, cond, frames, s, steps=schedule.segments, guidance=1.0)
        mse_s = float(np.mean((stu.data - ref.data) ** 2))
        mse_t = float(np.mean((tea.data - ref.data) ** 2))
        pairs.append((mse_s, mse_t))
        wins += mse_s < mse_t
    return wins, pairs


def sync_trial(seed: int, cfg: ModelConfig, frames: int = 12) -> tuple[float, float]:
    """Sync scores for one speaking clip: matched audio versus shuffled.

    The clip's in-region motion follows the loudness series exactly, so the
    matched score sits near 1; a random permutation of the same series
    breaks the alignment.
    """
    rng = Rng(derive_seed(seed, "sync-trial"))
    rms = 0.05 + 0.45 * rng.uniforms(frames - 1)
    region = np.zeros((cfg.height, cfg.width), dtype=bool)
    region[: max(1, cfg.height // 2), : max(1, cfg.width // 2)] = True
    clip = speaking_clip(derive_seed(seed, "sync-clip"), rms, region, cfg)

    feats = np.full((frames, 9), np.log(1e-8))
    feats[:-1, 8] = rms
    matched = sync_score(clip, region, AudioFeatureSeq(feats, clip.latent_fps))

    perm = np.arange(frames - 1)
    for i in range(frames - 2, 0, -1):
        j = rng.integer(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    feats_sh = feats.copy()
    feats_sh[:-1, 8] = rms[perm]
    shuffled = sync_score(clip, region, AudioFeatureSeq(feats_sh, clip.latent_fps))
    return matched, shuffled
