"""Nested coarse-to-fine video generation over a parallel job graph.

One low-resolution pass lays out the whole timeline (the blueprint), the
frames at shot boundaries are upscaled into high-resolution keyframes, and
each shot is then expanded into an audio-conditioned sub-clip pinned
bit-exactly to its two flanking keyframes.  Junctions between sub-clips get
cross-faded transition frames whose width adapts to the local loudness
(narrow during speech, wide in silence), every sub-clip is super-resolved
frame by frame, and the final stitch replaces the junction frames with the
super-resolved transitions, keeping the total length equal to the audio
timeline.

Stage outputs are plain latent videos keyed by job id, each job's seed is
derived from the global seed and the id alone, and the graph executes with
any worker count without changing a single bit of the result.
"""

from __future__ import annotations

import json
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioFeatureSeq, slice_features
from .backbone import ModelWeights, sample
from .conditioning import TokenSeq, frame_tokens, make_conditioning, merge_token_seqs, project_audio
from .director import ShotPlan, Storyline
from .errors import InvalidInput
from .executor import Job, JobGraph, execute, job_seed
from .rng import derive_seed
from .video import (
    LatentVideo,
    block_downsample,
    checksum,
    concat_frames,
    nn_upsample,
    render_contact_sheet,
    save_latent,
)

TRANSITION_FRAMES = 4
TRANSITION_MAX = 8
TRANSITION_MIN = 2
# Junction loudness bands: below the pause detector's threshold the
# cross-fade widens; above clear speech level it narrows.
QUIET_RMS = 0.02
SPEECH_RMS = 0.05


@dataclass
class CascadeConfig:
    """Models, audio, and knobs shared by every stage of one run."""

    low: ModelWeights
    high: ModelWeights
    global_seed: int
    audio: dict[str, AudioFeatureSeq] = field(default_factory=dict)
    references: list[tuple[str, TokenSeq]] = field(default_factory=list)
    mask_head: object | None = None
    steps: int = 24
    guidance: float = 2.0
    transition_frames: int = TRANSITION_FRAMES
    latent_fps: float = 8.0

    def __post_init__(self) -> None:
        lo, hi = self.low.config, self.high.config
        if lo.tier != "low" or hi.tier != "high":
            raise InvalidInput("need a low-tier and a high-tier model")
        if (hi.height, hi.width) != (2 * lo.height, 2 * lo.width):
            raise InvalidInput("high grid must be exactly double the low grid")
        if hi.channels != lo.channels or hi.model_dim != lo.model_dim:
            raise InvalidInput("tiers must share channel count and model width")
        if self.transition_frames < 1:
            raise InvalidInput("transition_frames must be >= 1")


def shot_boundaries(s: Storyline) -> list[int]:
    s.check_partition()
    return [s.shots[0].start_frame] + [shot.end_frame for shot in s.shots]


def keyframe_indices(s: Storyline) -> list[int]:
    """Blueprint frames to upscale: every shot start plus the last frame."""
    bounds = shot_boundaries(s)
    return bounds[:-1] + [bounds[-1] - 1]


def select_keyframes(bp: LatentVideo, s: Storyline) -> list[tuple[int, np.ndarray]]:
    idx = keyframe_indices(s)
    if idx[-1] >= bp.data.shape[0]:
        raise InvalidInput("storyline extends past the blueprint")
    return [(i, bp.data[i]) for i in idx]


def _global_prompt(s: Storyline) -> str:
    seen = list(dict.fromkeys(shot.positive_prompt for shot in s.shots))
    return " | ".join(seen)


def _audio_streams(cfg: CascadeConfig, start: int, end: int) -> list[tuple[str, np.ndarray]]:
    streams = []
    for ident in sorted(cfg.audio):
        feats = cfg.audio[ident]
        if len(feats) < end:
            raise InvalidInput(
                f"audio for {ident!r} covers {len(feats)} frames, need {end}"
            )
        streams.append((ident, project_audio(slice_features(feats, start, end), cfg.low.config.model_dim)))
    return streams


def generate_blueprint(s: Storyline, cfg: CascadeConfig, seed: int) -> LatentVideo:
    """One low-tier sample over the full timeline, globally conditioned."""
    total = s.total_frames
    cond = make_conditioning(
        _global_prompt(s),
        s.shots[0].negative_prompt,
        dim=cfg.low.config.model_dim,
        audio=_audio_streams(cfg, 0, total),
        references=cfg.references,
    )
    video, _ = sample(
        cfg.low, cond, total, seed, steps=cfg.steps, guidance=cfg.guidance,
        mask_head=cfg.mask_head, latent_fps=cfg.latent_fps,
    )
    return video


def _sr_frame(
    frame_low: np.ndarray, shot: ShotPlan, cfg: CascadeConfig, seed: int
) -> np.ndarray:
    """Sample a high-tier detail residual and add it to the coarse upsample."""
    lo = cfg.low.config
    if frame_low.shape != (lo.height, lo.width, lo.channels):
        raise InvalidInput(f"expected a low-tier frame, got {frame_low.shape}")
    up = nn_upsample(LatentVideo(frame_low[None], "low", cfg.latent_fps), 2)
    extra = frame_tokens(
        up.data[0], cfg.high.config.patch[1:], cfg.high.config.model_dim, frame_index=0
    )
    cond = make_conditioning(
        shot.positive_prompt, shot.negative_prompt,
        dim=cfg.high.config.model_dim, extra=extra,
    )
    video, _ = sample(
        cfg.high, cond, 1, seed, steps=cfg.steps, guidance=cfg.guidance,
        latent_fps=cfg.latent_fps,
    )
    return up.data[0] + video.data[0]


def upscale_keyframe(
    frame_low: np.ndarray, shot: ShotPlan, cfg: CascadeConfig, seed: int
) -> LatentVideo:
    """Double the spatial grid of one frame, guided by its own upsample."""
    return LatentVideo(_sr_frame(frame_low, shot, cfg, seed)[None], "high", cfg.latent_fps)


def superres_clip(clip: LatentVideo, shot: ShotPlan, cfg: CascadeConfig, seed: int) -> LatentVideo:
    """Frame-by-frame super-resolution of a low-tier clip."""
    if clip.tier != "low":
        raise InvalidInput(f"expected a low-tier clip, got {clip.tier!r}")
    frames = [
        _sr_frame(clip.data[f], shot, cfg, derive_seed(seed, "frame", f))
        for f in range(clip.data.shape[0])
    ]
    return LatentVideo(np.stack(frames), "high", cfg.latent_fps, dict(clip.meta))


def expand_subclip(
    first_hi: LatentVideo,
    last_hi: LatentVideo,
    shot: ShotPlan,
    bp_first: np.ndarray,
    bp_last: np.ndarray,
    cfg: CascadeConfig,
    seed: int,
) -> LatentVideo:
    """Fill a shot between two keyframes, synced to its audio slice.

    The high-tier keyframes are block-averaged back to the low grid and
    pinned as the first and last frames; the blueprint's two boundary
    frames ride along as extra conditioning tokens.
    """
    n_frames = shot.frames
    if first_hi.tier != "high" or last_hi.tier != "high":
        raise InvalidInput("anchor keyframes must be high tier")
    a0 = block_downsample(first_hi, 2).data[0]
    a1 = block_downsample(last_hi, 2).data[0]
    dim = cfg.low.config.model_dim
    patch_hw = cfg.low.config.patch[1:]
    extra = merge_token_seqs(
        [
            frame_tokens(bp_first, patch_hw, dim, frame_index=0),
            frame_tokens(bp_last, patch_hw, dim, frame_index=n_frames - 1),
        ]
    )
    streams = _audio_streams(cfg, shot.start_frame, shot.end_frame)
    for ident, stream in streams:
        if stream.shape[0] != n_frames:
            raise InvalidInput(f"audio slice for {ident!r} does not match the shot length")
    cond = make_conditioning(
        shot.positive_prompt, shot.negative_prompt, dim=dim,
        audio=streams, anchors={0: a0, n_frames - 1: a1},
        references=cfg.references, extra=extra,
    )
    video, _ = sample(
        cfg.low, cond, n_frames, seed, steps=cfg.steps, guidance=cfg.guidance,
        mask_head=cfg.mask_head, latent_fps=cfg.latent_fps,
    )
    return video


def smoothstep(u: float) -> float:
    return 3.0 * u * u - 2.0 * u * u * u


def effective_transition_width(local_rms: np.ndarray, base: int = TRANSITION_FRAMES) -> int:
    """Cross-fade width from junction loudness: speech narrows, silence widens."""
    mu = float(np.mean(local_rms)) if local_rms.size else 0.0
    if mu < QUIET_RMS:
        return min(TRANSITION_MAX, 2 * base)
    if mu > SPEECH_RMS:
        return max(TRANSITION_MIN, base // 2)
    return base


def interpolate_transition(tail: np.ndarray, head: np.ndarray) -> np.ndarray:
    """Convex cross-fade from tail frames into head frames.

    Frame k mixes tail[k] and head[k] with a smoothstep weight at
    (k+1)/(T+1), strictly increasing in k, so equal inputs pass through
    unchanged and every output entry stays within the input range.
    """
    tail = np.asarray(tail, dtype=np.float64)
    head = np.asarray(head, dtype=np.float64)
    if tail.shape != head.shape:
        raise InvalidInput(f"segment shapes differ: {tail.shape} vs {head.shape}")
    if tail.ndim < 1 or tail.shape[0] < 1:
        raise InvalidInput("segments must hold at least one frame")
    n = tail.shape[0]
    w = np.array([smoothstep((k + 1) / (n + 1)) for k in range(n)])
    w = w.reshape((n,) + (1,) * (tail.ndim - 1))
    # tail + w*(head-tail) rather than (1-w)*tail + w*head: equal inputs
    # must pass through bit-exactly, which the two-product form breaks.
    return tail + w * (head - tail)


def _junction_rms(cfg: CascadeConfig, junction: int, width: int) -> np.ndarray:
    chunks = []
    for ident in sorted(cfg.audio):
        rms = cfg.audio[ident].rms
        lo = max(0, junction - width)
        hi = min(len(rms), junction + width)
        if hi > lo:
            chunks.append(rms[lo:hi])
    return np.concatenate(chunks) if chunks else np.empty(0)


def plan_pipeline(s: Storyline, cfg: CascadeConfig) -> JobGraph:
    """Build the whole run as one dependency graph of pure, seeded jobs.

    For n shots: one blueprint, n+1 keyframe upscales, n sub-clips each
    waiting on its two flanking keyframes, n-1 junction transitions, n
    clip super-resolutions, and one final stitch.
    """
    s.check_partition()
    n = len(s.shots)
    if n < 1:
        raise InvalidInput("storyline has no shots")
    bounds = shot_boundaries(s)
    kf_idx = keyframe_indices(s)
    graph = JobGraph()

    def add(job_id: str, stage: str, deps: tuple[str, ...], fn) -> None:
        graph.add(Job(job_id, stage, deps, job_seed(cfg.global_seed, job_id), fn))

    add("blueprint", "blueprint", (), lambda seed, inputs: generate_blueprint(s, cfg, seed))

    for i in range(n + 1):
        shot = s.shots[min(i, n - 1)]
        frame_at = kf_idx[i]

        def kf_fn(seed, inputs, shot=shot, frame_at=frame_at):
            return upscale_keyframe(inputs["blueprint"].data[frame_at], shot, cfg, seed)

        add(f"keyframe_sr/{i}", "keyframe_sr", ("blueprint",), kf_fn)

    for i in range(n):
        shot = s.shots[i]
        first_at, last_at = kf_idx[i], kf_idx[i + 1]

        def sub_fn(seed, inputs, i=i, shot=shot, first_at=first_at, last_at=last_at):
            bp = inputs["blueprint"]
            return expand_subclip(
                inputs[f"keyframe_sr/{i}"], inputs[f"keyframe_sr/{i + 1}"], shot,
                bp.data[first_at], bp.data[last_at], cfg, seed,
            )

        add(
            f"subclip/{i}", "subclip",
            ("blueprint", f"keyframe_sr/{i}", f"keyframe_sr/{i + 1}"), sub_fn,
        )

    for i in range(n - 1):
        junction = bounds[i + 1]
        left_len = s.shots[i].frames
        right_len = s.shots[i + 1].frames

        def tr_fn(seed, inputs, i=i, junction=junction, left_len=left_len, right_len=right_len):
            base = cfg.transition_frames
            width = effective_transition_width(_junction_rms(cfg, junction, base), base)
            width = min(width, left_len, right_len)
            left = inputs[f"subclip/{i}"]
            right = inputs[f"subclip/{i + 1}"]
            blend = interpolate_transition(left.data[-width:], right.data[:width])
            return LatentVideo(
                blend, "low", cfg.latent_fps, {"junction": junction, "width": width}
            )

        add(f"transition/{i}", "transition", (f"subclip/{i}", f"subclip/{i + 1}"), tr_fn)

    for i in range(n):
        def sr_fn(seed, inputs, i=i, shot=s.shots[i]):
            return superres_clip(inputs[f"subclip/{i}"], shot, cfg, seed)

        add(f"clip_sr/{i}", "clip_sr", (f"subclip/{i}",), sr_fn)

    concat_deps = tuple(f"clip_sr/{i}" for i in range(n)) + tuple(
        f"transition/{i}" for i in range(n - 1)
    )

    def concat_fn(seed, inputs):
        final = concat_frames([inputs[f"clip_sr/{i}"] for i in range(n)])
        data = final.data.copy()
        for i in range(n - 1):
            tr = inputs[f"transition/{i}"]
            shot = s.shots[i + 1]
            sr_tr = superres_clip(tr, shot, cfg, derive_seed(seed, "transition", i))
            width = tr.data.shape[0]
            junction = tr.meta["junction"]
            h = math.ceil(width / 2)
            data[junction - h: junction - h + width] = sr_tr.data
        return LatentVideo(
            data, "high", cfg.latent_fps, {"shots": n, "frames": data.shape[0]}
        )

    add("concat", "concat", concat_deps, concat_fn)
    graph.validate()
    return graph


def run_pipeline(
    s: Storyline, cfg: CascadeConfig, workers: int = 1, run_dir: str | None = None
) -> LatentVideo:
    """Plan, execute, and (optionally) archive one full run."""
    graph = plan_pipeline(s, cfg)
    outputs = execute(graph, workers=workers, run_dir=run_dir)
    final = outputs["concat"]
    if final.data.shape[0] != s.total_frames:
        raise InvalidInput("stitched video does not match the storyline span")
    if run_dir is not None:
        root = pathlib.Path(run_dir)
        final_dir = root / "final"
        final_dir.mkdir(parents=True, exist_ok=True)
        save_latent(str(final_dir / "video.bin"), final)
        render_contact_sheet(str(final_dir / "sheet.ppm"), final)
        manifest = {
            "storyline": json.loads(s.to_json()),
            "global_seed": cfg.global_seed,
            "steps": cfg.steps,
            "guidance": cfg.guidance,
            "transition_frames": cfg.transition_frames,
            "latent_fps": cfg.latent_fps,
            "workers": workers,
            "jobs": graph.validate(),
            "final_checksum": checksum(final),
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return final
