"""Command line front end: plan, generate, distill, annotate, eval, report.

Every subcommand reads one run-spec JSON file plus --seed, --workers, and
--out; all artifacts land inside the --out directory.  Run-spec keys, all
optional unless a subcommand needs them:

    script       instruction text for planning
    scene        {"setting", "layout", "camera"} scene descriptor
    audio        {identity: wav_path} driving audio per character
    references   {identity: pgm_path} reference images at the low-tier grid
    checkpoints  {"low": path, "high": path} trained weights to reuse
    storyline    storyline JSON path (generate skips planning)
    video        latent video .bin path (annotate / eval / render input)
    records      preference verdicts CSV path (report input)
    region       [r0, r1, c0, c1] eval region on the output grid
    category_targets  {category: count} manifest quota for report
    config       scalar overrides, see DEFAULTS

Training is deliberately cheap at the default toy sizes, so generate and
distill simply fit their models on the fly when no checkpoint is given.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

import numpy as np

from .annotate import IntensityDetector, annotate_video, validate_tracks
from .audio import AudioFeatureSeq, detect_pauses, featurize, load_wav
from .backbone import (
    ModelConfig,
    ModelWeights,
    encode_reference,
    load_checkpoint,
    sample,
    save_checkpoint,
    weights_checksum,
    with_grid,
)
from .cascade import CascadeConfig, run_pipeline
from .corpus import distill_recipe, eval_distill, sr_recipe, teacher_recipe
from .director import DirectorInput, Storyline, plan_storyline
from .errors import AvacadeError, UndefinedScore
from .harness import (
    read_records,
    render_report,
    render_report_csv,
    summarize,
    sync_score,
    validate_manifest,
)
from .rng import derive_seed
from .video import (
    LatentVideo,
    checksum,
    load_latent,
    read_pgm,
    render_contact_sheet,
    render_frame_pgm,
)

DEFAULTS = {
    "frames": 16,
    "height": 8,
    "width": 8,
    "channels": 4,
    "model_dim": 16,
    "n_blocks": 2,
    "n_heads": 2,
    "tap_block": 1,
    "steps": 8,
    "guidance": 2.0,
    "transition_frames": 4,
    "latent_fps": 8.0,
    "rounds": 2,
    "max_clip_frames": None,
    "teacher_steps": 1200,
    "sr_steps": 1500,
    "distill_steps": 2000,
    "distill_segments": 4,
    "distill_lr": 0.005,
    "distill_grid": 8,
    "eval_seeds": 20,
}


def load_runspec(path: str) -> dict:
    with open(path) as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict):
        raise AvacadeError("run spec must be a JSON object")
    unknown = set(spec.get("config", {})) - set(DEFAULTS)
    if unknown:
        raise AvacadeError(f"unknown config keys {sorted(unknown)}")
    return spec


def _conf(spec: dict) -> dict:
    conf = dict(DEFAULTS)
    conf.update(spec.get("config", {}))
    return conf


def _model_cfgs(conf: dict) -> tuple[ModelConfig, ModelConfig]:
    low = ModelConfig(
        frames=conf["frames"],
        height=conf["height"],
        width=conf["width"],
        channels=conf["channels"],
        model_dim=conf["model_dim"],
        n_blocks=conf["n_blocks"],
        n_heads=conf["n_heads"],
        patch=(1, 2, 2),
        tap_block=conf["tap_block"],
        tier="low",
    )
    return low, with_grid(low, 2 * conf["height"], 2 * conf["width"], "high")


def _load_audio(spec: dict, conf: dict) -> dict[str, AudioFeatureSeq]:
    out = {}
    for ident, path in sorted(spec.get("audio", {}).items()):
        out[ident] = featurize(load_wav(path), conf["latent_fps"])
    return out


def _tier_weights(spec: dict, conf: dict, seed: int, tier: str) -> ModelWeights:
    path = spec.get("checkpoints", {}).get(tier)
    if path:
        weights, _ = load_checkpoint(path)
        return weights
    low_cfg, high_cfg = _model_cfgs(conf)
    if tier == "low":
        print(f"training low tier ({conf['teacher_steps']} steps)")
        weights, _ = teacher_recipe(
            low_cfg, derive_seed(seed, "cli-low"), steps=conf["teacher_steps"]
        )
    else:
        print(f"training high tier ({conf['sr_steps']} steps)")
        weights, _ = sr_recipe(
            high_cfg, derive_seed(seed, "cli-high"), steps=conf["sr_steps"]
        )
    return weights


def _plan(spec: dict, conf: dict, seed: int) -> tuple[Storyline, list]:
    audio = _load_audio(spec, conf)
    idents = sorted(audio)
    features = audio[idents[0]] if idents else None
    if features is not None:
        boundaries = detect_pauses(features)
    else:
        from .audio import SegmentBoundary

        boundaries = [
            SegmentBoundary(0, "forced"),
            SegmentBoundary(conf["frames"], "forced"),
        ]
    inp = DirectorInput(
        script=spec.get("script", ""),
        features=features,
        scene_info=spec.get("scene", {}),
        identities=idents,
    )
    return plan_storyline(
        inp,
        boundaries,
        rounds=conf["rounds"],
        max_clip_frames=conf["max_clip_frames"],
    )


def cmd_plan(spec: dict, args) -> int:
    conf = _conf(spec)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storyline, transcript = _plan(spec, conf, args.seed)
    (out / "storyline.json").write_text(storyline.to_json())
    (out / "transcript.json").write_text(
        json.dumps([m.to_dict() for m in transcript], indent=2)
    )
    print(
        f"planned {len(storyline.shots)} shots over {storyline.total_frames} frames"
        f" -> {out / 'storyline.json'}"
    )
    return 0


def cmd_generate(spec: dict, args) -> int:
    conf = _conf(spec)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "storyline" in spec:
        storyline = Storyline.from_json(pathlib.Path(spec["storyline"]).read_text())
    else:
        storyline, _ = _plan(spec, conf, args.seed)
        (out / "storyline.json").write_text(storyline.to_json())
    low = _tier_weights(spec, conf, args.seed, "low")
    high = _tier_weights(spec, conf, args.seed, "high")
    audio = _load_audio(spec, conf)
    references = []
    for ident, path in sorted(spec.get("references", {}).items()):
        gray = read_pgm(path)
        frame = np.repeat(gray[:, :, None], conf["channels"], axis=2)
        references.append((ident, encode_reference(low, frame, ident)))
    cfg = CascadeConfig(
        low=low,
        high=high,
        global_seed=args.seed,
        audio=audio,
        references=references,
        steps=conf["steps"],
        guidance=conf["guidance"],
        transition_frames=conf["transition_frames"],
        latent_fps=conf["latent_fps"],
    )
    final = run_pipeline(storyline, cfg, workers=args.workers, run_dir=str(out))
    print(f"generated {final.frames} frames -> {out / 'final' / 'video.bin'}")
    print(f"checksum {checksum(final)}")
    return 0


def cmd_fit(spec: dict, args) -> int:
    conf = _conf(spec)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    low_cfg, high_cfg = _model_cfgs(conf)
    print(f"training low tier ({conf['teacher_steps']} steps)")
    low, low_losses = teacher_recipe(
        low_cfg, derive_seed(args.seed, "cli-low"), steps=conf["teacher_steps"]
    )
    print(f"training high tier ({conf['sr_steps']} steps)")
    high, high_losses = sr_recipe(
        high_cfg, derive_seed(args.seed, "cli-high"), steps=conf["sr_steps"]
    )
    save_checkpoint(str(out / "low.ckpt"), low, {"role": "low"})
    save_checkpoint(str(out / "high.ckpt"), high, {"role": "high"})
    (out / "fit.json").write_text(
        json.dumps(
            {
                "low": {"checksum": weights_checksum(low), "final_loss": low_losses[-1]},
                "high": {"checksum": weights_checksum(high), "final_loss": high_losses[-1]},
            },
            indent=2,
        )
    )
    print(f"saved {out / 'low.ckpt'} and {out / 'high.ckpt'}")
    return 0


def cmd_distill(spec: dict, args) -> int:
    conf = _conf(spec)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    low_cfg, _ = _model_cfgs(conf)
    path = spec.get("checkpoints", {}).get("low")
    teacher = load_checkpoint(path)[0] if path else None
    if teacher is None:
        print(f"training teacher ({conf['teacher_steps']} steps)")
    print(f"distilling ({conf['distill_steps']} steps)")
    teacher, student, schedule = distill_recipe(
        low_cfg,
        args.seed,
        teacher=teacher,
        steps=conf["distill_steps"],
        segments=conf["distill_segments"],
        lr=conf["distill_lr"],
        grid=conf["distill_grid"],
    )
    wins, pairs = eval_distill(
        teacher, student, schedule, args.seed, n_seeds=conf["eval_seeds"]
    )
    save_checkpoint(str(out / "student.ckpt"), student, {"role": "student"})
    save_checkpoint(str(out / "teacher.ckpt"), teacher, {"role": "teacher"})
    (out / "schedule.json").write_text(json.dumps(schedule.to_dict(), indent=2))
    (out / "distill.json").write_text(
        json.dumps(
            {
                "wins": wins,
                "trials": conf["eval_seeds"],
                "mse_pairs": [{"student": s, "teacher": t} for s, t in pairs],
            },
            indent=2,
        )
    )
    print(
        f"student beats {schedule.segments}-step teacher on {wins}/{conf['eval_seeds']}"
        f" held-out seeds -> {out / 'student.ckpt'}"
    )
    return 0


def cmd_annotate(spec: dict, args) -> int:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    video = load_latent(spec["video"])
    arr = video.data[:, :, :, 0]
    tracks = annotate_video(arr)
    reason = getattr(tracks, "reason", None)
    if reason is not None:
        (out / "annotations.json").write_text(json.dumps({"tracks": [], "reason": reason}))
        print(f"no tracks: {reason}")
        return 0
    detector = IntensityDetector()
    detections = [detector.detect(arr[f], f) for f in range(video.frames)]
    kept, dropped = validate_tracks(tracks, detections)
    payload = {
        "tracks": [
            {
                "identity_id": t.identity_id,
                "bboxes": [list(b) if b is not None else None for b in t.bboxes],
                "masks": t.masks.astype(int).tolist(),
            }
            for t in kept
        ],
        "filtered": [t.identity_id for t, _ in dropped],
    }
    (out / "annotations.json").write_text(json.dumps(payload))
    print(f"kept {len(kept)} tracks, filtered {len(dropped)} -> {out / 'annotations.json'}")
    return 0


def cmd_eval(spec: dict, args) -> int:
    conf = _conf(spec)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    video = load_latent(spec["video"])
    audio = _load_audio(spec, conf)
    if not audio:
        raise AvacadeError("eval needs at least one audio track")
    h, w = video.data.shape[1], video.data.shape[2]
    region = np.ones((h, w), dtype=bool)
    if "region" in spec:
        r0, r1, c0, c1 = spec["region"]
        region = np.zeros((h, w), dtype=bool)
        region[r0:r1, c0:c1] = True
    scores: dict[str, float | None] = {}
    for ident, feats in audio.items():
        try:
            scores[ident] = sync_score(video, region, feats)
        except UndefinedScore:
            scores[ident] = None
    (out / "eval.json").write_text(json.dumps({"sync": scores}, indent=2))
    for ident, score in scores.items():
        print(f"sync {ident}: " + ("undefined" if score is None else f"{score:+.3f}"))
    return 0


def cmd_report(spec: dict, args) -> int:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = read_records(spec["records"])
    rows = summarize(records)
    text = render_report(rows)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(render_report_csv(rows))
    print(text, end="")
    if "category_targets" in spec:
        cases = list(dict.fromkeys((r.case_id, r.category) for r in records))
        manifest = validate_manifest(cases, spec["category_targets"])
        (out / "manifest.json").write_text(
            json.dumps(
                {"counts": manifest.counts, "violations": manifest.violations}, indent=2
            )
        )
        status = "ok" if manifest.valid else f"{len(manifest.violations)} violations"
        print(f"manifest: {status}")
    return 0


def cmd_render(spec: dict, args) -> int:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    video = load_latent(spec["video"])
    render_contact_sheet(str(out / "sheet.ppm"), video)
    for f in range(video.frames):
        render_frame_pgm(str(out / f"frame_{f:03d}.pgm"), video, f)
    print(f"rendered {video.frames} frames -> {out}")
    return 0


_COMMANDS = {
    "plan": cmd_plan,
    "generate": cmd_generate,
    "fit": cmd_fit,
    "distill": cmd_distill,
    "annotate": cmd_annotate,
    "eval": cmd_eval,
    "report": cmd_report,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avacade",
        description="Plan, generate, distill, annotate, and evaluate toy avatar videos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("runspec", help="path to the run-spec JSON file")
        p.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
        p.add_argument("--workers", type=int, default=1, help="parallel workers (default 1)")
        p.add_argument("--out", default="run", help="output directory (default ./run)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_runspec(args.runspec)
        return _COMMANDS[args.command](spec, args)
    except AvacadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
