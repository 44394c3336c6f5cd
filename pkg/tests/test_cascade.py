import numpy as np
import pytest

from avacade.audio import AudioFeatureSeq
from avacade.backbone import ModelConfig, init_weights, with_grid
from avacade.cascade import (
    CascadeConfig,
    effective_transition_width,
    interpolate_transition,
    keyframe_indices,
    plan_pipeline,
    run_pipeline,
    select_keyframes,
    smoothstep,
)
from avacade.director import ShotPlan, Storyline
from avacade.errors import InvalidInput, PipelineError
from avacade.executor import execute
from avacade.rng import Rng
from avacade.video import LatentVideo, block_downsample, checksum


def _story(lengths: list[int]) -> Storyline:
    shots, at = [], 0
    for i, n in enumerate(lengths):
        shots.append(
            ShotPlan(at, at + n, "scene, speaks, neutral expression, camera static",
                     "artifacts, blur", "neutral", "static")
        )
        at += n
    return Storyline(shots)


def _tiny_cfg(seed: int = 5, **kw) -> CascadeConfig:
    low_cfg = ModelConfig(
        frames=8, height=4, width=4, channels=4, model_dim=16,
        n_blocks=2, n_heads=2, patch=(1, 2, 2), tap_block=1, tier="low",
    )
    hi_cfg = with_grid(low_cfg, 8, 8, "high")
    return CascadeConfig(
        low=init_weights(low_cfg, seed),
        high=init_weights(hi_cfg, seed + 1),
        global_seed=77,
        steps=3,
        **kw,
    )


def _speech_audio(frames: int, level: float = 0.3) -> AudioFeatureSeq:
    data = np.full((frames, 9), np.log(1e-4))
    data[:, 8] = level
    return AudioFeatureSeq(data, 8.0)


def test_graph_shape_counts():
    for lengths, expected in (([8], 6), ([5, 5, 6], 14), ([4, 4], 10)):
        graph = plan_pipeline(_story(lengths), _tiny_cfg())
        n = len(lengths)
        assert len(graph.jobs) == expected
        assert graph.stage_ids("blueprint") == ["blueprint"]
        assert len(graph.stage_ids("keyframe_sr")) == n + 1
        assert len(graph.stage_ids("subclip")) == n
        assert len(graph.stage_ids("transition")) == n - 1
        assert len(graph.stage_ids("clip_sr")) == n
        assert graph.stage_ids("concat") == ["concat"]
        assert graph.parallel_width("subclip") == n


def test_keyframe_selection():
    story = _story([6, 5, 5])
    assert keyframe_indices(story) == [0, 6, 11, 15]
    assert keyframe_indices(_story([8])) == [0, 7]
    bp = LatentVideo(Rng(1).normals((16, 4, 4, 4)), "low")
    frames = select_keyframes(bp, story)
    assert [i for i, _ in frames] == [0, 6, 11, 15]
    for i, frame in frames:
        assert frame is bp.data[i] or np.array_equal(frame, bp.data[i])


def test_smoothstep_weights_monotone():
    w = [smoothstep((k + 1) / 5) for k in range(4)]
    assert all(b > a for a, b in zip(w, w[1:]))
    assert 0 < w[0] and w[-1] < 1


def test_transition_blend():
    rng = Rng(3)
    tail = rng.normals((4, 4, 4, 2))
    head = rng.normals((4, 4, 4, 2))
    out = interpolate_transition(tail, head)
    assert out.shape == tail.shape
    lo = np.minimum(tail, head)
    hi = np.maximum(tail, head)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    assert np.array_equal(interpolate_transition(tail, tail), tail)
    with pytest.raises(InvalidInput):
        interpolate_transition(tail, head[:3])


def test_effective_width_bands():
    assert effective_transition_width(np.zeros(8), 4) == 8
    assert effective_transition_width(np.empty(0), 4) == 8
    assert effective_transition_width(np.full(8, 0.3), 4) == 2
    assert effective_transition_width(np.full(8, 0.03), 4) == 4
    assert effective_transition_width(np.full(8, 0.3), 3) == 2  # floor at 2


def test_config_validation():
    cfg = _tiny_cfg()
    with pytest.raises(InvalidInput):
        CascadeConfig(low=cfg.high, high=cfg.high, global_seed=1)
    bad_hi = init_weights(with_grid(cfg.low.config, 12, 12, "high"), 2)
    with pytest.raises(InvalidInput):
        CascadeConfig(low=cfg.low, high=bad_hi, global_seed=1)


def test_pipeline_outputs_and_anchoring():
    story = _story([5, 5])
    cfg = _tiny_cfg(audio={"spk0": _speech_audio(10)})
    graph = plan_pipeline(story, cfg)
    out = execute(graph, workers=1)

    bp = out["blueprint"]
    assert bp.tier == "low" and bp.frames == 10

    for i in (0, 1, 2):
        kf = out[f"keyframe_sr/{i}"]
        assert kf.tier == "high" and kf.frames == 1 and kf.grid == (8, 8)

    for i, (first_kf, last_kf) in enumerate([(0, 1), (1, 2)]):
        clip = out[f"subclip/{i}"]
        assert clip.tier == "low" and clip.frames == 5
        a0 = block_downsample(out[f"keyframe_sr/{first_kf}"], 2).data[0]
        a1 = block_downsample(out[f"keyframe_sr/{last_kf}"], 2).data[0]
        assert np.array_equal(clip.data[0], a0)
        assert np.array_equal(clip.data[-1], a1)

    tr = out["transition/0"]
    assert tr.tier == "low"
    assert tr.meta["junction"] == 5
    # speech-level audio at the junction narrows the fade
    assert tr.meta["width"] == 2 and tr.frames == 2

    final = out["concat"]
    assert final.tier == "high" and final.frames == 10 and final.grid == (8, 8)


def test_silent_junction_widens():
    story = _story([8, 8])
    cfg = _tiny_cfg()  # no audio at all
    out = execute(plan_pipeline(story, cfg), workers=1)
    assert out["transition/0"].meta["width"] == 8


def test_worker_counts_bit_identical(tmp_path):
    story = _story([4, 4, 4])
    cfg = _tiny_cfg(audio={"spk0": _speech_audio(12)})
    final1 = run_pipeline(story, cfg, workers=1, run_dir=str(tmp_path / "w1"))
    final4 = run_pipeline(story, cfg, workers=4, run_dir=str(tmp_path / "w4"))
    assert checksum(final1) == checksum(final4)

    from avacade.executor import read_job_meta

    meta1 = read_job_meta(str(tmp_path / "w1"))
    meta4 = read_job_meta(str(tmp_path / "w4"))
    assert set(meta1) == set(meta4)
    for jid in meta1:
        assert meta1[jid]["checksum"] == meta4[jid]["checksum"], jid
    assert (tmp_path / "w1" / "final" / "video.bin").exists()
    assert (tmp_path / "w1" / "manifest.json").exists()


def test_seed_isolation():
    story = _story([4, 4])
    cfg = _tiny_cfg()
    base = execute(plan_pipeline(story, cfg), workers=1)

    bumped_graph = plan_pipeline(story, cfg)
    bumped_graph.jobs["subclip/1"].seed += 1
    bumped = execute(bumped_graph, workers=1)

    for jid in ("blueprint", "keyframe_sr/0", "keyframe_sr/1", "keyframe_sr/2",
                "subclip/0", "clip_sr/0"):
        assert checksum(base[jid]) == checksum(bumped[jid]), jid
    for jid in ("subclip/1", "transition/0", "clip_sr/1", "concat"):
        assert checksum(base[jid]) != checksum(bumped[jid]), jid


def test_fault_injection_in_pipeline():
    story = _story([4, 4, 4])
    cfg = _tiny_cfg()
    graph = plan_pipeline(story, cfg)

    def boom(seed, inputs):
        raise RuntimeError("injected")

    graph.jobs["subclip/1"].fn = boom
    with pytest.raises(PipelineError) as err:
        execute(graph, workers=2)
    assert err.value.failed == ("subclip/1",)
    assert set(err.value.skipped) == {"transition/0", "transition/1", "clip_sr/1", "concat"}
    done = set(err.value.outputs)
    assert {"blueprint", "subclip/0", "subclip/2", "clip_sr/0", "clip_sr/2"} <= done


def test_audio_shorter_than_timeline_rejected():
    story = _story([6, 6])
    cfg = _tiny_cfg(audio={"spk0": _speech_audio(8)})
    with pytest.raises(PipelineError):
        run_pipeline(story, cfg, workers=1)


def test_blueprint_prompt_sensitivity():
    story = _story([4, 4])
    cfg = _tiny_cfg()
    base = execute(plan_pipeline(story, cfg), workers=1)
    changed_story = _story([4, 4])
    changed_story.shots[1].positive_prompt = "different scene, waves, sad expression, camera static"
    changed = execute(plan_pipeline(changed_story, cfg), workers=1)
    assert checksum(base["blueprint"]) != checksum(changed["blueprint"])
