"""Shared trained-model fixtures, built once per session.

The expensive artifacts (trained tiers, pipeline runs, mask head, distilled
student) are session-scoped so the full-system checks in
test_acceptance.py share one training run instead of refitting per test.
"""

import time

import numpy as np
import pytest

from avacade.audio import SegmentBoundary
from avacade.backbone import ModelConfig, init_weights, weights_checksum, with_grid
from avacade.cascade import CascadeConfig, run_pipeline
from avacade.corpus import (
    distill_recipe,
    eval_distill,
    eval_head_iou,
    head_recipe,
    sr_recipe,
    teacher_recipe,
)
from avacade.director import DirectorInput, plan_storyline
from avacade.executor import read_job_meta

# Default toy sizes for the end-to-end pipeline: 16 latent frames per shot on
# an 8x8 low-tier grid, doubled to 16x16 at the high tier.  Channel and width
# choices keep a full 3-shot run well under a minute on one CPU core.
TOY_LOW = ModelConfig(
    frames=16, height=8, width=8, channels=4, model_dim=16,
    n_blocks=2, n_heads=2, patch=(1, 2, 2), tap_block=1, tier="low",
)

# Small grid for the distillation fixture; schedule quality, not visual
# fidelity, is what the checks exercise.
DISTILL_CFG = ModelConfig(
    frames=4, height=4, width=4, channels=4, model_dim=16,
    n_blocks=2, n_heads=2, patch=(1, 2, 2), tap_block=1, tier="low",
)


@pytest.fixture(scope="session")
def toy_tiers():
    """Trained low-tier backbone and high-tier detail model."""
    high_cfg = with_grid(TOY_LOW, 16, 16, "high")
    low, _ = teacher_recipe(TOY_LOW, 11)
    high, _ = sr_recipe(high_cfg, 12)
    return {"low_cfg": TOY_LOW, "high_cfg": high_cfg, "low": low, "high": high}


@pytest.fixture(scope="session")
def three_shot_storyline():
    inp = DirectorInput(script="A calm scene. Then a happy turn. Finally a sad farewell.")
    bounds = [
        SegmentBoundary(0, "forced"),
        SegmentBoundary(16, "pause"),
        SegmentBoundary(32, "pause"),
        SegmentBoundary(48, "forced"),
    ]
    return plan_storyline(inp, bounds)


@pytest.fixture(scope="session")
def pipeline_runs(toy_tiers, three_shot_storyline, tmp_path_factory):
    """The same 3-shot run executed with one worker and with four."""
    story, _ = three_shot_storyline
    cfg = CascadeConfig(low=toy_tiers["low"], high=toy_tiers["high"], global_seed=7)
    root = tmp_path_factory.mktemp("pipeline")
    t0 = time.time()
    v1 = run_pipeline(story, cfg, workers=1, run_dir=str(root / "w1"))
    t1 = time.time() - t0
    t0 = time.time()
    v4 = run_pipeline(story, cfg, workers=4, run_dir=str(root / "w4"))
    t4 = time.time() - t0
    return {
        "story": story,
        "v1": v1, "v4": v4, "t1": t1, "t4": t4,
        "meta1": read_job_meta(str(root / "w1")),
        "meta4": read_job_meta(str(root / "w4")),
    }


@pytest.fixture(scope="session")
def trained_head():
    """Mask head fit on the two-rectangle corpus over a frozen backbone."""
    backbone = init_weights(ModelConfig(), 21)
    before = weights_checksum(backbone)
    head, losses = head_recipe(backbone, 22)
    after = weights_checksum(backbone)
    iou = eval_head_iou(backbone, head, 23)
    return {
        "backbone": backbone, "head": head, "losses": losses,
        "checksum_before": before, "checksum_after": after, "iou": iou,
    }


@pytest.fixture(scope="session")
def distilled():
    """Teacher, few-step student, and error-mass schedule, plus held-out wins."""
    teacher, _ = teacher_recipe(DISTILL_CFG, 31)
    before = weights_checksum(teacher)
    _, student, schedule = distill_recipe(DISTILL_CFG, 31, teacher=teacher)
    after = weights_checksum(teacher)
    wins, pairs = eval_distill(teacher, student, schedule, 32)
    return {
        "teacher": teacher, "student": student, "schedule": schedule,
        "checksum_before": before, "checksum_after": after,
        "wins": wins, "pairs": pairs,
    }
