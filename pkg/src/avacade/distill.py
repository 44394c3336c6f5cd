"""Few-step distillation that preserves the teacher's sampling trajectory.

The teacher's one-step Euler error is measured on a timestep grid (one step
versus a four-substep reference from the same state), and the resulting
error profile is turned into a schedule whose segments each carry an equal
share of the total error mass.  A student starting as an exact copy of the
teacher then learns, segment by segment, to land where the teacher's
multi-substep rollout lands, so K student steps approximate a much longer
teacher trajectory.  Training batches mix task flavors (plain text
conditioning, first-and-last-frame anchoring, audio-driven motion) drawn by
weight.

The teacher is never modified; anchored frames follow the same replacement
rule the sampler uses, so anchored content stays pinned during rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import FlowExample, ModelWeights, backward, forward
from .conditioning import Conditioning
from .errors import InvalidInput, NumericalError
from .rng import Rng, derive_seed

TASK_KINDS = ("text_conditioned", "first_last_frame", "audio_driven")
DEFAULT_SUBSTEPS = 4


@dataclass
class TimeSchedule:
    """Strictly decreasing breakpoints from exactly 1.0 down to exactly 0.0."""

    breakpoints: np.ndarray
    gamma: float | None = None

    def __post_init__(self) -> None:
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        if bp.ndim != 1 or len(bp) < 2:
            raise InvalidInput("schedule needs at least two breakpoints")
        if bp[0] != 1.0 or bp[-1] != 0.0:
            raise InvalidInput("schedule endpoints must be exactly 1.0 and 0.0")
        if np.any(np.diff(bp) >= 0):
            raise InvalidInput("breakpoints must be strictly decreasing")
        self.breakpoints = bp

    @property
    def segments(self) -> int:
        return len(self.breakpoints) - 1

    def to_dict(self) -> dict:
        return {"breakpoints": [float(v) for v in self.breakpoints], "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeSchedule":
        return cls(np.asarray(d["breakpoints"], dtype=np.float64), d.get("gamma"))


def uniform_schedule(segments: int) -> TimeSchedule:
    if segments < 1:
        raise InvalidInput("segments must be >= 1")
    bp = 1.0 - np.arange(segments + 1) / segments
    bp[0], bp[-1] = 1.0, 0.0
    return TimeSchedule(bp, gamma=1.0)


def power_schedule(segments: int, gamma: float) -> TimeSchedule:
    """Breakpoints (1 - k/K)^gamma: gamma > 1 crowds steps near t = 0."""
    if segments < 1:
        raise InvalidInput("segments must be >= 1")
    if gamma <= 0:
        raise InvalidInput("gamma must be positive")
    bp = (1.0 - np.arange(segments + 1) / segments) ** gamma
    bp[0], bp[-1] = 1.0, 0.0
    return TimeSchedule(bp, gamma=gamma)


@dataclass
class DistillTask:
    kind: str
    weight: float

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise InvalidInput(f"unknown task kind {self.kind!r}; have {TASK_KINDS}")
        if not 0.0 < self.weight <= 1.0:
            raise InvalidInput("task weight must lie in (0, 1]")


def validate_tasks(tasks: list[DistillTask]) -> None:
    if not tasks:
        raise InvalidInput("need at least one task")
    if len({t.kind for t in tasks}) != len(tasks):
        raise InvalidInput("duplicate task kinds")
    total = sum(t.weight for t in tasks)
    if abs(total - 1.0) > 1e-9:
        raise InvalidInput(f"task weights sum to {total}, expected 1")


def sample_task(tasks: list[DistillTask], rng: Rng) -> DistillTask:
    """Weighted draw; exposed so mixing ratios can be checked by counting."""
    return tasks[rng.weighted_choice([t.weight for t in tasks])]


def _apply_anchors(x: np.ndarray, t: float, cond: Conditioning, x1: np.ndarray) -> np.ndarray:
    if not cond.anchors:
        return x
    out = x.copy()
    for f, a in cond.anchors.items():
        out[int(f)] = (1.0 - t) * np.asarray(a, dtype=np.float64) + t * x1[int(f)]
    return out


def rollout(
    weights: ModelWeights,
    x: np.ndarray,
    t_from: float,
    t_to: float,
    n_steps: int,
    cond: Conditioning,
    x1: np.ndarray,
    masks: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Euler-integrate the conditional field, honoring anchor replacement."""
    if not t_from > t_to:
        raise InvalidInput("rollout must move down in time")
    ts = np.linspace(t_from, t_to, n_steps + 1)
    for k in range(n_steps):
        v = forward(weights, x, float(ts[k]), cond, masks).velocity
        x = x - (float(ts[k]) - float(ts[k + 1])) * v
        x = _apply_anchors(x, float(ts[k + 1]), cond, x1)
    return x


def analyze_timesteps(
    teacher: ModelWeights,
    probe_data: list[FlowExample],
    grid: int,
    seed: int = 0,
    n_sub: int = DEFAULT_SUBSTEPS,
) -> np.ndarray:
    """One-step versus n_sub-substep Euler error at each grid timestep.

    Grid point i sits at t = (i+1)/grid; from a mid-trajectory state there,
    both integrators step down by 1/grid and the mean squared gap between
    their endpoints, averaged over the probe set, is that point's error.
    """
    if grid < 4:
        raise InvalidInput("grid must have at least 4 points")
    if not probe_data:
        raise InvalidInput("probe set is empty")
    h = 1.0 / grid
    profile = np.zeros(grid)
    for j, ex in enumerate(probe_data):
        x1 = Rng(derive_seed(seed, "probe", j)).normals(ex.x0.shape)
        for i in range(grid):
            t = (i + 1) / grid
            x_t = _apply_anchors((1.0 - t) * ex.x0 + t * x1, t, ex.cond, x1)
            one = rollout(teacher, x_t, t, t - h, 1, ex.cond, x1, ex.masks)
            many = rollout(teacher, x_t, t, t - h, n_sub, ex.cond, x1, ex.masks)
            profile[i] += float(np.mean((one - many) ** 2))
    return profile / len(probe_data)


def _invert_mass(nodes: np.ndarray, dens: np.ndarray, cum: np.ndarray, target: float) -> float:
    idx = int(np.searchsorted(cum, target, side="left"))
    idx = min(max(idx, 1), len(nodes) - 1)
    if cum[idx] == target:
        return float(nodes[idx])
    a, b = nodes[idx - 1], nodes[idx]
    ra, rb = dens[idx - 1], dens[idx]
    rem = target - cum[idx - 1]
    span = b - a
    slope = (rb - ra) / span
    if slope == 0.0:
        s = rem / ra if ra > 0 else span
    else:
        # mass from a: ra*s + slope*s^2/2 = rem, take the root inside the cell
        s = (-ra + math.sqrt(ra * ra + 2.0 * slope * rem)) / slope
    return float(a + min(max(s, 0.0), span))


def build_schedule(profile: np.ndarray, segments: int) -> TimeSchedule:
    """Breakpoints that give each segment an equal share of the error mass.

    The profile is read as a piecewise-linear error density over (0, 1]
    (extended flat below its first grid point) and integrated; breakpoints
    are placed at equal cumulative-mass quantiles.  A constant profile
    forces the uniform schedule exactly, and zero total mass falls back to
    uniform as well.
    """
    if segments < 1:
        raise InvalidInput("segments must be >= 1")
    p = np.asarray(profile, dtype=np.float64)
    if p.ndim != 1 or len(p) < 2:
        raise InvalidInput("profile must be a vector of at least two values")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInput("profile values must be finite and nonnegative")
    if p.max() == p.min():
        return uniform_schedule(segments)

    m = len(p)
    nodes = np.concatenate([[0.0], (np.arange(m) + 1) / m])
    dens = np.concatenate([[p[0]], p])
    cell = 0.5 * (dens[:-1] + dens[1:]) * np.diff(nodes)
    cum = np.concatenate([[0.0], np.cumsum(cell)])
    total = float(cum[-1])
    if total <= 0.0:
        return uniform_schedule(segments)

    bp = np.empty(segments + 1)
    bp[0], bp[segments] = 1.0, 0.0
    for k in range(1, segments):
        bp[k] = _invert_mass(nodes, dens, cum, total * (segments - k) / segments)
    return TimeSchedule(bp)


def distill(
    teacher: ModelWeights,
    tasks: list[DistillTask],
    schedule: TimeSchedule,
    datasets: dict[str, list[FlowExample]],
    steps: int,
    lr: float,
    seed: int,
    n_sub: int = DEFAULT_SUBSTEPS,
    momentum: float = 0.9,
) -> tuple[ModelWeights, list[float]]:
    """Teach a copy of the teacher to jump whole schedule segments.

    Each step draws a task by weight, a segment, an example, and noise;
    the teacher rolls n_sub Euler substeps across the segment without
    gradients, and the student's single Euler step is pulled toward that
    endpoint by MSE.  The teacher itself is never touched.
    """
    validate_tasks(tasks)
    if schedule.segments > steps:
        raise InvalidInput(
            f"{schedule.segments} segments cannot be covered by {steps} training steps"
        )
    if n_sub < 1:
        raise InvalidInput("n_sub must be >= 1")
    for task in tasks:
        if not datasets.get(task.kind):
            raise InvalidInput(f"no examples for task {task.kind!r}")

    student = teacher.copy()
    vel = {k: np.zeros_like(v) for k, v in student.params.items()}
    rng = Rng(derive_seed(seed, "distill"))
    bp = schedule.breakpoints
    losses: list[float] = []
    for _ in range(steps):
        task = sample_task(tasks, rng)
        data = datasets[task.kind]
        ex = data[rng.integer(len(data))]
        k = rng.integer(schedule.segments)
        t_hi, t_lo = float(bp[k]), float(bp[k + 1])
        x1 = rng.normals(ex.x0.shape)
        x_t = _apply_anchors((1.0 - t_hi) * ex.x0 + t_hi * x1, t_hi, ex.cond, x1)

        target = rollout(teacher, x_t, t_hi, t_lo, n_sub, ex.cond, x1, ex.masks)
        res = forward(student, x_t, t_hi, ex.cond, ex.masks)
        step = x_t - (t_hi - t_lo) * res.velocity
        step = _apply_anchors(step, t_lo, ex.cond, x1)
        diff = step - target
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise NumericalError("distillation loss became non-finite")
        losses.append(loss)

        g_v = (-(t_hi - t_lo) * 2.0 / diff.size) * diff
        grads = backward(student, res.cache, g_v)
        for name, g in grads.items():
            vel[name] = momentum * vel[name] - lr * g
            student.params[name] = student.params[name] + vel[name]
    return student, losses
