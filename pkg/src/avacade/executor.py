"""Deterministic parallel execution of pure, seeded job graphs.

A job is a pure function of its dependencies' outputs and its own derived
seed, so the final artifacts are bit-identical no matter how many workers
run the graph or in which order jobs happen to finish.  Jobs communicate
only through the output table keyed by job id; nothing is mutated in place.

When one job fails, its transitive dependents are skipped, every other job
still runs to completion, and the raised error lists exactly what failed
and what was skipped, with all finished outputs kept for inspection.  A run
directory, when given, receives one folder per job with the artifact and a
small metadata record including the artifact checksum.
"""

from __future__ import annotations

import graphlib
import json
import pathlib
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import InvalidInput, PipelineError
from .rng import derive_seed
from .video import LatentVideo, checksum, save_latent

STAGES = ("blueprint", "keyframe_sr", "subclip", "transition", "clip_sr", "concat")


@dataclass
class Job:
    """One pure unit of work: id, stage, dependency ids, seed, callable.

    The callable receives (seed, inputs) where inputs maps each dependency
    id to that job's output; it must not touch anything else that varies.
    """

    id: str
    stage: str
    deps: tuple[str, ...]
    seed: int
    fn: Callable[[int, dict[str, Any]], Any]

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidInput("job id must be nonempty")
        if self.stage not in STAGES:
            raise InvalidInput(f"unknown stage {self.stage!r}; have {STAGES}")
        self.deps = tuple(self.deps)


def job_seed(global_seed: int, job_id: str) -> int:
    return derive_seed(global_seed, "job", job_id)


@dataclass
class JobGraph:
    jobs: dict[str, Job] = field(default_factory=dict)
    outputs: dict[str, Any] = field(default_factory=dict)

    def add(self, job: Job) -> Job:
        if job.id in self.jobs:
            raise InvalidInput(f"duplicate job id {job.id!r}")
        self.jobs[job.id] = job
        return job

    def validate(self) -> list[str]:
        """Check dep closure and acyclicity; return one topological order."""
        for job in self.jobs.values():
            for dep in job.deps:
                if dep not in self.jobs:
                    raise InvalidInput(f"job {job.id!r} depends on missing {dep!r}")
        ts = graphlib.TopologicalSorter({j.id: j.deps for j in self.jobs.values()})
        try:
            return list(ts.static_order())
        except graphlib.CycleError as exc:
            raise InvalidInput(f"job graph has a cycle: {exc.args[1]}") from exc

    def stage_ids(self, stage: str) -> list[str]:
        return sorted(j.id for j in self.jobs.values() if j.stage == stage)

    def parallel_width(self, stage: str) -> int:
        """Size of the largest antichain within one stage (no mutual deps).

        Stages here are layers: no job depends on a same-stage job unless
        explicitly wired, so this reports how many could run at once.
        """
        ids = set(self.stage_ids(stage))
        reach: dict[str, set[str]] = {}
        order = self.validate()
        for jid in order:
            r = set()
            for dep in self.jobs[jid].deps:
                r |= reach[dep] | {dep}
            reach[jid] = r
        return sum(1 for jid in ids if not (reach[jid] & ids))


def _artifact_checksum(artifact: Any) -> str:
    if isinstance(artifact, LatentVideo):
        return checksum(artifact)
    blob = json.dumps(artifact, sort_keys=True, default=str).encode("utf-8")
    import hashlib

    return hashlib.sha256(blob).hexdigest()


def _write_job_record(
    run_dir: pathlib.Path, job: Job, status: str, artifact: Any = None, error: str = ""
) -> None:
    job_dir = run_dir / "jobs" / job.id
    job_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": job.id,
        "stage": job.stage,
        "deps": list(job.deps),
        "seed": job.seed,
        "status": status,
    }
    if artifact is not None:
        if isinstance(artifact, LatentVideo):
            save_latent(str(job_dir / "artifact.bin"), artifact)
        meta["checksum"] = _artifact_checksum(artifact)
    if error:
        meta["error"] = error
    (job_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def execute(
    graph: JobGraph, workers: int = 1, run_dir: str | None = None
) -> dict[str, Any]:
    """Run every job with up to `workers` in flight; outputs keyed by id.

    Output values are bit-identical for any worker count because each job
    sees only its dependencies' outputs and its own seed.  On failure the
    healthy subgraph still completes; the error carries the failed and
    skipped id lists and the partial outputs.
    """
    if workers < 1:
        raise InvalidInput("workers must be >= 1")
    graph.validate()
    out_path = pathlib.Path(run_dir) if run_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    ts = graphlib.TopologicalSorter({j.id: j.deps for j in graph.jobs.values()})
    ts.prepare()
    outputs: dict[str, Any] = {}
    failed: dict[str, BaseException] = {}
    skipped: set[str] = set()
    running: dict[Any, str] = {}

    def dead(job: Job) -> bool:
        return any(d in failed or d in skipped for d in job.deps)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        while ts.is_active():
            for jid in ts.get_ready():
                job = graph.jobs[jid]
                if dead(job):
                    skipped.add(jid)
                    if out_path is not None:
                        _write_job_record(out_path, job, "skipped")
                    ts.done(jid)
                    continue
                inputs = {d: outputs[d] for d in job.deps}
                running[pool.submit(job.fn, job.seed, inputs)] = jid
            if not running:
                continue
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                jid = running.pop(fut)
                job = graph.jobs[jid]
                err = fut.exception()
                if err is not None:
                    failed[jid] = err
                    if out_path is not None:
                        _write_job_record(out_path, job, "failed", error=repr(err))
                else:
                    outputs[jid] = fut.result()
                    if out_path is not None:
                        _write_job_record(out_path, job, "done", artifact=outputs[jid])
                ts.done(jid)

    graph.outputs = outputs
    if failed:
        first = min(failed)
        err = PipelineError(
            first, failed[first], failed=tuple(sorted(failed)), skipped=tuple(sorted(skipped))
        )
        err.outputs = outputs
        raise err
    return outputs


def read_job_meta(run_dir: str) -> dict[str, dict]:
    """Load every job's metadata record from a run directory."""
    root = pathlib.Path(run_dir) / "jobs"
    metas = {}
    for meta_path in sorted(root.rglob("meta.json")):
        meta = json.loads(meta_path.read_text())
        metas[meta["id"]] = meta
    return metas
