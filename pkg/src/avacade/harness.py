"""Pairwise preference bookkeeping, report rendering, and sync scoring.

Human Good/Same/Bad verdicts are ingested from CSV, aggregated per case by
majority (ties soften to Same), tallied into counts, and reduced to the
(G+S)/(B+S) preference ratio.  Reports render as a fixed-width text table
that parses back into its own input rows, or as CSV.  A small motion-vs-
loudness correlation serves as a desk-scale stand-in for lip-sync scoring:
per-frame mean absolute temporal difference inside a character's mask
region, correlated against the audio RMS envelope.

Verdicts are only ever read, never produced; the math here reproduces the
bookkeeping of a preference study, not the preferences.
"""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .audio import AudioFeatureSeq
from .errors import InvalidInput, UndefinedRatio, UndefinedScore
from .video import LatentVideo

CATEGORIES = ("chinese_speech", "english_speech", "singing")
CRITERIA = (
    "Overall",
    "Face-Lip Sync.",
    "Visual Qual.",
    "Motion Qual.",
    "Motion Expr.",
    "Text Rel.",
)
VERDICTS = ("G", "S", "B")
DEFAULT_CATEGORY_TARGETS = {"chinese_speech": 100, "english_speech": 100, "singing": 100}
_ROW_PREFIX = "Ours vs. "
_CSV_FIELDS = ("case_id", "category", "baseline", "criterion", "verdict")


@dataclass(frozen=True)
class GsbRecord:
    """One judged comparison of our output against a named baseline."""

    case_id: str
    category: str
    baseline: str
    criterion: str
    verdict: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise InvalidInput(f"unknown category {self.category!r}; have {CATEGORIES}")
        if self.criterion not in CRITERIA:
            raise InvalidInput(f"unknown criterion {self.criterion!r}; have {CRITERIA}")
        if self.verdict not in VERDICTS:
            raise InvalidInput(f"verdict must be one of {VERDICTS}, got {self.verdict!r}")
        if not self.case_id:
            raise InvalidInput("case_id must be nonempty")


@dataclass(frozen=True)
class GsbCounts:
    G: int
    S: int
    B: int

    def __post_init__(self) -> None:
        for name in ("G", "S", "B"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise InvalidInput(f"count {name} must be a nonnegative integer")
        if self.G + self.S + self.B < 1:
            raise InvalidInput("counts must cover at least one case")


def gsb_ratio(c: GsbCounts) -> float:
    """(G+S)/(B+S); an empty denominator is undefined, never infinity."""
    denom = c.B + c.S
    if denom == 0:
        raise UndefinedRatio(f"B+S == 0 for counts G={c.G} S={c.S} B={c.B}")
    return (c.G + c.S) / denom


def case_verdict(verdicts: list[str]) -> str:
    """Majority verdict for one case; any tie for the lead softens to S."""
    if not verdicts:
        raise InvalidInput("no verdicts for case")
    for v in verdicts:
        if v not in VERDICTS:
            raise InvalidInput(f"verdict must be one of {VERDICTS}, got {v!r}")
    counts = Counter(verdicts)
    best = max(counts.values())
    leaders = [v for v, n in counts.items() if n == best]
    return leaders[0] if len(leaders) == 1 else "S"


def tally(records: list[GsbRecord], baseline: str, criterion: str) -> GsbCounts:
    """Counts for one (baseline, criterion) cell, one vote per case."""
    by_case: dict[str, list[str]] = {}
    for r in records:
        if r.baseline == baseline and r.criterion == criterion:
            by_case.setdefault(r.case_id, []).append(r.verdict)
    if not by_case:
        raise InvalidInput(f"no records for baseline {baseline!r}, criterion {criterion!r}")
    agg = Counter(case_verdict(v) for v in by_case.values())
    return GsbCounts(agg["G"], agg["S"], agg["B"])


def summarize(records: list[GsbRecord]) -> list[tuple[str, str, float | None]]:
    """Per-cell ratios for every baseline seen, criteria in report order.

    Cells whose ratio is undefined carry None; baselines keep first-seen
    order so the report layout is stable under record shuffling per cell.
    """
    baselines = list(dict.fromkeys(r.baseline for r in records))
    rows: list[tuple[str, str, float | None]] = []
    for b in baselines:
        for c in CRITERIA:
            try:
                rows.append((b, c, gsb_ratio(tally(records, b, c))))
            except UndefinedRatio:
                rows.append((b, c, None))
            except InvalidInput:
                continue
    return rows


def _format_cell(ratio: float | None) -> str:
    return "n/a" if ratio is None else f"{ratio:.2f}"


def render_report(rows: list[tuple[str, str, float | None]]) -> str:
    """Fixed-width table, one baseline per row, criteria columns in order."""
    cells: dict[tuple[str, str], float | None] = {}
    for baseline, criterion, ratio in rows:
        if criterion not in CRITERIA:
            raise InvalidInput(f"unknown criterion {criterion!r}; have {CRITERIA}")
        if ratio is not None and not np.isfinite(ratio):
            raise InvalidInput(f"ratio for ({baseline}, {criterion}) is not finite")
        cells[(baseline, criterion)] = ratio
    baselines = list(dict.fromkeys(b for b, _, _ in rows))

    labels = [_ROW_PREFIX + b for b in baselines]
    label_w = max(len("GSB"), *(len(s) for s in labels)) if labels else len("GSB")
    widths = []
    for c in CRITERIA:
        cell_w = max(
            (len(_format_cell(cells.get((b, c)))) for b in baselines), default=0
        )
        widths.append(max(len(c), cell_w))

    lines = [
        " | ".join(["GSB".ljust(label_w)] + [c.rjust(w) for c, w in zip(CRITERIA, widths)]),
        "-+-".join(["-" * label_w] + ["-" * w for w in widths]),
    ]
    for b, label in zip(baselines, labels):
        cells_b = [_format_cell(cells.get((b, c))).rjust(w) for c, w in zip(CRITERIA, widths)]
        lines.append(" | ".join([label.ljust(label_w)] + cells_b))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[tuple[str, str, float | None]]:
    """Invert render_report back into (baseline, criterion, ratio) rows."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise InvalidInput("report has no data rows")
    header = [c.strip() for c in lines[0].split("|")]
    if header[0] != "GSB":
        raise InvalidInput("report header must start with GSB")
    criteria = header[1:]
    rows: list[tuple[str, str, float | None]] = []
    for ln in lines[1:]:
        if set(ln) <= {"-", "+", " "}:
            continue
        parts = [c.strip() for c in ln.split("|")]
        if len(parts) != len(criteria) + 1:
            raise InvalidInput(f"malformed report row: {ln!r}")
        label = parts[0]
        baseline = label[len(_ROW_PREFIX):] if label.startswith(_ROW_PREFIX) else label
        for criterion, cell in zip(criteria, parts[1:]):
            rows.append((baseline, criterion, None if cell == "n/a" else float(cell)))
    return rows


def render_report_csv(rows: list[tuple[str, str, float | None]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["baseline", "criterion", "ratio"])
    for baseline, criterion, ratio in rows:
        w.writerow([baseline, criterion, "n/a" if ratio is None else f"{ratio:.2f}"])
    return buf.getvalue()


def write_records(path: str, records: list[GsbRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow({k: getattr(r, k) for k in _CSV_FIELDS})


def read_records(path: str) -> list[GsbRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_CSV_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise InvalidInput(f"records CSV missing columns {sorted(missing)}")
        return [GsbRecord(**{k: row[k] for k in _CSV_FIELDS}) for row in reader]


@dataclass
class ManifestReport:
    counts: dict[str, int]
    violations: list[str]

    @property
    def valid(self) -> bool:
        return not self.violations


def validate_manifest(
    cases: list[tuple],
    targets: dict[str, int] | None = None,
) -> ManifestReport:
    """Check the test-case partition against its configured category quota.

    Cases are (case_id, category) or (case_id, category, asset_path) tuples;
    violations accumulate instead of raising so a report always comes back.
    """
    targets = dict(DEFAULT_CATEGORY_TARGETS if targets is None else targets)
    counts = {c: 0 for c in targets}
    violations: list[str] = []
    seen: set[str] = set()
    for case in cases:
        case_id, category = case[0], case[1]
        asset = case[2] if len(case) > 2 else None
        if case_id in seen:
            violations.append(f"duplicate case_id {case_id!r}")
        seen.add(case_id)
        if category in counts:
            counts[category] += 1
        else:
            violations.append(f"case {case_id!r} has unknown category {category!r}")
        if asset is not None and not os.path.exists(asset):
            violations.append(f"case {case_id!r} asset missing: {asset}")
    for category, want in targets.items():
        if counts[category] != want:
            violations.append(
                f"category {category!r} has {counts[category]} cases, expected {want}"
            )
    return ManifestReport(counts, violations)


def _region_masks(region, shape: tuple[int, int, int]) -> np.ndarray:
    masks = getattr(region, "masks", region)
    masks = np.asarray(masks).astype(bool)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (shape[0],) + masks.shape)
    if masks.shape != shape:
        raise InvalidInput(f"region masks must have shape {shape}, got {masks.shape}")
    return masks


def motion_series(video: LatentVideo, region) -> np.ndarray:
    """Mean absolute frame-to-frame change inside the region, length F-1."""
    masks = _region_masks(region, video.data.shape[:3])
    out = np.zeros(video.frames - 1)
    for f in range(video.frames - 1):
        sel = masks[f]
        if sel.any():
            out[f] = float(np.mean(np.abs(video.data[f + 1] - video.data[f])[sel]))
    return out


def sync_score(video: LatentVideo, region, audio: AudioFeatureSeq) -> float:
    """Correlation between in-region motion and the loudness envelope.

    Both series have length F-1: motion between consecutive frames against
    the RMS of the frame the motion starts from.  Pearson correlation, so
    the score is invariant to positive rescaling of either series.
    """
    if video.frames < 3:
        raise InvalidInput("need at least 3 frames to correlate motion")
    if len(audio) < video.frames:
        raise InvalidInput(
            f"audio covers {len(audio)} frames, video has {video.frames}"
        )
    motion = motion_series(video, region)
    loud = np.asarray(audio.rms[: video.frames - 1], dtype=np.float64)
    if np.std(motion) == 0.0 or np.std(loud) == 0.0:
        raise UndefinedScore("zero-variance series has no correlation")
    return float(np.corrcoef(motion, loud)[0, 1])
