"""Scripted-scene rendering, oracle perception tools, and track validation.

Scenes are grayscale sprite videos: axis-aligned rectangles with constant
per-sprite intensity moving at constant velocity.  Because intensities are
distinct and exact, perception "tools" can be implemented as oracles
(connected equal-intensity regions), which keeps the downstream logic
(association, segmentation, keypoints, cross-tool agreement filtering)
honest while staying fully deterministic.

Bounding boxes are half-open pixel rectangles (r0, c0, r1, c1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import AnnotationError, InvalidInput

MATCH_MIN_IOU = 0.1  # weakest overlap that still continues a track


@dataclass(frozen=True)
class Detection:
    bbox: tuple[int, int, int, int]  # (r0, c0, r1, c1), half-open
    score: float
    frame: int


@dataclass
class KeypointSet:
    points: np.ndarray  # (K, 2) as (row, col)
    skeleton_id: str

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise InvalidInput("keypoints must be (K, 2)")


@dataclass
class Track:
    identity_id: str
    bboxes: list[tuple[int, int, int, int] | None]
    masks: np.ndarray  # (F, H, W) binary
    keypoints: list[KeypointSet | None] = field(default_factory=list)


class EmptyScene(list):
    """Returned when annotation finds nothing; carries the reason along."""

    def __init__(self, reason: str) -> None:
        super().__init__()
        self.reason = reason


@dataclass
class SpriteSpec:
    identity: str
    size: tuple[int, int]
    start: tuple[float, float]
    velocity: tuple[float, float]
    intensity: float


@dataclass
class SceneSpec:
    frames: int
    height: int
    width: int
    sprites: list[SpriteSpec]

    def to_json(self) -> str:
        return json.dumps(
            {
                "frames": self.frames,
                "height": self.height,
                "width": self.width,
                "sprites": [
                    {
                        "identity": s.identity,
                        "size": list(s.size),
                        "start": list(s.start),
                        "velocity": list(s.velocity),
                        "intensity": s.intensity,
                    }
                    for s in self.sprites
                ],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        sprites = [
            SpriteSpec(
                s["identity"], tuple(s["size"]), tuple(s["start"]),
                tuple(s["velocity"]), s["intensity"],
            )
            for s in d["sprites"]
        ]
        return cls(d["frames"], d["height"], d["width"], sprites)


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Draw the sprites; later sprites draw over earlier ones.

    Returns the video (F, H, W) and exact per-identity masks.  A ground
    truth mask marks where the sprite actually shows, so occluded cells
    belong to the sprite on top.
    """
    intensities = [s.intensity for s in spec.sprites]
    if len(set(intensities)) != len(intensities) or any(v <= 0 for v in intensities):
        raise AnnotationError("render", "sprite intensities must be positive and distinct")
    video = np.zeros((spec.frames, spec.height, spec.width))
    for f in range(spec.frames):
        for s in spec.sprites:
            r = int(round(s.start[0] + f * s.velocity[0]))
            c = int(round(s.start[1] + f * s.velocity[1]))
            r0, c0 = max(r, 0), max(c, 0)
            r1 = min(r + s.size[0], spec.height)
            c1 = min(c + s.size[1], spec.width)
            if r0 < r1 and c0 < c1:
                video[f, r0:r1, c0:c1] = s.intensity
    gt = {
        s.identity: np.stack([(video[f] == s.intensity) for f in range(spec.frames)]).astype(
            np.float64
        )
        for s in spec.sprites
    }
    return video, gt


class Detector(Protocol):
    def detect(self, frame: np.ndarray, frame_index: int) -> list[Detection]: ...


class Segmenter(Protocol):
    def segment(self, frame: np.ndarray, bbox: tuple[int, int, int, int]) -> np.ndarray: ...


class Keypointer(Protocol):
    def keypoints(self, frame: np.ndarray, bbox: tuple[int, int, int, int]) -> KeypointSet: ...


class IntensityDetector:
    """One box per distinct nonzero intensity present in the frame."""

    def detect(self, frame: np.ndarray, frame_index: int) -> list[Detection]:
        out = []
        for value in sorted(np.unique(frame)):
            if value <= 0:
                continue
            rows, cols = np.nonzero(frame == value)
            bbox = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
            out.append(Detection(bbox, 1.0, frame_index))
        return out


class IntensitySegmenter:
    """Mask of the dominant intensity inside the box, over the whole frame."""

    def segment(self, frame: np.ndarray, bbox: tuple[int, int, int, int]) -> np.ndarray:
        r0, c0, r1, c1 = bbox
        patch = frame[r0:r1, c0:c1]
        values, counts = np.unique(patch[patch > 0], return_counts=True)
        if len(values) == 0:
            return np.zeros_like(frame)
        dominant = values[np.argmax(counts)]
        return (frame == dominant).astype(np.float64)


class BoxKeypointer:
    """Four corners and the center of the box."""

    def keypoints(self, frame: np.ndarray, bbox: tuple[int, int, int, int]) -> KeypointSet:
        r0, c0, r1, c1 = bbox
        pts = np.array(
            [
                [r0, c0], [r0, c1 - 1], [r1 - 1, c0], [r1 - 1, c1 - 1],
                [(r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0],
            ]
        )
        return KeypointSet(pts, "box5")


def bbox_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    inter = max(r1 - r0, 0) * max(c1 - c0, 0)
    area_a = max(a[2] - a[0], 0) * max(a[3] - a[1], 0)
    area_b = max(b[2] - b[0], 0) * max(b[3] - b[1], 0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou(a, b) -> float:
    """IoU of two boxes or two equal-shape masks; empty union scores 0."""
    if isinstance(a, tuple) and isinstance(b, tuple):
        return bbox_iou(a, b)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInput(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float(np.sum((a > 0) & (b > 0)))
    union = float(np.sum((a > 0) | (b > 0)))
    return inter / union if union > 0 else 0.0


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows, cols = np.nonzero(mask > 0)
    if len(rows) == 0:
        return None
    return (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)


def annotate_video(
    video: np.ndarray,
    detector: Detector | None = None,
    segmenter: Segmenter | None = None,
    keypointer: Keypointer | None = None,
) -> list[Track] | EmptyScene:
    """Detect, associate greedily by box overlap, then segment and keypoint.

    Tracks are named track0, track1, ... in order of first appearance.
    """
    detector = detector or IntensityDetector()
    segmenter = segmenter or IntensitySegmenter()
    keypointer = keypointer or BoxKeypointer()
    if video.ndim != 3:
        raise AnnotationError("input", f"expected (frames, H, W), got {video.shape}")
    n_frames = video.shape[0]

    tracks: list[dict] = []
    for f in range(n_frames):
        detections = detector.detect(video[f], f)
        open_tracks = [t for t in tracks if t["last_bbox"] is not None]
        pairs = sorted(
            (
                (bbox_iou(t["last_bbox"], det.bbox), ti, di)
                for ti, t in enumerate(open_tracks)
                for di, det in enumerate(detections)
            ),
            key=lambda p: -p[0],
        )
        used_t: set[int] = set()
        used_d: set[int] = set()
        for score, ti, di in pairs:
            if score < MATCH_MIN_IOU or ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            open_tracks[ti]["dets"][f] = detections[di]
            open_tracks[ti]["last_bbox"] = detections[di].bbox
        for di, det in enumerate(detections):
            if di not in used_d:
                tracks.append({"dets": {f: det}, "last_bbox": det.bbox})
        for t in tracks:
            if f not in t["dets"]:
                t["last_bbox"] = None  # a miss ends the track's reach

    if not tracks:
        return EmptyScene("no detections in any frame")

    out = []
    for i, t in enumerate(tracks):
        masks = np.zeros_like(video)
        bboxes: list[tuple[int, int, int, int] | None] = [None] * n_frames
        kps: list[KeypointSet | None] = [None] * n_frames
        for f, det in t["dets"].items():
            bboxes[f] = det.bbox
            masks[f] = segmenter.segment(video[f], det.bbox)
            kps[f] = keypointer.keypoints(video[f], det.bbox)
        out.append(Track(f"track{i}", bboxes, masks, kps))
    return out


def validate_tracks(
    tracks: list[Track],
    per_frame_detections: list[list[Detection]],
    overlap_threshold: float = 0.5,
    min_ratio: float = 0.8,
) -> tuple[list[Track], list[tuple[Track, list[int]]]]:
    """Keep tracks whose masks agree with an independent detector.

    A frame agrees when the mask's bounding box overlaps some detection at
    or above the threshold.  Tracks whose agreeing fraction (over frames
    where the track has any mask) falls below min_ratio are filtered out,
    together with the frames that disagreed.
    """
    kept: list[Track] = []
    filtered: list[tuple[Track, list[int]]] = []
    for track in tracks:
        active: list[int] = []
        bad: list[int] = []
        for f in range(track.masks.shape[0]):
            box = mask_bbox(track.masks[f])
            if box is None:
                continue
            active.append(f)
            candidates = per_frame_detections[f] if f < len(per_frame_detections) else []
            best = max((bbox_iou(box, d.bbox) for d in candidates), default=0.0)
            if best < overlap_threshold:
                bad.append(f)
        if not active:
            filtered.append((track, []))
            continue
        good_ratio = 1.0 - len(bad) / len(active)
        if good_ratio >= min_ratio:
            kept.append(track)
        else:
            filtered.append((track, bad))
    return kept, filtered
