"""Multi-expert scene planning: dialogue, conflict resolution, storylines.

Three experts examine the same request from different angles: one reads the
audio features (emotion and pacing from loudness statistics), one reads the
structured scene descriptor, and one parses the script text.  They speak in
a fixed order (audio, visual, text) for a fixed number of rounds, each
seeing the transcript so far; a mismatch between heard and scripted emotion
is flagged rather than silently averaged.  Resolution applies ownership
rules: a non-neutral voice overrides a neutral script, two non-neutral
claims go to the more confident speaker with ties to the audio expert, and
every resolution is recorded with provenance.

The storyline compiler turns resolved claims plus segment boundaries into
shot plans that exactly partition the clip, each carrying a positive prompt
assembled from a fixed template and a negative prompt built from an
artifact lexicon, the opposite emotion, and the opposite tempo.  Long shots
can be re-split at pauses afterwards without touching the prompts.

An expert can also live behind an HTTP endpoint; it receives the transcript
and payload as JSON and must answer with a single well-formed message, with
one retry before the director gives up on it.
"""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioFeatureSeq, SegmentBoundary
from .errors import ExpertError, InvalidInput

EMOTIONS = ("neutral", "happy", "sad", "angry", "surprised")
CAMERAS = ("static", "pan_left", "pan_right", "tilt_up", "tilt_down", "zoom_in", "zoom_out")
CLAIM_KEYS = (
    "emotion", "tempo", "speaker_intent", "scene", "layout", "camera", "action", "conflict_flag",
)
OPPOSITE_EMOTION = {
    "happy": "sad",
    "sad": "happy",
    "angry": "calm",
    "surprised": "indifferent",
    "neutral": "",
}
TEMPO_NEGATIVE = {"fast": "overly slow motion", "slow": "overly fast motion", "steady": ""}
ARTIFACT_NEGATIVE = "artifacts, blur, distortion, extra limbs, implausible pose"

MIN_SHOT_FRAMES = 4

# Loudness-statistic thresholds, calibrated against the voice presets: the
# coefficient of variation splits pulsing styles from level ones, the top
# band tilt splits bright from dull, and mean RMS splits quiet from loud.
CV_SPLIT = 0.22
SIB_SPLIT = 2.4
SAD_RMS = 0.15
HAPPY_RMS = 0.35
SILENCE_RMS = 0.01
TEMPO_FAST = 0.3
TEMPO_SLOW = 0.14


@dataclass
class DirectorInput:
    """Everything the experts may look at: script, audio, scene descriptor."""

    script: str
    features: AudioFeatureSeq | None = None
    scene_info: dict = field(default_factory=dict)
    identities: list[str] = field(default_factory=list)


@dataclass
class ExpertMessage:
    speaker: str
    round_index: int
    claims: dict
    rationale: str
    confidence: float

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker,
            "round": self.round_index,
            "claims": dict(self.claims),
            "rationale": self.rationale,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertMessage":
        return cls(
            speaker=str(d["speaker"]),
            round_index=int(d["round"]),
            claims=dict(d["claims"]),
            rationale=str(d.get("rationale", "")),
            confidence=float(d.get("confidence", 0.5)),
        )


def _validate_message(msg: ExpertMessage) -> None:
    if not set(msg.claims) <= set(CLAIM_KEYS):
        extra = sorted(set(msg.claims) - set(CLAIM_KEYS))
        raise ExpertError(msg.speaker, msg.round_index, f"claims outside vocabulary: {extra}")
    if not 0.0 <= msg.confidence <= 1.0:
        raise ExpertError(msg.speaker, msg.round_index, f"confidence {msg.confidence} outside [0, 1]")


def audio_stats(features: AudioFeatureSeq) -> dict[str, float]:
    rms = features.rms
    if len(rms) == 0 or float(rms.mean()) <= 0.0:
        return {"mean_rms": 0.0, "cv": 0.0, "sib_tilt": 0.0, "tempo_stat": 0.0}
    mu = float(rms.mean())
    cv = float(rms.std() / mu)
    bands = features.band_energies.mean(axis=0)
    sib_tilt = float(bands[-1] - bands[:4].mean())
    tempo_stat = float(np.mean(np.abs(np.diff(rms))) / mu) if len(rms) > 1 else 0.0
    return {"mean_rms": mu, "cv": cv, "sib_tilt": sib_tilt, "tempo_stat": tempo_stat}


def classify_emotion(stats: dict[str, float]) -> tuple[str, float]:
    mu, cv, sib = stats["mean_rms"], stats["cv"], stats["sib_tilt"]
    if mu < SILENCE_RMS:
        return "neutral", 0.3
    if cv > CV_SPLIT:
        margin = min(1.0, (cv - CV_SPLIT) / CV_SPLIT)
        if sib >= SIB_SPLIT:
            return "angry", 0.6 + 0.4 * margin
        return "surprised", 0.6 + 0.4 * margin
    if mu < SAD_RMS:
        return "sad", 0.6 + 0.4 * min(1.0, (SAD_RMS - mu) / SAD_RMS)
    if mu > HAPPY_RMS:
        return "happy", 0.6 + 0.4 * min(1.0, (mu - HAPPY_RMS) / HAPPY_RMS)
    return "neutral", 0.55


def classify_tempo(stats: dict[str, float]) -> str:
    if stats["tempo_stat"] > TEMPO_FAST:
        return "fast"
    if stats["tempo_stat"] < TEMPO_SLOW:
        return "slow"
    return "steady"


_EMOTION_WORDS = {
    "happy": ("happy", "joyful", "cheerful", "delighted", "smiling", "laughing"),
    "sad": ("sad", "gloomy", "mournful", "tearful", "downcast"),
    "angry": ("angry", "furious", "irritated", "outraged", "shouting"),
    "surprised": ("surprised", "astonished", "startled", "amazed", "shocked"),
    "neutral": ("calm", "neutral", "composed", "matter-of-fact"),
}
_ACTION_WORDS = (
    "argues", "explains", "gestures", "laughs", "listens", "nods", "sings", "speaks", "talks",
)


class AudioExpert:
    """Claims emotion and tempo from loudness statistics alone."""

    name = "audio"

    def analyze(self, inp: DirectorInput, history: list[ExpertMessage], round_index: int) -> ExpertMessage:
        if inp.features is None:
            return ExpertMessage(
                self.name, round_index, {"emotion": "neutral", "tempo": "steady"},
                "no audio provided, assuming a quiet neutral read", 0.2,
            )
        stats = audio_stats(inp.features)
        emotion, conf = classify_emotion(stats)
        tempo = classify_tempo(stats)
        rationale = (
            f"mean rms {stats['mean_rms']:.3f}, variation {stats['cv']:.3f}, "
            f"top-band tilt {stats['sib_tilt']:.2f}, pacing {stats['tempo_stat']:.3f}"
        )
        if round_index > 1:
            rationale += f"; round {round_index}, measurements unchanged"
        return ExpertMessage(
            self.name, round_index, {"emotion": emotion, "tempo": tempo}, rationale, conf
        )


class VisualExpert:
    """Claims scene, layout, and camera from the structured descriptor."""

    name = "visual"

    def analyze(self, inp: DirectorInput, history: list[ExpertMessage], round_index: int) -> ExpertMessage:
        info = inp.scene_info
        scene = info.get("setting", "plain studio")
        n = max(1, len(inp.identities))
        layout = info.get("layout", "single speaker centered" if n == 1 else f"{n} speakers side by side")
        camera = info.get("camera", "static")
        if camera not in CAMERAS:
            raise ExpertError(self.name, round_index, f"unknown camera move {camera!r}")
        return ExpertMessage(
            self.name, round_index,
            {"scene": scene, "layout": layout, "camera": camera},
            f"framing from the scene notes: {scene}, {layout}",
            0.7,
        )


class TextExpert:
    """Reads the script, checks it against what the audio expert heard."""

    name = "text"

    def analyze(self, inp: DirectorInput, history: list[ExpertMessage], round_index: int) -> ExpertMessage:
        words = inp.script.lower()
        emotion = "neutral"
        for cand, vocab in _EMOTION_WORDS.items():
            if any(w in words for w in vocab):
                emotion = cand
                break
        action = next((a for a in _ACTION_WORDS if a in words), "speaks")
        intent = "express" if emotion != "neutral" else "inform"
        claims = {"emotion": emotion, "action": action, "speaker_intent": intent}
        rationale = f"script reads as {emotion}; subject {action}"
        heard_msgs = [m for m in history if m.speaker == "audio"]
        if heard_msgs:
            heard = heard_msgs[-1].claims.get("emotion", "neutral")
            if heard != "neutral" and heard != emotion:
                claims["conflict_flag"] = True
                rationale += f"; audio suggests {heard}, flagging the mismatch"
        return ExpertMessage(self.name, round_index, claims, rationale, 0.6)


class HttpExpert:
    """An expert behind an HTTP endpoint; one retry, then ExpertError.

    The request body is {"transcript": [...], "payload": {...}} and the
    response must be a single message object with speaker, round, claims,
    and confidence fields.  Replies that do not parse, use unknown claim
    keys, or carry an out-of-range confidence are rejected outright.
    """

    def __init__(self, name: str, url: str, timeout: float = 5.0) -> None:
        self.name = name
        self.url = url
        self.timeout = timeout

    def analyze(self, inp: DirectorInput, history: list[ExpertMessage], round_index: int) -> ExpertMessage:
        payload = {
            "speaker": self.name,
            "round": round_index,
            "script": inp.script,
            "scene_info": inp.scene_info,
            "identities": list(inp.identities),
            "audio_stats": audio_stats(inp.features) if inp.features is not None else None,
        }
        body = json.dumps({"transcript": [m.to_dict() for m in history], "payload": payload})
        last_error = ""
        for _ in range(2):
            try:
                req = urllib.request.Request(
                    self.url, data=body.encode("utf-8"),
                    headers={"Content-Type": "application/json"},
                )
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    reply = json.loads(resp.read().decode("utf-8"))
                msg = ExpertMessage.from_dict(reply)
            except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if msg.speaker != self.name:
                raise ExpertError(self.name, round_index, f"reply signed by {msg.speaker!r}")
            _validate_message(msg)
            return msg
        raise ExpertError(self.name, round_index, f"endpoint failed twice: {last_error}")


def default_experts() -> list:
    return [AudioExpert(), VisualExpert(), TextExpert()]


def run_dialogue(
    inp: DirectorInput, rounds: int = 2, experts: list | None = None
) -> list[ExpertMessage]:
    """Fixed speaking order, `rounds` passes, full transcript returned.

    Every expert sees the entire transcript so far.  The result always has
    exactly three messages per round, in speaker order.
    """
    if rounds < 1:
        raise InvalidInput("rounds must be >= 1")
    experts = experts if experts is not None else default_experts()
    if len(experts) != 3:
        raise InvalidInput("the dialogue needs exactly three experts")
    history: list[ExpertMessage] = []
    for r in range(1, rounds + 1):
        for expert in experts:
            try:
                msg = expert.analyze(inp, list(history), r)
            except ExpertError:
                raise
            except Exception as exc:
                raise ExpertError(expert.name, r, str(exc)) from exc
            _validate_message(msg)
            history.append(msg)
    return history


@dataclass
class Resolution:
    claims: dict
    provenance: dict
    conflict: bool = False


def _claims_of(x) -> tuple[dict, float]:
    if isinstance(x, ExpertMessage):
        return dict(x.claims), x.confidence
    return dict(x), 0.5


def resolve_conflict(audio_claims, text_claims) -> Resolution:
    """Merge the audio and text claim sets under fixed ownership rules.

    A non-neutral heard emotion overrides a neutral scripted one; two
    non-neutral emotions go to the more confident claimant, ties to audio.
    Audio owns tempo, text owns action and intent.  Each argument is a
    message or a bare claims dict (confidence 0.5); resolving an already
    resolved claims dict against itself changes nothing.
    """
    a_claims, a_conf = _claims_of(audio_claims)
    t_claims, t_conf = _claims_of(text_claims)
    claims: dict = {}
    prov: dict = {}

    a_emotion = a_claims.get("emotion", "neutral")
    t_emotion = t_claims.get("emotion", "neutral")
    if a_emotion == "neutral":
        claims["emotion"], prov["emotion"] = t_emotion, "text" if t_emotion != "neutral" else "agreement"
    elif t_emotion == "neutral" or t_emotion == a_emotion:
        claims["emotion"], prov["emotion"] = a_emotion, "audio"
    elif t_conf > a_conf:
        claims["emotion"], prov["emotion"] = t_emotion, "text"
    else:
        claims["emotion"], prov["emotion"] = a_emotion, "audio"

    claims["tempo"] = a_claims.get("tempo", "steady")
    prov["tempo"] = "audio" if "tempo" in a_claims else "default"
    claims["action"] = t_claims.get("action", "speaks")
    prov["action"] = "text" if "action" in t_claims else "default"
    claims["speaker_intent"] = t_claims.get("speaker_intent", "inform")
    prov["speaker_intent"] = "text" if "speaker_intent" in t_claims else "default"

    conflict = bool(t_claims.get("conflict_flag", False)) or (
        a_emotion != "neutral" and t_emotion != "neutral" and a_emotion != t_emotion
    )
    return Resolution(claims, prov, conflict)


@dataclass
class ShotPlan:
    start_frame: int
    end_frame: int  # half-open latent-frame range
    positive_prompt: str
    negative_prompt: str
    emotion: str
    camera: str
    per_identity_audio: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.start_frame >= self.end_frame:
            raise InvalidInput("shot must cover at least one frame")
        if not self.positive_prompt or not self.negative_prompt:
            raise InvalidInput("shot prompts must be nonempty")

    @property
    def frames(self) -> int:
        return self.end_frame - self.start_frame

    def to_dict(self) -> dict:
        return {
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "positive_prompt": self.positive_prompt,
            "negative_prompt": self.negative_prompt,
            "emotion": self.emotion,
            "camera": self.camera,
            "per_identity_audio": {k: list(v) for k, v in self.per_identity_audio.items()},
        }


@dataclass
class Storyline:
    shots: list[ShotPlan]
    global_summary: str = ""
    version: int = 1
    pauses: list[int] = field(default_factory=list)
    conflict: bool = False

    @property
    def total_frames(self) -> int:
        return self.shots[-1].end_frame if self.shots else 0

    def check_partition(self) -> None:
        if not self.shots:
            raise InvalidInput("storyline has no shots")
        if self.shots[0].start_frame != 0:
            raise InvalidInput("first shot must start at frame 0")
        for a, b in zip(self.shots, self.shots[1:]):
            if a.end_frame != b.start_frame:
                raise InvalidInput(f"gap or overlap at frame {a.end_frame}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "global_summary": self.global_summary,
                "pauses": list(self.pauses),
                "conflict": self.conflict,
                "shots": [s.to_dict() for s in self.shots],
            },
            indent=2, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Storyline":
        d = json.loads(text)
        if d.get("version") != 1:
            raise InvalidInput(f"unsupported storyline version {d.get('version')!r}")
        shots = [
            ShotPlan(
                s["start_frame"], s["end_frame"], s["positive_prompt"], s["negative_prompt"],
                s["emotion"], s["camera"],
                {k: tuple(v) for k, v in s.get("per_identity_audio", {}).items()},
            )
            for s in d["shots"]
        ]
        out = cls(shots, d.get("global_summary", ""), 1, list(d.get("pauses", [])),
                  bool(d.get("conflict", False)))
        out.check_partition()
        return out


def negative_prompts(claims: dict) -> str:
    """Artifact lexicon, then the opposite emotion, then the opposite tempo.

    A neutral shot with no tempo claim gets the bare lexicon.  The result
    never mentions the shot's own emotion.
    """
    parts = [ARTIFACT_NEGATIVE]
    opp = OPPOSITE_EMOTION.get(claims.get("emotion", "neutral"), "")
    if opp:
        parts.append(f"{opp} expression")
    tneg = TEMPO_NEGATIVE.get(claims.get("tempo", ""), "")
    if tneg:
        parts.append(tneg)
    return ", ".join(parts)


def _positive_prompt(claims: dict) -> str:
    return (
        f"{claims.get('scene', 'plain studio')}, {claims.get('action', 'speaks')}, "
        f"{claims.get('emotion', 'neutral')} expression, camera {claims.get('camera', 'static')}"
    )


def compile_storyline(
    transcript: list[ExpertMessage],
    boundaries: list[SegmentBoundary],
    identities: list[str] | tuple[str, ...] = (),
    min_shot_frames: int = MIN_SHOT_FRAMES,
) -> Storyline:
    """Resolve the transcript's claims and cut shots at the boundaries.

    Boundary intervals shorter than min_shot_frames merge with their
    successor (the trailing one merges backwards), so the shots always
    partition [0, F) exactly.  Every shot carries the resolved emotion,
    camera, and action; pause boundaries are kept for later re-splitting.
    """
    if not transcript:
        raise InvalidInput("cannot compile an empty transcript")
    if len(boundaries) < 2:
        raise InvalidInput("need at least the two clip-end boundaries")
    frames = [b.frame_index for b in boundaries]
    if frames != sorted(set(frames)):
        raise InvalidInput("boundaries must be strictly increasing")
    if frames[0] != 0:
        raise InvalidInput("first boundary must sit at frame 0")
    total = frames[-1]
    if total <= 0:
        raise InvalidInput("clip must contain at least one frame")

    latest: dict[str, ExpertMessage] = {}
    for msg in transcript:
        latest[msg.speaker] = msg
    resolution = resolve_conflict(
        latest.get("audio", {}), latest.get("text", {})
    )
    claims = dict(resolution.claims)
    visual = latest.get("visual")
    if visual is not None:
        for key in ("scene", "layout", "camera"):
            if key in visual.claims:
                claims[key] = visual.claims[key]

    merged: list[tuple[int, int]] = []
    pending_start: int | None = None
    for a, b in zip(frames, frames[1:]):
        start = pending_start if pending_start is not None else a
        if (b - start) < min_shot_frames:
            pending_start = start
            continue
        merged.append((start, b))
        pending_start = None
    if pending_start is not None:
        if merged:
            merged[-1] = (merged[-1][0], total)
        else:
            merged.append((pending_start, total))

    neg = negative_prompts(claims)
    pos = _positive_prompt(claims)
    shots = [
        ShotPlan(
            start_frame=a, end_frame=b,
            positive_prompt=pos, negative_prompt=neg,
            emotion=claims.get("emotion", "neutral"),
            camera=claims.get("camera", "static"),
            per_identity_audio={ident: (a, b) for ident in identities},
        )
        for a, b in merged
    ]
    pauses = [b.frame_index for b in boundaries if b.kind == "pause" and 0 < b.frame_index < total]
    summary = f"{claims.get('scene', 'plain studio')}; {claims.get('emotion', 'neutral')} read in {len(shots)} shots"
    out = Storyline(shots, summary, 1, pauses, resolution.conflict)
    out.check_partition()
    return out


def _split_shot(shot: ShotPlan, at: int) -> list[ShotPlan]:
    def piece(a: int, b: int) -> ShotPlan:
        return ShotPlan(
            a, b, shot.positive_prompt, shot.negative_prompt, shot.emotion, shot.camera,
            {k: (a, b) for k in shot.per_identity_audio},
        )

    return [piece(shot.start_frame, at), piece(at, shot.end_frame)]


def refine_segments(s: Storyline, max_clip_frames: int) -> Storyline:
    """Split every over-long shot until none exceeds max_clip_frames.

    The split lands on the recorded pause boundary nearest the shot's
    midpoint when one lies strictly inside, otherwise on the midpoint.
    Prompts and claims are inherited unchanged, and the shots still
    partition the clip afterwards.  Each split strictly shortens, so this
    terminates.
    """
    if max_clip_frames < 2:
        raise InvalidInput("max_clip_frames must be >= 2")
    shots = list(s.shots)
    i = 0
    while i < len(shots):
        shot = shots[i]
        if shot.frames <= max_clip_frames:
            i += 1
            continue
        mid = (shot.start_frame + shot.end_frame) // 2
        inside = [p for p in s.pauses if shot.start_frame < p < shot.end_frame]
        at = min(inside, key=lambda p: (abs(p - mid), p)) if inside else mid
        shots[i:i + 1] = _split_shot(shot, at)
    out = Storyline(shots, s.global_summary, s.version, list(s.pauses), s.conflict)
    out.check_partition()
    return out


def plan_storyline(
    inp: DirectorInput,
    boundaries: list[SegmentBoundary],
    rounds: int = 2,
    experts: list | None = None,
    max_clip_frames: int | None = None,
) -> tuple[Storyline, list[ExpertMessage]]:
    """Dialogue, resolution, and compilation in one call."""
    transcript = run_dialogue(inp, rounds=rounds, experts=experts)
    storyline = compile_storyline(transcript, boundaries, inp.identities)
    if max_clip_frames is not None:
        storyline = refine_segments(storyline, max_clip_frames)
    return storyline, transcript
