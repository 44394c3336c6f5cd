"""Preference bookkeeping math, report roundtrip, and the sync proxy."""

import numpy as np
import pytest

from avacade.annotate import Track
from avacade.audio import AudioFeatureSeq
from avacade.backbone import ModelConfig
from avacade.corpus import speaking_clip, sync_trial
from avacade.errors import InvalidInput, UndefinedRatio, UndefinedScore
from avacade.harness import (
    CRITERIA,
    GsbCounts,
    GsbRecord,
    ManifestReport,
    case_verdict,
    gsb_ratio,
    parse_report,
    read_records,
    render_report,
    render_report_csv,
    summarize,
    sync_score,
    tally,
    validate_manifest,
    write_records,
)
from avacade.rng import Rng
from avacade.video import LatentVideo

CFG = ModelConfig(
    frames=4, height=4, width=4, channels=4, model_dim=16,
    n_blocks=2, n_heads=2, patch=(1, 2, 2), tap_block=1, tier="low",
)

PUBLISHED = {
    "HeyGen": (1.26, 0.86, 1.76, 0.88, 1.53, 1.39),
    "Kling-Avatar": (1.73, 0.80, 0.89, 1.13, 2.47, 3.73),
    "OmniHuman-1.5": (1.94, 1.02, 1.99, 1.06, 1.13, 1.08),
}


def _published_rows():
    return [
        (baseline, criterion, ratio)
        for baseline, ratios in PUBLISHED.items()
        for criterion, ratio in zip(CRITERIA, ratios)
    ]


class TestRatio:
    def test_values(self):
        assert gsb_ratio(GsbCounts(30, 40, 30)) == 1.0
        assert gsb_ratio(GsbCounts(70, 0, 30)) == pytest.approx(7 / 3)
        assert gsb_ratio(GsbCounts(0, 0, 10)) == 0.0

    def test_empty_denominator_is_undefined(self):
        with pytest.raises(UndefinedRatio):
            gsb_ratio(GsbCounts(5, 0, 0))

    def test_above_one_iff_more_good_than_bad(self):
        for g in range(21):
            for s in range(21):
                for b in range(21):
                    if g + s + b < 1:
                        continue
                    if b + s == 0:
                        with pytest.raises(UndefinedRatio):
                            gsb_ratio(GsbCounts(g, s, b))
                    else:
                        assert (gsb_ratio(GsbCounts(g, s, b)) > 1) == (g > b)

    def test_counts_validation(self):
        with pytest.raises(InvalidInput):
            GsbCounts(-1, 0, 2)
        with pytest.raises(InvalidInput):
            GsbCounts(0, 0, 0)


class TestAggregation:
    def test_record_validation(self):
        with pytest.raises(InvalidInput):
            GsbRecord("c1", "klingon_opera", "HeyGen", "Overall", "G")
        with pytest.raises(InvalidInput):
            GsbRecord("c1", "singing", "HeyGen", "Novelty", "G")
        with pytest.raises(InvalidInput):
            GsbRecord("c1", "singing", "HeyGen", "Overall", "X")
        with pytest.raises(InvalidInput):
            GsbRecord("", "singing", "HeyGen", "Overall", "G")

    def test_majority_and_ties(self):
        assert case_verdict(["G", "G", "B"]) == "G"
        assert case_verdict(["B", "B", "G"]) == "B"
        assert case_verdict(["G", "B"]) == "S"
        assert case_verdict(["G", "S", "B"]) == "S"
        assert case_verdict(["S", "S", "G"]) == "S"
        with pytest.raises(InvalidInput):
            case_verdict([])

    def test_tally_votes_once_per_case(self):
        records = [
            GsbRecord("c1", "singing", "HeyGen", "Overall", "G"),
            GsbRecord("c1", "singing", "HeyGen", "Overall", "G"),
            GsbRecord("c1", "singing", "HeyGen", "Overall", "B"),
            GsbRecord("c2", "singing", "HeyGen", "Overall", "B"),
            GsbRecord("c3", "singing", "HeyGen", "Overall", "G"),
            GsbRecord("c3", "singing", "HeyGen", "Overall", "B"),
            GsbRecord("c4", "english_speech", "HeyGen", "Visual Qual.", "S"),
        ]
        counts = tally(records, "HeyGen", "Overall")
        assert (counts.G, counts.S, counts.B) == (1, 1, 1)
        with pytest.raises(InvalidInput):
            tally(records, "HeyGen", "Text Rel.")

    def test_summarize_keeps_order_and_undefined(self):
        records = []
        for criterion in CRITERIA:
            records.append(GsbRecord("a1", "singing", "Zed", criterion, "G"))
            records.append(GsbRecord("a2", "singing", "Zed", criterion, "B"))
            records.append(GsbRecord("b1", "singing", "Abc", criterion, "G"))
        rows = summarize(records)
        assert [b for b, _, _ in rows] == ["Zed"] * 6 + ["Abc"] * 6
        assert [c for _, c, _ in rows] == list(CRITERIA) * 2
        assert all(r == 1.0 for b, _, r in rows if b == "Zed")
        # all-G cells have an empty denominator and summarize as None
        assert all(r is None for b, _, r in rows if b == "Abc")


class TestReport:
    def test_reproduces_published_ratios(self):
        text = render_report(_published_rows())
        lines = text.splitlines()
        header_cells = [c.strip() for c in lines[0].split("|")]
        assert header_cells == ["GSB"] + list(CRITERIA)
        for baseline, ratios in PUBLISHED.items():
            row = next(ln for ln in lines if f"Ours vs. {baseline}" in ln)
            cells = [c.strip() for c in row.split("|")][1:]
            assert cells == [f"{r:.2f}" for r in ratios]
        assert parse_report(text) == _published_rows()

    def test_roundtrip_with_rounding_and_gaps(self):
        rng = Rng(23)
        rows = [
            ("base-a", c, float(5.0 * rng.uniform(0.0, 1.0))) for c in CRITERIA
        ]
        rows += [("base-b", c, None) for c in CRITERIA]
        parsed = parse_report(render_report(rows))
        want = [
            (b, c, None if r is None else float(f"{r:.2f}")) for b, c, r in rows
        ]
        assert parsed == want

    def test_rejects_unknown_criterion_and_nonfinite(self):
        with pytest.raises(InvalidInput):
            render_report([("X", "Novelty", 1.0)])
        with pytest.raises(InvalidInput):
            render_report([("X", "Overall", float("inf"))])

    def test_csv_rendering(self):
        text = render_report_csv([("HeyGen", "Overall", 1.26), ("HeyGen", "Text Rel.", None)])
        lines = text.strip().splitlines()
        assert lines[0] == "baseline,criterion,ratio"
        assert lines[1] == "HeyGen,Overall,1.26"
        assert lines[2] == "HeyGen,Text Rel.,n/a"

    def test_records_csv_roundtrip(self, tmp_path):
        records = [
            GsbRecord("c1", "singing", "HeyGen", "Overall", "G"),
            GsbRecord("c2", "chinese_speech", "Kling-Avatar", "Text Rel.", "B"),
        ]
        path = str(tmp_path / "records.csv")
        write_records(path, records)
        assert read_records(path) == records

    def test_records_csv_missing_column(self, tmp_path):
        path = str(tmp_path / "bad.csv")
        with open(path, "w") as fh:
            fh.write("case_id,category\nc1,singing\n")
        with pytest.raises(InvalidInput):
            read_records(path)


class TestManifest:
    def _cases(self, n_ch=100, n_en=100, n_si=100):
        cases = []
        for prefix, cat, n in (
            ("ch", "chinese_speech", n_ch),
            ("en", "english_speech", n_en),
            ("si", "singing", n_si),
        ):
            cases += [(f"{prefix}{i}", cat) for i in range(n)]
        return cases

    def test_full_partition_is_valid(self):
        report = validate_manifest(self._cases())
        assert isinstance(report, ManifestReport)
        assert report.valid
        assert report.counts == {
            "chinese_speech": 100, "english_speech": 100, "singing": 100,
        }

    def test_count_mismatch_flagged(self):
        report = validate_manifest(self._cases(n_ch=99, n_en=101))
        assert not report.valid
        assert any("chinese_speech" in v for v in report.violations)
        assert any("english_speech" in v for v in report.violations)

    def test_duplicates_and_unknown_flagged(self):
        cases = self._cases() + [("ch0", "chinese_speech"), ("zz", "humming")]
        report = validate_manifest(cases)
        assert any("duplicate" in v and "ch0" in v for v in report.violations)
        assert any("unknown category" in v for v in report.violations)

    def test_missing_asset_flagged(self, tmp_path):
        present = tmp_path / "a.wav"
        present.write_bytes(b"x")
        cases = [("c1", "singing", str(present)), ("c2", "singing", str(tmp_path / "b.wav"))]
        report = validate_manifest(cases, targets={"singing": 2})
        assert [v for v in report.violations] == [f"case 'c2' asset missing: {tmp_path / 'b.wav'}"]


def _speaking_fixture(seed=5, frames=10):
    rng = Rng(seed)
    rms = 0.05 + 0.4 * rng.uniforms(frames - 1)
    region = np.zeros((CFG.height, CFG.width), dtype=bool)
    region[:2, :2] = True
    clip = speaking_clip(seed, rms, region, CFG)
    feats = np.full((frames, 9), np.log(1e-8))
    feats[:-1, 8] = rms
    return clip, region, AudioFeatureSeq(feats, 8.0)


class TestSyncScore:
    def test_exact_modulation_scores_high(self):
        clip, region, audio = _speaking_fixture()
        assert sync_score(clip, region, audio) >= 0.9

    def test_accepts_mask_track_region(self):
        clip, region, audio = _speaking_fixture()
        track = Track(
            identity_id="spk0",
            bboxes=[None] * clip.frames,
            masks=np.broadcast_to(region, (clip.frames,) + region.shape).copy(),
        )
        assert sync_score(clip, track, audio) == sync_score(clip, region, audio)

    def test_static_video_is_undefined(self):
        _, region, audio = _speaking_fixture()
        flat = LatentVideo(np.zeros((10, CFG.height, CFG.width, CFG.channels)))
        with pytest.raises(UndefinedScore):
            sync_score(flat, region, audio)

    def test_scale_invariance(self):
        clip, region, audio = _speaking_fixture()
        scaled = audio.frames.copy()
        scaled[:, 8] *= 73.5
        a = sync_score(clip, region, audio)
        b = sync_score(clip, region, AudioFeatureSeq(scaled, 8.0))
        assert abs(a - b) <= 1e-9

    def test_alignment_validation(self):
        clip, region, audio = _speaking_fixture()
        with pytest.raises(InvalidInput):
            sync_score(clip, region, AudioFeatureSeq(audio.frames[:4], 8.0))
        with pytest.raises(InvalidInput):
            sync_score(clip, region[:2], audio)

    def test_matched_beats_shuffled_over_trials(self):
        wins = sum(1 for s in range(50) if (lambda p: p[0] > p[1])(sync_trial(s, CFG)))
        assert wins >= 45
