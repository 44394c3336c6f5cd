import numpy as np
import pytest

from avacade.errors import InvalidInput
from avacade.rng import Rng
from avacade.video import (
    LatentVideo,
    block_downsample,
    checksum,
    concat_frames,
    load_latent,
    nn_upsample,
    read_pgm,
    render_contact_sheet,
    render_frame_pgm,
    save_latent,
)


def _video(seed=0, f=3, h=4, w=4, d=2, tier="low"):
    return LatentVideo(Rng(seed).normals((f, h, w, d)), tier=tier, latent_fps=8.0)


def test_shape_validation():
    with pytest.raises(InvalidInput):
        LatentVideo(np.zeros((2, 3, 4)))
    with pytest.raises(InvalidInput):
        LatentVideo(np.zeros((1, 2, 2, 1)), tier="mid")


def test_block_downsample_oracle():
    data = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    down = block_downsample(LatentVideo(data), 2)
    # Top-left 2x2 block of row-major 0..15 is {0, 1, 4, 5}.
    expected = np.array([[2.5, 4.5], [10.5, 12.5]])
    assert np.array_equal(down.data[0, :, :, 0], expected)
    assert down.grid == (2, 2)
    with pytest.raises(InvalidInput):
        block_downsample(_video(h=5, w=4), 2)


def test_upsample_then_downsample_roundtrip():
    v = _video(seed=3)
    up = nn_upsample(v, 2)
    assert up.tier == "high"
    back = block_downsample(up, 2)
    assert np.array_equal(back.data, v.data)


def test_concat_frames():
    a, b = _video(1, f=2), _video(2, f=3)
    cat = concat_frames([a, b])
    assert cat.frames == 5
    assert np.array_equal(cat.data[:2], a.data)
    assert np.array_equal(cat.data[2:], b.data)
    with pytest.raises(InvalidInput):
        concat_frames([a, _video(2, h=8, w=8)])


def test_save_load_bit_exact(tmp_path):
    v = _video(seed=7, tier="high")
    p = str(tmp_path / "clip.avlv")
    save_latent(p, v)
    back = load_latent(p)
    assert np.array_equal(back.data, v.data)
    assert back.tier == "high"
    assert back.latent_fps == v.latent_fps
    assert checksum(back) == checksum(v)


def test_checksum_sensitivity():
    v = _video(seed=5)
    w = v.copy()
    w.data[0, 0, 0, 0] += 1e-12
    assert checksum(v) != checksum(w)
    assert checksum(v) == checksum(v.copy())


def test_renders_parse(tmp_path):
    v = _video(seed=9, f=5, h=4, w=6)
    pgm = tmp_path / "frame.pgm"
    ppm = tmp_path / "sheet.ppm"
    render_frame_pgm(str(pgm), v, frame=2)
    render_contact_sheet(str(ppm), v, columns=3)
    head = pgm.read_bytes()
    assert head.startswith(b"P5\n6 4\n255\n")
    assert len(head) == len(b"P5\n6 4\n255\n") + 24
    sheet = ppm.read_bytes()
    # 5 frames in 3 columns -> 2 rows of 4x6 tiles.
    assert sheet.startswith(b"P6\n18 8\n255\n")


def test_pgm_roundtrip_within_quantization(tmp_path):
    v = _video(seed=13, f=2, h=6, w=5)
    path = tmp_path / "frame.pgm"
    render_frame_pgm(str(path), v, frame=1)
    back = read_pgm(str(path))
    clipped = np.clip(v.data[1, :, :, 0], -2.0, 2.0)
    # 256 gray levels over a span of 4.0 latent units
    assert back.shape == (6, 5)
    assert np.abs(back - clipped).max() <= 4.0 / 255.0 / 2.0 + 1e-12


def test_pgm_header_comments_and_errors(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    gray = read_pgm(str(path))
    assert gray.shape == (2, 2)
    assert gray[0, 0] == -2.0
    assert gray[1, 0] == pytest.approx(2.0)

    (tmp_path / "bad.pgm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(InvalidInput):
        read_pgm(str(tmp_path / "bad.pgm"))
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(InvalidInput):
        read_pgm(str(tmp_path / "short.pgm"))
