import numpy as np
import pytest

from avacade.backbone import (
    FlowExample,
    ModelConfig,
    audio_injection_delta,
    backward,
    encode_reference,
    flow_loss_and_grads,
    forward,
    init_weights,
    load_checkpoint,
    patchify,
    sample,
    save_checkpoint,
    train_flow,
    unpatchify,
    weights_checksum,
)
from avacade.conditioning import make_conditioning
from avacade.errors import InvalidInput
from avacade.rng import Rng, derive_seed

TINY = ModelConfig(
    frames=2, height=4, width=4, channels=4, model_dim=16, n_blocks=2,
    n_heads=2, tap_block=1, mlp_ratio=2,
)


def _cond(dim=64, **kw):
    return make_conditioning("a speaker at a desk", dim=dim, **kw)


def _audio_stream(n_frames, dim, seed=0):
    return Rng(seed).normals((n_frames, dim)) * 0.3


def test_config_validation():
    with pytest.raises(InvalidInput):
        ModelConfig(patch=(2, 2, 2))
    with pytest.raises(InvalidInput):
        ModelConfig(height=9)
    with pytest.raises(InvalidInput):
        ModelConfig(tap_block=7)


def test_init_is_bounded_and_seeded():
    w1 = init_weights(TINY, 5)
    w2 = init_weights(TINY, 5)
    w3 = init_weights(TINY, 6)
    for name, arr in w1.params.items():
        assert np.abs(arr).max() <= 0.05
        assert np.array_equal(arr, w2.params[name])
    assert weights_checksum(w1) == weights_checksum(w2)
    assert weights_checksum(w1) != weights_checksum(w3)


def test_patchify_roundtrip():
    cfg = ModelConfig()
    x = Rng(0).normals((3, cfg.height, cfg.width, cfg.channels))
    raw, positions = patchify(x, cfg)
    assert raw.shape == (3 * 16, 64)
    assert np.array_equal(unpatchify(raw, cfg, 3), x)
    assert positions[0].tolist() == [0, 0, 0]
    assert positions[-1].tolist() == [2, 3, 3]


def test_forward_shapes_and_determinism():
    cfg = ModelConfig()
    w = init_weights(cfg, 1)
    x = Rng(2).normals((4, 8, 8, 16))
    cond = _cond()
    r1 = forward(w, x, 0.5, cond)
    r2 = forward(w, x, 0.5, cond)
    assert r1.velocity.shape == x.shape
    assert r1.tap.shape == (4 * 16, 64)
    assert np.array_equal(r1.velocity, r2.velocity)
    assert np.array_equal(r1.tap, r2.tap)
    # Frame count is free at call time.
    r3 = forward(w, Rng(3).normals((9, 8, 8, 16)), 0.2, cond)
    assert r3.velocity.shape == (9, 8, 8, 16)


def test_zero_masks_are_a_bit_exact_noop():
    cfg = ModelConfig()
    w = init_weights(cfg, 4)
    x = Rng(5).normals((4, 8, 8, 16))
    stream = _audio_stream(4, 64)
    cond = _cond(audio=[("spk", stream)])
    plain = forward(w, x, 0.4, cond, masks=None)
    gated_off = forward(w, x, 0.4, cond, masks={"spk": np.zeros((4, 4, 4))})
    assert np.array_equal(plain.velocity, gated_off.velocity)
    on = forward(w, x, 0.4, cond, masks={"spk": np.ones((4, 4, 4))})
    assert not np.array_equal(plain.velocity, on.velocity)


def test_injection_delta_linearity_and_disjointness():
    cfg = ModelConfig()
    w = init_weights(cfg, 7)
    n_frames = 4
    tokens = Rng(8).normals((n_frames * 16, 64))
    sa = _audio_stream(n_frames, 64, seed=11)
    sb = _audio_stream(n_frames, 64, seed=12)
    cond = _cond(audio=[("a", sa), ("b", sb)])
    ma = np.zeros((n_frames, 4, 4))
    mb = np.zeros((n_frames, 4, 4))
    ma[:, :, :2] = 1.0
    mb[:, :, 2:] = 1.0

    d_both = audio_injection_delta(w, 0, tokens, cond, {"a": ma, "b": mb}, n_frames)
    cond_a = _cond(audio=[("a", sa)])
    cond_b = _cond(audio=[("b", sb)])
    d_a = audio_injection_delta(w, 0, tokens, cond_a, {"a": ma}, n_frames)
    d_b = audio_injection_delta(w, 0, tokens, cond_b, {"b": mb}, n_frames)
    # Disjoint gates: each token hears exactly one stream.
    assert np.array_equal(d_both, d_a + d_b)
    flat_a = ma.reshape(-1) > 0
    assert np.array_equal(d_both[flat_a], d_a[flat_a])
    assert np.all(d_a[~flat_a] == 0.0)

    half = audio_injection_delta(w, 0, tokens, cond_a, {"a": 0.5 * ma}, n_frames)
    assert np.max(np.abs(half - 0.5 * d_a)) < 1e-9


def test_sample_determinism_and_anchors():
    cfg = ModelConfig()
    w = init_weights(cfg, 9)
    anchor0 = Rng(20).normals((8, 8, 16))
    anchor_last = Rng(21).normals((8, 8, 16))
    cond = _cond(anchors={0: anchor0, 7: anchor_last})
    v1, _ = sample(w, cond, n_frames=8, seed=33, steps=6)
    v2, _ = sample(w, cond, n_frames=8, seed=33, steps=6)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(v1.data[0], anchor0)
    assert np.array_equal(v1.data[7], anchor_last)
    v3, _ = sample(w, cond, n_frames=8, seed=34, steps=6)
    assert not np.array_equal(v1.data[3], v3.data[3])


def test_sample_schedule_validation():
    w = init_weights(TINY, 1)
    cond = _cond(dim=16)
    with pytest.raises(InvalidInput):
        sample(w, cond, n_frames=2, seed=0, schedule=[1.0, 0.5, 0.6, 0.0])
    with pytest.raises(InvalidInput):
        sample(w, cond, n_frames=2, seed=0, schedule=[0.9, 0.5, 0.0])
    out, _ = sample(w, cond, n_frames=2, seed=0, schedule=[1.0, 0.5, 0.0])
    assert out.data.shape == (2, 4, 4, 4)


def test_guidance_one_matches_positive_only():
    cfg = TINY
    w = init_weights(cfg, 3)
    cond = make_conditioning("calm scene", negative="artifacts", dim=16)
    a, _ = sample(w, cond, n_frames=2, seed=5, steps=4, guidance=1.0)
    b, _ = sample(w, cond, n_frames=2, seed=5, steps=4, guidance=2.0)
    assert not np.array_equal(a.data, b.data)


def test_flow_gradients_match_finite_differences():
    w = init_weights(TINY, 11)
    x0 = Rng(40).normals((2, 4, 4, 4))
    stream = _audio_stream(2, 16, seed=41)
    ref = encode_reference(w, Rng(42).normals((4, 4, 4)), "spk")
    cond = make_conditioning(
        "speaker", dim=16, audio=[("spk", stream)], references=[("spk", ref)]
    )
    masks = {"spk": np.full((2, 2, 2), 0.7)}
    ex = FlowExample(x0, cond, masks)
    noise = Rng(43).normals(x0.shape)
    t = 0.37
    loss, grads = flow_loss_and_grads(w, ex, t, noise)
    assert loss > 0

    h = 1e-5
    rng = Rng(44)
    names = sorted(w.params)
    for _ in range(6):
        name = names[rng.integer(len(names))]
        arr = w.params[name]
        idx = np.unravel_index(rng.integer(arr.size), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        hi, _ = flow_loss_and_grads(w, ex, t, noise)
        arr[idx] = orig - h
        lo, _ = flow_loss_and_grads(w, ex, t, noise)
        arr[idx] = orig
        fd = (hi - lo) / (2 * h)
        an = grads[name][idx]
        # Guard the denominator: tiny gradients sit below FD roundoff noise.
        assert abs(an - fd) / max(abs(an), abs(fd), 1e-6) < 1e-4, (name, idx, an, fd)


def test_train_flow_reduces_loss():
    cfg = TINY
    rng = Rng(50)
    data = [
        FlowExample(rng.normals((2, 4, 4, 4)) * 0.5 + 0.5, make_conditioning("dot", dim=16))
        for _ in range(4)
    ]
    w, losses = train_flow(cfg, data, steps=120, lr=0.02, seed=51)
    assert np.mean(losses[:20]) > np.mean(losses[-20:])


def test_checkpoint_roundtrip(tmp_path):
    w = init_weights(TINY, 13)
    p = str(tmp_path / "model.avck")
    save_checkpoint(p, w, {"role": "demo"})
    back, meta = load_checkpoint(p)
    assert meta["role"] == "demo"
    assert back.config == TINY
    assert back.seed == 13
    assert weights_checksum(back) == weights_checksum(w)
    for name in w.params:
        assert np.array_equal(back.params[name], w.params[name])
