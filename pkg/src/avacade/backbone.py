"""Latent-video denoiser: a small transformer trained by flow matching.

The model predicts straight-path velocity v(x_t, t) where
x_t = (1 - t) * x0 + t * x1 for clean latent x0 and noise x1, so sampling
integrates from t = 1 down to 0 with explicit Euler steps.  Architecture:
patchify (1, 2, 2) -> linear embed + 3-D sinusoidal positions, then n_blocks
of [self-attention, cross-attention to conditioning tokens, MLP], each
sublayer pre-normalized and modulated by a time embedding (scale/shift), and
each block followed by mask-gated additive audio injection.  A tap exposes
one block's token stream for auxiliary heads without re-running the trunk.

Everything is float64 and all randomness flows through named seeds, so any
two runs with equal inputs produce bit-identical outputs.  Forward passes
return explicit cache bundles; `backward` consumes them and yields a flat
gradient dict keyed like the parameter dict.

Frame count is free at call time (temporal patch size is 1); the spatial
grid is fixed by the config.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .conditioning import Conditioning, TokenSeq, embed_text
from .errors import InvalidInput
from .nn import (
    attention_bwd,
    attention_fwd,
    check_finite,
    film_bwd,
    film_fwd,
    gelu_bwd,
    gelu_fwd,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    linear_fwd,
    position_encoding,
    timestep_features,
    window_mask,
)
from .rng import Rng, derive_seed
from .video import LatentVideo

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1
_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
INIT_SPAN = 0.05  # all weights start in U[-INIT_SPAN, INIT_SPAN]


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 16
    height: int = 8
    width: int = 8
    channels: int = 16
    model_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 2
    patch: tuple[int, int, int] = (1, 2, 2)
    tap_block: int = 2
    mlp_ratio: int = 4
    tier: str = "low"

    def __post_init__(self) -> None:
        pt, ph, pw = self.patch
        if pt != 1:
            raise InvalidInput("temporal patch size must be 1")
        if self.height % ph or self.width % pw:
            raise InvalidInput("patch must divide the spatial grid")
        if self.model_dim % (2 * self.n_heads):
            raise InvalidInput("model_dim must split across heads evenly")
        if not 0 <= self.tap_block < self.n_blocks:
            raise InvalidInput("tap_block out of range")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch[1], self.width // self.patch[2]

    @property
    def patch_dim(self) -> int:
        return self.patch[1] * self.patch[2] * self.channels

    @property
    def tokens_per_frame(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class ModelWeights:
    config: ModelConfig
    seed: int
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, self.seed, {k: v.copy() for k, v in self.params.items()})


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    m = cfg.model_dim
    hidden = m * cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (cfg.patch_dim, m),
        "embed.b": (m,),
        "time.w1": (m, m),
        "time.b1": (m,),
        "time.w2": (m, m),
        "time.b2": (m,),
        "final.gain": (m,),
        "final.bias": (m,),
        "head.w": (m, cfg.patch_dim),
        "head.b": (cfg.patch_dim,),
    }
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        shapes[pre + "film.w"] = (m, 6 * m)
        shapes[pre + "film.b"] = (6 * m,)
        for group in ("attn", "cross", "audio"):
            for key in _ATTN_KEYS:
                shapes[f"{pre}{group}.{key}"] = (m, m) if key.startswith("w") else (m,)
        shapes[pre + "mlp.w1"] = (m, hidden)
        shapes[pre + "mlp.b1"] = (hidden,)
        shapes[pre + "mlp.w2"] = (hidden, m)
        shapes[pre + "mlp.b2"] = (m,)
    return shapes


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Uniform init in [-INIT_SPAN, INIT_SPAN], tensors drawn in name order."""
    rng = Rng(seed)
    params = {}
    for name, shape in sorted(_param_shapes(cfg).items()):
        params[name] = rng.uniform_array(shape, -INIT_SPAN, INIT_SPAN)
    return ModelWeights(cfg, seed, params)


def patchify(x: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """(F, H, W, D) -> raw patch tokens (N, patch_dim) and (frame, row, col)."""
    f, h, w, d = x.shape
    if (h, w, d) != (cfg.height, cfg.width, cfg.channels):
        raise InvalidInput(f"latent shape {x.shape[1:]} does not match config")
    _, ph, pw = cfg.patch
    gh, gw = cfg.grid
    raw = (
        x.reshape(f, gh, ph, gw, pw, d)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(f * gh * gw, ph * pw * d)
    )
    fr, rr, cc = np.meshgrid(np.arange(f), np.arange(gh), np.arange(gw), indexing="ij")
    positions = np.stack([fr.ravel(), rr.ravel(), cc.ravel()], axis=1)
    return raw, positions


def unpatchify(tokens: np.ndarray, cfg: ModelConfig, n_frames: int) -> np.ndarray:
    _, ph, pw = cfg.patch
    gh, gw = cfg.grid
    return (
        tokens.reshape(n_frames, gh, gw, ph, pw, cfg.channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n_frames, cfg.height, cfg.width, cfg.channels)
    )


def encode_reference(weights: ModelWeights, frame: np.ndarray, ident: str = "") -> TokenSeq:
    """Content tokens of a single latent frame, no positional signal."""
    raw, _ = patchify(frame[None], weights.config)
    tokens, _ = linear_fwd(raw, weights.params["embed.w"], weights.params["embed.b"])
    return TokenSeq(tokens, np.zeros((tokens.shape[0], 3)), f"ref:{ident}")


def _cond_kv(cond: Conditioning) -> np.ndarray:
    parts = [cond.text.tokens]
    if cond.extra is not None:
        parts.append(cond.extra.tokens)
    for _, seq in cond.references:
        parts.append(seq.tokens)
    return np.vstack(parts)


def _mask_vector(mask: np.ndarray, n_frames: int, grid: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n_frames, gh, gw):
        raise InvalidInput(f"mask shape {mask.shape} != {(n_frames, gh, gw)}")
    return mask.reshape(-1)


@dataclass
class ForwardResult:
    velocity: np.ndarray
    tap: np.ndarray
    cache: dict


def forward(
    weights: ModelWeights,
    x: np.ndarray,
    t: float,
    cond: Conditioning,
    masks: dict[str, np.ndarray] | None = None,
) -> ForwardResult:
    cfg, p = weights.config, weights.params
    m = cfg.model_dim
    n_frames = x.shape[0]
    raw, positions = patchify(x, cfg)
    tok, c_embed = linear_fwd(raw, p["embed.w"], p["embed.b"])
    h = tok + position_encoding(positions, m)
    token_frames = positions[:, 0]

    tf = timestep_features(t, m)[None, :]
    t1, c_t1 = linear_fwd(tf, p["time.w1"], p["time.b1"])
    tg, c_tg = gelu_fwd(t1)
    temb, c_t2 = linear_fwd(tg, p["time.w2"], p["time.b2"])

    kv = _cond_kv(cond)
    tap = None
    blocks = []
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        film_out, c_fl = linear_fwd(temb, p[pre + "film.w"], p[pre + "film.b"])
        mods = [film_out[0, j * m : (j + 1) * m] for j in range(6)]

        ln1, c_ln1 = layernorm_fwd(h)
        f1, c_f1 = film_fwd(ln1, mods[0], mods[1])
        a, c_sa = attention_fwd(
            f1, f1, *(p[pre + "attn." + k] for k in _ATTN_KEYS), cfg.n_heads
        )
        h = h + a

        ln2, c_ln2 = layernorm_fwd(h)
        f2, c_f2 = film_fwd(ln2, mods[2], mods[3])
        cr, c_cr = attention_fwd(
            f2, kv, *(p[pre + "cross." + k] for k in _ATTN_KEYS), cfg.n_heads
        )
        h = h + cr

        ln3, c_ln3 = layernorm_fwd(h)
        f3, c_f3 = film_fwd(ln3, mods[4], mods[5])
        m1, c_m1 = linear_fwd(f3, p[pre + "mlp.w1"], p[pre + "mlp.b1"])
        mg, c_mg = gelu_fwd(m1)
        m2, c_m2 = linear_fwd(mg, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        h = h + m2

        inj = []
        if masks is not None and cond.audio:
            delta = np.zeros_like(h)
            for ident, stream in cond.audio:
                mvec = _mask_vector(masks[ident], n_frames, cfg.grid)
                if not np.any(mvec):
                    continue  # all-zero gate never perturbs the stream
                if stream.shape[0] != n_frames:
                    raise InvalidInput(
                        f"audio stream {ident!r} has {stream.shape[0]} frames, video {n_frames}"
                    )
                amask = window_mask(token_frames, np.arange(n_frames))
                y, c_au = attention_fwd(
                    h, stream, *(p[pre + "audio." + k] for k in _ATTN_KEYS), cfg.n_heads, amask
                )
                delta = delta + mvec[:, None] * y
                inj.append((ident, mvec, c_au))
            if inj:
                h = h + delta

        blocks.append(
            dict(
                c_fl=c_fl, c_ln1=c_ln1, c_f1=c_f1, c_sa=c_sa,
                c_ln2=c_ln2, c_f2=c_f2, c_cr=c_cr,
                c_ln3=c_ln3, c_f3=c_f3, c_m1=c_m1, c_mg=c_mg, c_m2=c_m2,
                inj=inj,
            )
        )
        if i == cfg.tap_block:
            tap = h.copy()

    lnf, c_lnf = layernorm_fwd(h)
    fin, c_fin = film_fwd(lnf, p["final.gain"], p["final.bias"])
    out, c_head = linear_fwd(fin, p["head.w"], p["head.b"])
    velocity = unpatchify(out, cfg, n_frames)
    check_finite("denoiser output", velocity)
    cache = dict(
        c_embed=c_embed, c_t1=c_t1, c_tg=c_tg, c_t2=c_t2,
        blocks=blocks, c_lnf=c_lnf, c_fin=c_fin, c_head=c_head,
        n_frames=n_frames,
    )
    return ForwardResult(velocity, tap, cache)


def backward(weights: ModelWeights, cache: dict, g_velocity: np.ndarray) -> dict[str, np.ndarray]:
    cfg = weights.config
    m = cfg.model_dim
    grads: dict[str, np.ndarray] = {}

    def acc(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    g_out, _ = patchify(g_velocity, cfg)
    g_fin, g_hw, g_hb = linear_bwd(g_out, cache["c_head"])
    acc("head.w", g_hw)
    acc("head.b", g_hb)
    g_lnf, g_gain, g_bias = film_bwd(g_fin, cache["c_fin"])
    acc("final.gain", g_gain)
    acc("final.bias", g_bias)
    g_h = layernorm_bwd(g_lnf, cache["c_lnf"])

    g_temb = np.zeros((1, m))
    for i in reversed(range(cfg.n_blocks)):
        pre = f"block{i}."
        bc = cache["blocks"][i]

        if bc["inj"]:
            g_mid = g_h.copy()
            for ident, mvec, c_au in bc["inj"]:
                g_y = g_h * mvec[:, None]
                g_q, _g_kv, a_grads = attention_bwd(g_y, c_au)
                g_mid = g_mid + g_q
                for key, g in a_grads.items():
                    acc(pre + "audio." + key, g)
            g_h = g_mid

        g_mg, g_w2, g_b2 = linear_bwd(g_h, bc["c_m2"])
        acc(pre + "mlp.w2", g_w2)
        acc(pre + "mlp.b2", g_b2)
        g_m1 = gelu_bwd(g_mg, bc["c_mg"])
        g_f3, g_w1, g_b1 = linear_bwd(g_m1, bc["c_m1"])
        acc(pre + "mlp.w1", g_w1)
        acc(pre + "mlp.b1", g_b1)
        g_ln3, g_s3, g_t3 = film_bwd(g_f3, bc["c_f3"])
        g_h = g_h + layernorm_bwd(g_ln3, bc["c_ln3"])

        g_f2, _g_kv, cr_grads = attention_bwd(g_h, bc["c_cr"])
        for key, g in cr_grads.items():
            acc(pre + "cross." + key, g)
        g_ln2, g_s2, g_t2 = film_bwd(g_f2, bc["c_f2"])
        g_h = g_h + layernorm_bwd(g_ln2, bc["c_ln2"])

        g_q, g_kv_s, sa_grads = attention_bwd(g_h, bc["c_sa"])
        for key, g in sa_grads.items():
            acc(pre + "attn." + key, g)
        g_f1 = g_q + g_kv_s
        g_ln1, g_s1, g_t1 = film_bwd(g_f1, bc["c_f1"])
        g_h = g_h + layernorm_bwd(g_ln1, bc["c_ln1"])

        g_film_out = np.concatenate([g_s1, g_t1, g_s2, g_t2, g_s3, g_t3])[None, :]
        g_temb_i, g_fw, g_fb = linear_bwd(g_film_out, bc["c_fl"])
        acc(pre + "film.w", g_fw)
        acc(pre + "film.b", g_fb)
        g_temb = g_temb + g_temb_i

    g_tg, g_tw2, g_tb2 = linear_bwd(g_temb, cache["c_t2"])
    acc("time.w2", g_tw2)
    acc("time.b2", g_tb2)
    g_t1 = gelu_bwd(g_tg, cache["c_tg"])
    _, g_tw1, g_tb1 = linear_bwd(g_t1, cache["c_t1"])
    acc("time.w1", g_tw1)
    acc("time.b1", g_tb1)
    _, g_ew, g_eb = linear_bwd(g_h, cache["c_embed"])
    acc("embed.w", g_ew)
    acc("embed.b", g_eb)
    return grads


def audio_injection_delta(
    weights: ModelWeights,
    block: int,
    tokens: np.ndarray,
    cond: Conditioning,
    masks: dict[str, np.ndarray],
    n_frames: int,
) -> np.ndarray:
    """The additive audio term one block would contribute for given tokens.

    Exposed so gating algebra (zero masks, disjoint regions, linear scaling)
    can be checked directly against the in-network behaviour.
    """
    cfg, p = weights.config, weights.params
    pre = f"block{block}."
    token_frames = np.repeat(np.arange(n_frames), cfg.tokens_per_frame)
    delta = np.zeros_like(tokens)
    for ident, stream in cond.audio:
        mvec = _mask_vector(masks[ident], n_frames, cfg.grid)
        if not np.any(mvec):
            continue
        amask = window_mask(token_frames, np.arange(stream.shape[0]))
        y, _ = attention_fwd(
            tokens, stream, *(p[pre + "audio." + k] for k in _ATTN_KEYS), cfg.n_heads, amask
        )
        delta = delta + mvec[:, None] * y
    return delta


def _negative_of(cond: Conditioning, dim: int) -> Conditioning:
    text = cond.negative_text if cond.negative_text is not None else embed_text("", dim)
    return Conditioning(text=text)


def sample(
    weights: ModelWeights,
    cond: Conditioning,
    n_frames: int,
    seed: int,
    steps: int = 24,
    guidance: float = 2.0,
    schedule: list[float] | None = None,
    mask_head=None,
    mask_override: dict[str, np.ndarray] | None = None,
    latent_fps: float = 8.0,
) -> tuple[LatentVideo, dict]:
    """Integrate the flow from noise at t=1 down to data at t=0.

    Anchored frames are overwritten after every step with the straight path
    between their own initial noise and the anchor content, so at t=0 they
    equal the anchor exactly.  Guidance g mixes a negative-text pass:
    v = v_neg + g * (v_pos - v_neg); g = 1 skips the negative pass and
    g = 0 skips the positive one.
    """
    from . import maskhead as _mh  # deferred: maskhead depends on this module

    cfg = weights.config
    if schedule is not None:
        ts = [float(v) for v in schedule]
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise InvalidInput("schedule must run from 1.0 down to 0.0")
        if any(ts[k + 1] >= ts[k] for k in range(len(ts) - 1)):
            raise InvalidInput("schedule must be strictly decreasing")
    else:
        if steps < 1:
            raise InvalidInput("steps must be >= 1")
        ts = np.linspace(1.0, 0.0, steps + 1).tolist()

    shape = (n_frames, cfg.height, cfg.width, cfg.channels)
    rng = Rng(seed)
    x1 = rng.normals(shape)
    x = x1.copy()
    anchors = {int(f): np.asarray(a, dtype=np.float64) for f, a in cond.anchors.items()}
    for f in anchors:
        if not 0 <= f < n_frames:
            raise InvalidInput(f"anchor frame {f} outside clip of {n_frames}")
    neg = _negative_of(cond, cfg.model_dim)
    grid = cfg.grid
    masks_used: dict[str, np.ndarray] | None = None

    for k in range(len(ts) - 1):
        t, t_next = ts[k], ts[k + 1]
        dt = t - t_next
        masks = None
        if cond.audio:
            if mask_override is not None:
                masks = mask_override
            elif mask_head is not None:
                tap = forward(weights, x, t, cond, masks=None).tap
                masks = _mh.predict_masks(mask_head, tap, cond, (n_frames, *grid))
        masks_used = masks
        if guidance == 0.0:
            v = forward(weights, x, t, neg).velocity
        elif guidance == 1.0:
            v = forward(weights, x, t, cond, masks).velocity
        else:
            v_pos = forward(weights, x, t, cond, masks).velocity
            v_neg = forward(weights, x, t, neg).velocity
            v = v_neg + guidance * (v_pos - v_neg)
        x = x - dt * v
        for f, a in anchors.items():
            x[f] = (1.0 - t_next) * a + t_next * x1[f]

    video = LatentVideo(x, tier=cfg.tier, latent_fps=latent_fps)
    return video, {"masks": masks_used, "steps": len(ts) - 1}


@dataclass
class FlowExample:
    x0: np.ndarray
    cond: Conditioning
    masks: dict[str, np.ndarray] | None = None


def flow_loss_and_grads(
    weights: ModelWeights, ex: FlowExample, t: float, noise: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    x_t = (1.0 - t) * ex.x0 + t * noise
    target = noise - ex.x0
    res = forward(weights, x_t, t, ex.cond, ex.masks)
    diff = res.velocity - target
    loss = float(np.mean(diff * diff))
    g_v = (2.0 / diff.size) * diff
    return loss, backward(weights, res.cache, g_v)


def train_flow(
    cfg: ModelConfig,
    dataset: list[FlowExample],
    steps: int,
    lr: float,
    seed: int,
    init: ModelWeights | None = None,
    momentum: float = 0.9,
) -> tuple[ModelWeights, list[float]]:
    if not dataset:
        raise InvalidInput("empty training set")
    weights = init.copy() if init is not None else init_weights(cfg, derive_seed(seed, "init"))
    rng = Rng(derive_seed(seed, "flow-train"))
    vel = {k: np.zeros_like(v) for k, v in weights.params.items()}
    losses = []
    for _ in range(steps):
        ex = dataset[rng.integer(len(dataset))]
        t = rng.uniform(0.0, 1.0)
        noise = rng.normals(ex.x0.shape)
        loss, grads = flow_loss_and_grads(weights, ex, t, noise)
        for name, g in grads.items():
            vel[name] = momentum * vel[name] - lr * g
            weights.params[name] = weights.params[name] + vel[name]
        losses.append(loss)
    return weights, losses


def _config_to_meta(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["patch"] = list(d["patch"])
    return d


def _config_from_meta(d: dict) -> ModelConfig:
    d = dict(d)
    d["patch"] = tuple(d["patch"])
    return ModelConfig(**d)


def serialize_weights(weights: ModelWeights, extra_meta: dict | None = None) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<IQI", CKPT_VERSION, weights.seed, len(weights.params))]
    for name in sorted(weights.params):
        arr = np.ascontiguousarray(weights.params[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    meta = {"config": _config_to_meta(weights.config)}
    if extra_meta:
        meta.update(extra_meta)
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(mb)))
    out.append(mb)
    return b"".join(out)


def save_checkpoint(path: str, weights: ModelWeights, extra_meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(weights, extra_meta))


def load_checkpoint(path: str) -> tuple[ModelWeights, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise InvalidInput(f"{path}: bad checkpoint magic")
    version, seed, n = struct.unpack_from("<IQI", blob, 4)
    if version != CKPT_VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQI")
    params: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    cfg = _config_from_meta(meta["config"])
    return ModelWeights(cfg, seed, params), meta


def weights_checksum(weights: ModelWeights) -> str:
    hd = hashlib.sha256()
    for name in sorted(weights.params):
        arr = np.ascontiguousarray(weights.params[name], dtype="<f8")
        hd.update(name.encode("utf-8"))
        hd.update(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        hd.update(arr.tobytes())
    return hd.hexdigest()


def with_grid(cfg: ModelConfig, height: int, width: int, tier: str) -> ModelConfig:
    return replace(cfg, height=height, width=width, tier=tier)
