"""Per-identity spatial gates predicted from the denoiser's tapped tokens.

The head is a single-head cross-attention from tap tokens to an identity's
reference tokens followed by a tiny MLP and a sigmoid: each token gets a
probability that it belongs to that identity.  The trunk is never updated by
head training; taps are precomputed once per example and treated as data.

Masks live on the token grid (frames, grid_h, grid_w) with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelWeights, forward
from .conditioning import Conditioning, TokenSeq
from .errors import InvalidInput
from .nn import attention_bwd, attention_fwd, gelu_bwd, gelu_fwd, linear_bwd, linear_fwd
from .rng import Rng, derive_seed

MASK_MAGIC = b"AVMK"
_HEAD_HIDDEN = 64


@dataclass
class MaskTrack:
    identity_id: str
    values: np.ndarray  # (F, gh, gw) in [0, 1]
    source: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise InvalidInput("mask values must be (frames, grid_h, grid_w)")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise InvalidInput("mask values must lie in [0, 1]")


@dataclass
class MaskHeadWeights:
    dim: int
    seed: int
    params: dict[str, np.ndarray]

    def copy(self) -> "MaskHeadWeights":
        return MaskHeadWeights(self.dim, self.seed, {k: v.copy() for k, v in self.params.items()})


def _head_shapes(dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "attn.wq": (dim, dim), "attn.bq": (dim,),
        "attn.wk": (dim, dim), "attn.bk": (dim,),
        "attn.wv": (dim, dim), "attn.bv": (dim,),
        "proj.w": (dim, dim), "proj.b": (dim,),
        "mlp.w1": (dim, _HEAD_HIDDEN), "mlp.b1": (_HEAD_HIDDEN,),
        "mlp.w2": (_HEAD_HIDDEN, 1), "mlp.b2": (1,),
    }


def init_mask_head(dim: int, seed: int) -> MaskHeadWeights:
    rng = Rng(seed)
    params = {}
    for name, shape in sorted(_head_shapes(dim).items()):
        params[name] = rng.uniform_array(shape, -0.05, 0.05)
    return MaskHeadWeights(dim, seed, params)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def head_forward(head: MaskHeadWeights, tap: np.ndarray, ref: TokenSeq):
    """Logits (one per tap token) for membership in the referenced identity.

    The attended reference context is summed with a direct projection of the
    tap token itself; without that shortcut the near-uniform early attention
    hands the MLP an almost constant input and training stalls at the base
    rate.
    """
    p = head.params
    eye = np.eye(head.dim)
    zero = np.zeros(head.dim)
    ctx, c_attn = attention_fwd(
        tap, ref.tokens,
        p["attn.wq"], p["attn.bq"], p["attn.wk"], p["attn.bk"],
        p["attn.wv"], p["attn.bv"], eye, zero,
        n_heads=1,
    )
    proj, c_p = linear_fwd(tap, p["proj.w"], p["proj.b"])
    mix = ctx + proj
    h1, c_1 = linear_fwd(mix, p["mlp.w1"], p["mlp.b1"])
    hg, c_g = gelu_fwd(h1)
    out, c_2 = linear_fwd(hg, p["mlp.w2"], p["mlp.b2"])
    return out[:, 0], (c_attn, c_p, c_1, c_g, c_2)


def head_backward(head: MaskHeadWeights, cache, g_logits: np.ndarray) -> dict[str, np.ndarray]:
    c_attn, c_p, c_1, c_g, c_2 = cache
    g_hg, g_w2, g_b2 = linear_bwd(g_logits[:, None], c_2)
    g_h1 = gelu_bwd(g_hg, c_g)
    g_mix, g_w1, g_b1 = linear_bwd(g_h1, c_1)
    _, g_pw, g_pb = linear_bwd(g_mix, c_p)
    _, _, a_grads = attention_bwd(g_mix, c_attn)
    return {
        "attn.wq": a_grads["wq"], "attn.bq": a_grads["bq"],
        "attn.wk": a_grads["wk"], "attn.bk": a_grads["bk"],
        "attn.wv": a_grads["wv"], "attn.bv": a_grads["bv"],
        "proj.w": g_pw, "proj.b": g_pb,
        "mlp.w1": g_w1, "mlp.b1": g_b1, "mlp.w2": g_w2, "mlp.b2": g_b2,
    }


def bce_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Numerically stable binary cross-entropy; returns (loss, dL/dlogits)."""
    z, y = logits, targets
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    g = (sigmoid(z) - y) / z.size
    return loss, g


def predict_masks(
    head: MaskHeadWeights,
    tap: np.ndarray,
    cond: Conditioning,
    grid: tuple[int, int, int],
) -> dict[str, np.ndarray]:
    """One mask per audio identity; identities without a reference gate open."""
    f, gh, gw = grid
    if tap.shape[0] != f * gh * gw:
        raise InvalidInput(f"tap has {tap.shape[0]} tokens, grid wants {f * gh * gw}")
    masks = {}
    for ident, _ in cond.audio:
        ref = cond.reference_for(ident)
        if ref is None:
            masks[ident] = np.ones((f, gh, gw))
            continue
        logits, _ = head_forward(head, tap, ref)
        masks[ident] = sigmoid(logits).reshape(f, gh, gw)
    return masks


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Pixel-level (F, H, W) mask to token-grid block means."""
    f, h, w = mask.shape
    gh, gw = grid
    if h % gh or w % gw:
        raise InvalidInput(f"mask {h}x{w} not divisible by grid {gh}x{gw}")
    bh, bw = h // gh, w // gw
    return mask.reshape(f, gh, bh, gw, bw).mean(axis=(2, 4))


def threshold_mask(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (values >= threshold).astype(np.float64)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary arrays of equal shape; empty union scores 0."""
    inter = float(np.sum((a > 0) & (b > 0)))
    union = float(np.sum((a > 0) | (b > 0)))
    return inter / union if union > 0 else 0.0


@dataclass
class HeadExample:
    x0: np.ndarray
    cond: Conditioning
    gt: dict[str, np.ndarray] = field(default_factory=dict)  # token-grid masks


def compute_tap(backbone: ModelWeights, ex: HeadExample, noise_seed: int, t: float = 0.5) -> np.ndarray:
    noise = Rng(noise_seed).normals(ex.x0.shape)
    x_t = (1.0 - t) * ex.x0 + t * noise
    return forward(backbone, x_t, t, ex.cond, masks=None).tap


def train_head(
    backbone: ModelWeights,
    examples: list[HeadExample],
    steps: int,
    lr: float,
    seed: int,
    init: MaskHeadWeights | None = None,
    momentum: float = 0.9,
) -> tuple[MaskHeadWeights, list[float]]:
    """Fit the head on frozen taps; the trunk's weights are never touched."""
    if not examples:
        raise InvalidInput("empty head training set")
    taps = [
        compute_tap(backbone, ex, derive_seed(seed, "noise", i)) for i, ex in enumerate(examples)
    ]
    head = init.copy() if init is not None else init_mask_head(backbone.config.model_dim, derive_seed(seed, "head-init"))
    vel = {k: np.zeros_like(v) for k, v in head.params.items()}
    rng = Rng(derive_seed(seed, "head-train"))
    losses = []
    for _ in range(steps):
        i = rng.integer(len(examples))
        ex, tap = examples[i], taps[i]
        total = 0.0
        grads_sum: dict[str, np.ndarray] = {}
        n_idents = 0
        for ident, gt in sorted(ex.gt.items()):
            ref = ex.cond.reference_for(ident)
            if ref is None:
                raise InvalidInput(f"identity {ident!r} has ground truth but no reference")
            logits, cache = head_forward(head, tap, ref)
            loss, g_logits = bce_loss(logits, gt.reshape(-1))
            grads = head_backward(head, cache, g_logits)
            for k, g in grads.items():
                grads_sum[k] = grads_sum.get(k, 0.0) + g
            total += loss
            n_idents += 1
        for k in head.params:
            g = grads_sum[k] / n_idents
            vel[k] = momentum * vel[k] - lr * g
            head.params[k] = head.params[k] + vel[k]
        losses.append(total / n_idents)
    return head, losses


def save_mask(path: str, track: MaskTrack) -> None:
    ident = track.identity_id.encode("utf-8")
    source = track.source.encode("utf-8")
    f, gh, gw = track.values.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<H", len(ident)))
        fh.write(ident)
        fh.write(struct.pack("<H", len(source)))
        fh.write(source)
        fh.write(struct.pack("<III", f, gh, gw))
        fh.write(np.ascontiguousarray(track.values, dtype="<f8").tobytes())


def load_mask(path: str) -> MaskTrack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MASK_MAGIC:
        raise InvalidInput(f"{path}: bad mask magic")
    off = 4
    (ilen,) = struct.unpack_from("<H", blob, off)
    off += 2
    ident = blob[off : off + ilen].decode("utf-8")
    off += ilen
    (slen,) = struct.unpack_from("<H", blob, off)
    off += 2
    source = blob[off : off + slen].decode("utf-8")
    off += slen
    f, gh, gw = struct.unpack_from("<III", blob, off)
    off += 12
    values = np.frombuffer(blob, dtype="<f8", count=f * gh * gw, offset=off).reshape(f, gh, gw)
    return MaskTrack(ident, values.copy(), source)


def render_mask_pgm(path: str, track: MaskTrack, frame: int) -> None:
    gray = (np.clip(track.values[frame], 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
