"""Desk-scale omni-modal encoder.

Any composed query (interleaved images / texts / videos) becomes one
token sequence: content tokens in query order, then a summarization
prompt chosen by the modality mix, then a single learned `emb` slot.
A small pre-layer-norm attention trunk runs over the sequence and the
hidden state at the `emb` position, projected and L2-normalized, is the
embedding. Images are patched at native resolution (no resizing).

Forward and backward passes are written out explicitly in numpy; the
backward returns exact analytic gradients for every parameter, which
the training and gradient-check paths rely on.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ComposedQuery, Embedding, ModalityItem, normalize
from .errors import (
    DimensionMismatch,
    EmptyImage,
    EmptyVideo,
    NonFiniteActivation,
    SequenceTooLong,
    ZeroVector,
)
from .util import fnv1a64, parallel_map, seeded_rng

PROMPT_IMAGE = "Summarize above image in one word:"
PROMPT_TEXT = "Summarize above sentence in one word:"
PROMPT_MIXED = "Summarize above image and sentence in one word:"

PARAM_GROUP_NAMES = ("token_table", "patch_proj", "emb_token", "trunk", "head")

_LN_EPS = 1e-5
_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    vocab_size: int = 4096
    patch_size: int = 8
    max_video_frames: int = 8
    trunk_layers: int = 2
    attention_heads: int = 4
    max_sequence_length: int = 1024

    def __post_init__(self):
        if self.d % self.attention_heads != 0:
            raise ValueError("d must be divisible by attention_heads")
        if self.d % 4 != 0:
            raise ValueError("d must be divisible by 4 (2-D positional encoding halves)")
        if min(self.patch_size, self.max_video_frames, self.trunk_layers) < 1:
            raise ValueError("patch_size, max_video_frames, trunk_layers must be >= 1")
        if self.vocab_size < 2 or self.max_sequence_length < 4:
            raise ValueError("vocab_size >= 2 and max_sequence_length >= 4 required")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "vocab_size": self.vocab_size,
            "patch_size": self.patch_size,
            "max_video_frames": self.max_video_frames,
            "trunk_layers": self.trunk_layers,
            "attention_heads": self.attention_heads,
            "max_sequence_length": self.max_sequence_length,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


# ---------------------------------------------------------------------------
# tokenization / patching / frame sampling


def tokenize_text(s: str, vocab_size: int) -> list[int]:
    """Case-fold, split on non-alphanumeric runs, FNV-1a-64 hash mod V."""
    return [fnv1a64(tok) % vocab_size for tok in _WORD_RE.findall(s.casefold())]


def patchify_image(img: np.ndarray, patch_size: int) -> list[tuple[np.ndarray, int, int]]:
    """Split an image into (vector, row, col) patches at native resolution.

    The image is padded up to multiples of patch_size by edge replication
    and scaled to [0, 1]; patches are emitted row-major. Patch vectors
    flatten the (P, P, 3) block in row-major order.
    """
    mat, rows, cols = _patch_grid(img, patch_size)
    return [(mat[i], int(rows[i]), int(cols[i])) for i in range(mat.shape[0])]


def _patch_grid(img: np.ndarray, patch_size: int):
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise EmptyImage(f"expected HxWx3 image with H,W >= 1, got shape {arr.shape}")
    p = patch_size
    h, w = arr.shape[:2]
    nr, nc = -(-h // p), -(-w // p)
    padded = np.pad(arr, ((0, nr * p - h), (0, nc * p - w), (0, 0)), mode="edge")
    scaled = padded.astype(np.float64) / 255.0
    mat = (
        scaled.reshape(nr, p, nc, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(nr * nc, p * p * 3)
    )
    grid = np.indices((nr, nc)).reshape(2, -1)
    return mat, grid[0], grid[1]


def sample_video_frames(frames: list, max_frames: int) -> list:
    """Uniform-stride subsample: indices floor(i * count / F) for i < F."""
    if len(frames) < 1:
        raise EmptyVideo("video has no frames")
    count = len(frames)
    if count <= max_frames:
        return list(frames)
    return [frames[(i * count) // max_frames] for i in range(max_frames)]


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass
class TokenSequence:
    """Flattened input for one query, ready for the trunk.

    Exactly one `emb` position, always last. Token positions cover both
    query text and prompt tokens; patch positions cover image and video
    patches. pos_enc already sums the applicable encodings per position
    (1-D global for everything, plus 2-D grid for patches, plus a frame
    encoding for video patches).
    """

    length: int
    sources: list[str]
    token_ids: np.ndarray
    token_positions: np.ndarray
    patch_mat: np.ndarray
    patch_positions: np.ndarray
    pos_enc: np.ndarray
    emb_position: int


def _sinusoid(pos: np.ndarray, dim: int, base: float) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    half = dim // 2
    freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = pos[..., None] * freq
    out = np.empty(pos.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _grid_encoding(rows: np.ndarray, cols: np.ndarray, d: int) -> np.ndarray:
    return np.concatenate(
        [_sinusoid(rows, d // 2, 10000.0), _sinusoid(cols, d // 2, 10000.0)], axis=-1
    )


def select_prompt(q: ComposedQuery) -> str:
    has_visual = any(it.kind in ("image", "video") for it in q.items)
    has_text = any(it.kind == "text" for it in q.items)
    if has_visual and has_text:
        return PROMPT_MIXED
    if has_visual:
        return PROMPT_IMAGE
    return PROMPT_TEXT


def assemble_sequence(q: ComposedQuery, cfg: EncoderConfig) -> TokenSequence:
    """Lay out a composed query as one position-encoded token sequence."""
    sources: list[str] = []
    token_ids: list[int] = []
    token_positions: list[int] = []
    patch_blocks: list[np.ndarray] = []
    patch_positions: list[int] = []
    patch_rows: list[np.ndarray] = []
    patch_cols: list[np.ndarray] = []
    patch_frames: list[np.ndarray] = []

    def add_tokens(ids: list[int], source: str):
        for tid in ids:
            token_positions.append(len(sources))
            token_ids.append(tid)
            sources.append(source)

    def add_patches(mat, rows, cols, frame: Optional[int], source: str):
        start = len(sources)
        patch_blocks.append(mat)
        patch_positions.append(start)
        patch_rows.append(rows)
        patch_cols.append(cols)
        fidx = np.full(mat.shape[0], -1 if frame is None else frame)
        patch_frames.append(fidx)
        sources.extend([source] * mat.shape[0])

    for item in q.items:
        if item.kind == "text":
            add_tokens(tokenize_text(item.payload, cfg.vocab_size), "text")
        elif item.kind == "image":
            mat, rows, cols = _patch_grid(item.payload, cfg.patch_size)
            add_patches(mat, rows, cols, None, "image_patch")
        elif item.kind == "video":
            frames = sample_video_frames(item.payload, cfg.max_video_frames)
            for fi, frame in enumerate(frames):
                mat, rows, cols = _patch_grid(frame, cfg.patch_size)
                add_patches(mat, rows, cols, fi, "video_patch")
        else:  # pragma: no cover - ModalityItem validates kinds
            raise ValueError(f"unknown item kind {item.kind!r}")

    add_tokens(tokenize_text(select_prompt(q), cfg.vocab_size), "prompt")
    emb_position = len(sources)
    sources.append("emb")
    length = len(sources)
    if length > cfg.max_sequence_length:
        raise SequenceTooLong(length, cfg.max_sequence_length)

    pos_enc = _sinusoid(np.arange(length), cfg.d, 10000.0)
    # the emb slot is "the last position" in every sequence; a length-derived
    # encoding there would only inject sequence-length noise into the output
    pos_enc[emb_position] = 0.0
    if patch_blocks:
        pmat = np.concatenate(patch_blocks, axis=0)
        prow = np.concatenate(patch_rows)
        pcol = np.concatenate(patch_cols)
        pframe = np.concatenate(patch_frames)
        ppos = np.concatenate(
            [np.arange(s, s + b.shape[0]) for s, b in zip(patch_positions, patch_blocks)]
        )
        pos_enc[ppos] += _grid_encoding(prow, pcol, cfg.d)
        vid = pframe >= 0
        if vid.any():
            pos_enc[ppos[vid]] += _sinusoid(pframe[vid], cfg.d, 100.0)
    else:
        pmat = np.zeros((0, 3 * cfg.patch_size * cfg.patch_size))
        ppos = np.zeros(0, dtype=np.int64)

    return TokenSequence(
        length=length,
        sources=sources,
        token_ids=np.asarray(token_ids, dtype=np.int64),
        token_positions=np.asarray(token_positions, dtype=np.int64),
        patch_mat=pmat,
        patch_positions=ppos,
        pos_enc=pos_enc,
        emb_position=emb_position,
    )


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameter set: weights uniform(-1/sqrt(d), 1/sqrt(d)), biases 0,
    layer-norm scale 1 / offset 0. Insertion order is the checkpoint order."""
    rng = seeded_rng(seed, "encoder-init")
    d = cfg.d
    bound = 1.0 / math.sqrt(d)

    def uni(*shape):
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, np.ndarray] = {}
    params["token_table"] = uni(cfg.vocab_size, d)
    params["patch_proj.weight"] = uni(3 * cfg.patch_size * cfg.patch_size, d)
    params["patch_proj.bias"] = np.zeros(d)
    params["emb_token"] = uni(d)
    for i in range(cfg.trunk_layers):
        pre = f"layers.{i}."
        params[pre + "ln1.scale"] = np.ones(d)
        params[pre + "ln1.offset"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            params[pre + "attn." + w] = uni(d, d)
        for b in ("bq", "bk", "bv", "bo"):
            params[pre + "attn." + b] = np.zeros(d)
        params[pre + "ln2.scale"] = np.ones(d)
        params[pre + "ln2.offset"] = np.zeros(d)
        params[pre + "ffn.w1"] = uni(d, 4 * d)
        params[pre + "ffn.b1"] = np.zeros(4 * d)
        params[pre + "ffn.w2"] = uni(4 * d, d)
        params[pre + "ffn.b2"] = np.zeros(d)
    params["final_ln.scale"] = np.ones(d)
    params["final_ln.offset"] = np.zeros(d)
    params["output_proj"] = uni(d, d)
    return params


def param_group(name: str) -> str:
    if name == "token_table":
        return "token_table"
    if name.startswith("patch_proj"):
        return "patch_proj"
    if name == "emb_token":
        return "emb_token"
    if name.startswith("layers."):
        return "trunk"
    if name.startswith("final_ln") or name == "output_proj":
        return "head"
    raise KeyError(f"parameter {name!r} belongs to no group")


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# trunk forward / backward


def _ln_forward(x, scale, offset):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat, inv, xhat * scale + offset


def _ln_backward(dy, xhat, inv, scale):
    dscale = (dy * xhat).sum(0)
    doffset = dy.sum(0)
    dxhat = dy * scale
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dscale, doffset


def _gelu(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)


def _attention_forward(a, p, pre, heads):
    t, d = a.shape
    dk = d // heads
    q = a @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
    k = a @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
    v = a @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
    qh = q.reshape(t, heads, dk).transpose(1, 0, 2)
    kh = k.reshape(t, heads, dk).transpose(1, 0, 2)
    vh = v.reshape(t, heads, dk).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dk)
    scores -= scores.max(-1, keepdims=True)
    ex = np.exp(scores)
    attn = ex / ex.sum(-1, keepdims=True)
    ctx = (attn @ vh).transpose(1, 0, 2).reshape(t, d)
    out = ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
    return out, (a, qh, kh, vh, attn, ctx)


def _attention_backward(dout, cache, p, pre, heads, grads):
    a, qh, kh, vh, attn, ctx = cache
    t, d = a.shape
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)
    grads[pre + "attn.wo"] += ctx.T @ dout
    grads[pre + "attn.bo"] += dout.sum(0)
    dctx = (dout @ p[pre + "attn.wo"].T).reshape(t, heads, dk).transpose(1, 0, 2)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    dscores = (dattn - (dattn * attn).sum(-1, keepdims=True)) * attn
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 2, 1) @ qh * scale
    dq = dqh.transpose(1, 0, 2).reshape(t, d)
    dkx = dkh.transpose(1, 0, 2).reshape(t, d)
    dv = dvh.transpose(1, 0, 2).reshape(t, d)
    grads[pre + "attn.wq"] += a.T @ dq
    grads[pre + "attn.wk"] += a.T @ dkx
    grads[pre + "attn.wv"] += a.T @ dv
    grads[pre + "attn.bq"] += dq.sum(0)
    grads[pre + "attn.bk"] += dkx.sum(0)
    grads[pre + "attn.bv"] += dv.sum(0)
    return dq @ p[pre + "attn.wq"].T + dkx @ p[pre + "attn.wk"].T + dv @ p[pre + "attn.wv"].T


def forward(params: dict, cfg: EncoderConfig, seq: TokenSequence):
    """Run the trunk over an assembled sequence.

    Returns (embedding, cache); the cache holds every intermediate the
    backward pass needs. Token and emb contents are scaled by sqrt(d)
    so they are not washed out by the O(1) positional encodings.
    """
    scale = math.sqrt(cfg.d)
    x = seq.pos_enc.copy()
    if seq.token_ids.size:
        x[seq.token_positions] += params["token_table"][seq.token_ids] * scale
    if seq.patch_mat.shape[0]:
        x[seq.patch_positions] += seq.patch_mat @ params["patch_proj.weight"] + params["patch_proj.bias"]
    x[seq.emb_position] += params["emb_token"]

    layers = []
    for i in range(cfg.trunk_layers):
        pre = f"layers.{i}."
        xhat1, inv1, a = _ln_forward(x, params[pre + "ln1.scale"], params[pre + "ln1.offset"])
        attn_out, attn_cache = _attention_forward(a, params, pre, cfg.attention_heads)
        x_mid = x + attn_out
        xhat2, inv2, b = _ln_forward(x_mid, params[pre + "ln2.scale"], params[pre + "ln2.offset"])
        f1 = b @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        g = _gelu(f1)
        f2 = g @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        x_out = x_mid + f2
        layers.append(
            {"xhat1": xhat1, "inv1": inv1, "attn": attn_cache,
             "xhat2": xhat2, "inv2": inv2, "b": b, "f1": f1, "g": g}
        )
        x = x_out
        if not np.isfinite(x).all():
            raise NonFiniteActivation(f"non-finite activation after trunk layer {i}")

    xhatf, invf, y = _ln_forward(x, params["final_ln.scale"], params["final_ln.offset"])
    hidden = y[seq.emb_position]
    z = hidden @ params["output_proj"]
    znorm = float(np.linalg.norm(z))
    if not np.isfinite(znorm):
        raise NonFiniteActivation("non-finite embedding pre-normalization")
    if znorm < 1e-12:
        raise ZeroVector("embedding collapsed to zero before normalization")
    emb = z / znorm
    cache = {"seq": seq, "layers": layers, "xhatf": xhatf, "invf": invf,
             "hidden": hidden, "emb": emb, "znorm": znorm}
    return emb, cache


def backward(params: dict, cfg: EncoderConfig, cache: dict, d_emb: np.ndarray,
             grads: Optional[dict] = None) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for one query given dL/d(embedding).

    d_emb is taken with respect to the unit-norm output; the chain through
    the final normalization is applied here.
    """
    if grads is None:
        grads = zero_grads(params)
    seq: TokenSequence = cache["seq"]
    emb, znorm = cache["emb"], cache["znorm"]

    dz = (d_emb - emb * float(emb @ d_emb)) / znorm
    grads["output_proj"] += np.outer(cache["hidden"], dz)
    dhidden = params["output_proj"] @ dz

    dy = np.zeros_like(seq.pos_enc)
    dy[seq.emb_position] = dhidden
    dx, dsc, doff = _ln_backward(dy, cache["xhatf"], cache["invf"], params["final_ln.scale"])
    grads["final_ln.scale"] += dsc
    grads["final_ln.offset"] += doff

    for i in reversed(range(cfg.trunk_layers)):
        pre = f"layers.{i}."
        lc = cache["layers"][i]
        # FFN residual branch
        df2 = dx
        grads[pre + "ffn.w2"] += lc["g"].T @ df2
        grads[pre + "ffn.b2"] += df2.sum(0)
        dg = df2 @ params[pre + "ffn.w2"].T
        df1 = dg * _gelu_grad(lc["f1"])
        grads[pre + "ffn.w1"] += lc["b"].T @ df1
        grads[pre + "ffn.b1"] += df1.sum(0)
        db = df1 @ params[pre + "ffn.w1"].T
        dmid_branch, dsc2, doff2 = _ln_backward(db, lc["xhat2"], lc["inv2"], params[pre + "ln2.scale"])
        grads[pre + "ln2.scale"] += dsc2
        grads[pre + "ln2.offset"] += doff2
        dx = dx + dmid_branch
        # attention residual branch
        da = _attention_backward(dx, lc["attn"], params, pre, cfg.attention_heads, grads)
        din_branch, dsc1, doff1 = _ln_backward(da, lc["xhat1"], lc["inv1"], params[pre + "ln1.scale"])
        grads[pre + "ln1.scale"] += dsc1
        grads[pre + "ln1.offset"] += doff1
        dx = dx + din_branch

    scale = math.sqrt(cfg.d)
    if seq.token_ids.size:
        np.add.at(grads["token_table"], seq.token_ids, dx[seq.token_positions] * scale)
    if seq.patch_mat.shape[0]:
        dpatch = dx[seq.patch_positions]
        grads["patch_proj.weight"] += seq.patch_mat.T @ dpatch
        grads["patch_proj.bias"] += dpatch.sum(0)
    grads["emb_token"] += dx[seq.emb_position]
    return grads


# ---------------------------------------------------------------------------
# public encoding API


def encode(params: dict, cfg: EncoderConfig, q: ComposedQuery) -> Embedding:
    """Embed one composed query as a unit-norm vector."""
    emb, _ = forward(params, cfg, assemble_sequence(q, cfg))
    return emb


def encode_with_cache(params: dict, cfg: EncoderConfig, q: ComposedQuery):
    return forward(params, cfg, assemble_sequence(q, cfg))


def encode_batch(params: dict, cfg: EncoderConfig, queries: list[ComposedQuery],
                 threads: int = 1, strict: bool = True):
    """Encode queries independently; results keep input order.

    strict=True raises on the first failing query. strict=False returns
    (embeddings, errors) where failed slots are None and errors maps the
    query index to the exception.
    """

    def one(q):
        try:
            return encode(params, cfg, q), None
        except Exception as exc:  # noqa: BLE001 - reported per query
            return None, exc

    results = parallel_map(one, queries, threads=threads)
    errors = {i: err for i, (_, err) in enumerate(results) if err is not None}
    if errors and strict:
        idx = min(errors)
        raise type(errors[idx])(f"query {idx}: {errors[idx]}")
    embs = [emb for emb, _ in results]
    return (embs, errors) if not strict else embs


def fuse_simple_add(embs: list[Embedding]) -> Embedding:
    """Naive fusion baseline: normalize the sum of the item embeddings."""
    if len(embs) < 1:
        raise ValueError("need at least one embedding to fuse")
    dims = {np.asarray(e).shape for e in embs}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed embedding dims: {sorted(dims)}")
    return normalize(np.sum(np.asarray(embs, dtype=np.float64), axis=0))


def encode_item(params: dict, cfg: EncoderConfig, item: ModalityItem) -> Embedding:
    return encode(params, cfg, ComposedQuery([item]))
