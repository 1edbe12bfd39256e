"""Frame embedder, temporal transformer encoder and clip-level aggregation.

The core works on padded batches ``(B, P, C, H, W)`` with a boolean frame
mask, so clips of different lengths (after frame skipping) share one pass.
Padded frames are excluded as attention keys and from the clip mean, which
makes their contribution to every gradient exactly zero.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .augment import Clip
from .config import ConfigError
from .tensors import (
    RngStream,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    matmul_backward,
    matmul_forward,
    relu_backward,
    relu_forward,
    resolve_dtype,
    softmax,
    softmax_backward,
    softmax_forward,
)

MASK_BIAS = -1e9
# Small classifier init keeps the first predictions near uniform (loss ~ ln K),
# which stops the first AdamW steps from overshooting.
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 1
    height: int = 16
    width: int = 16
    dim: int = 32
    heads: int = 2
    blocks: int = 2
    classes: int = 8
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    precision: str = "float64"

    def __post_init__(self):
        for name in ("channels", "height", "width", "dim", "heads", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.blocks < 0:
            raise ConfigError("blocks must be non-negative")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ConfigError("dim must be even for sinusoidal positions")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        resolve_dtype(self.precision)

    @property
    def frame_size(self) -> int:
        return self.channels * self.height * self.width

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.dim

    @property
    def dtype(self):
        return resolve_dtype(self.precision)


BLOCK_PARAMS = (
    "ln1.gamma", "ln1.beta",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Parameter names and shapes in checkpoint order."""
    d, hdn = cfg.dim, cfg.hidden
    shapes = OrderedDict()
    shapes["embed.w"] = (cfg.frame_size, d)
    shapes["embed.b"] = (d,)
    per_block = {
        "ln1.gamma": (d,), "ln1.beta": (d,),
        "attn.wq": (d, d), "attn.bq": (d,), "attn.wk": (d, d), "attn.bk": (d,),
        "attn.wv": (d, d), "attn.bv": (d,), "attn.wo": (d, d), "attn.bo": (d,),
        "ln2.gamma": (d,), "ln2.beta": (d,),
        "ffn.w1": (d, hdn), "ffn.b1": (hdn,), "ffn.w2": (hdn, d), "ffn.b2": (d,),
    }
    for layer in range(cfg.blocks):
        for name in BLOCK_PARAMS:
            shapes[f"blocks.{layer}.{name}"] = per_block[name]
    shapes["head.w"] = (d, cfg.classes)
    shapes["head.b"] = (cfg.classes,)
    return shapes


class ModelParams:
    """All trainable arrays, keyed by name, plus the architecture they belong to."""

    def __init__(self, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]"):
        self.config = config
        shapes = param_shapes(config)
        if list(arrays) != list(shapes):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape}, expected {shape}")
        self.arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.arrays.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    @classmethod
    def init(cls, config: ModelConfig, rng: RngStream) -> "ModelParams":
        dtype = config.dtype
        arrays = OrderedDict()
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                arr = np.ones(shape)
            elif leaf.startswith("b") or leaf == "beta":
                arr = np.zeros(shape)
            else:
                std = 1.0 / np.sqrt(shape[0])
                if name == "head.w":
                    std *= HEAD_INIT_SCALE
                arr = rng.gen.normal(0.0, std, size=shape)
            arrays[name] = arr.astype(dtype)
        return cls(config, arrays)


def positional_encoding(positions: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal encoding of integer frame positions, shape ``positions.shape + (dim,)``."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    freq = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty(pos.shape[:-1] + (dim,))
    pe[..., 0::2] = np.sin(pos * freq)
    pe[..., 1::2] = np.cos(pos * freq)
    return pe.astype(dtype)


def pad_clips(clips: list[Clip], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack clips of varying length into ``(values, mask, positions)``."""
    if not clips:
        raise ValueError("empty batch")
    _, c, h, w = clips[0].shape
    longest = max(cl.num_frames for cl in clips)
    values = np.zeros((len(clips), longest, c, h, w), dtype=dtype)
    mask = np.zeros((len(clips), longest), dtype=bool)
    positions = np.zeros((len(clips), longest), dtype=np.int64)
    for i, cl in enumerate(clips):
        if cl.shape[1:] != (c, h, w):
            raise ValueError("clips in a batch must share frame geometry")
        n = cl.num_frames
        values[i, :n] = cl.values
        mask[i, :n] = True
        positions[i, :n] = cl.indices
    return values, mask, positions


# -- forward / backward core ----------------------------------------------------

def _split_heads(x, heads):
    b, p, d = x.shape
    return x.reshape(b, p, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, p, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, p, h * dh)


def _block_forward(x, params, prefix, cfg, key_bias):
    g = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    cache = {}
    h, cache["ln1"] = layer_norm_forward(x, g("ln1.gamma"), g("ln1.beta"), cfg.ln_eps)
    q, cache["q"] = linear_forward(h, g("attn.wq"), g("attn.bq"))
    k, cache["k"] = linear_forward(h, g("attn.wk"), g("attn.bk"))
    v, cache["v"] = linear_forward(h, g("attn.wv"), g("attn.bv"))
    qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
    scores, cache["qk"] = matmul_forward(qh, np.swapaxes(kh, -1, -2))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    attn, cache["attn"] = softmax_forward(scores * scale + key_bias)
    o, cache["av"] = matmul_forward(attn, vh)
    out, cache["o"] = linear_forward(_merge_heads(o), g("attn.wo"), g("attn.bo"))
    x = x + out
    h2, cache["ln2"] = layer_norm_forward(x, g("ln2.gamma"), g("ln2.beta"), cfg.ln_eps)
    u, cache["w1"] = linear_forward(h2, g("ffn.w1"), g("ffn.b1"))
    r, cache["relu"] = relu_forward(u)
    z, cache["w2"] = linear_forward(r, g("ffn.w2"), g("ffn.b2"))
    cache["scale"] = scale
    return x + z, attn, cache


def _block_backward(dx, cache, prefix, cfg, grads):
    def put(name, value):
        grads[f"{prefix}.{name}"] = value

    # feed-forward sublayer; the residual passes dx through unchanged
    dr, dw2, db2 = linear_backward(dx, cache["w2"])
    put("ffn.w2", dw2), put("ffn.b2", db2)
    (du,) = relu_backward(dr, cache["relu"])
    dh2, dw1, db1 = linear_backward(du, cache["w1"])
    put("ffn.w1", dw1), put("ffn.b1", db1)
    dxn, dg, db = layer_norm_backward(dh2, cache["ln2"])
    put("ln2.gamma", dg), put("ln2.beta", db)
    dx = dx + dxn

    # attention sublayer
    do, dwo, dbo = linear_backward(dx, cache["o"])
    put("attn.wo", dwo), put("attn.bo", dbo)
    do = _split_heads(do, cfg.heads)
    dattn, dvh = matmul_backward(do, cache["av"])
    (dscores,) = softmax_backward(dattn, cache["attn"])
    dqh, dkt = matmul_backward(dscores * cache["scale"], cache["qk"])
    dh = 0
    for name, dt in (("q", dqh), ("k", np.swapaxes(dkt, -1, -2)), ("v", dvh)):
        dhi, dw, dbias = linear_backward(_merge_heads(dt), cache[name])
        put(f"attn.w{name}", dw), put(f"attn.b{name}", dbias)
        dh = dh + dhi
    dxn, dg, db = layer_norm_backward(dh, cache["ln1"])
    put("ln1.gamma", dg), put("ln1.beta", db)
    return dx + dxn


def _encode(params: ModelParams, feats, positions, mask):
    """Positional encoding, transformer blocks and classifier head -> per-frame logits."""
    cfg = params.config
    key_bias = np.where(mask, 0.0, MASK_BIAS).astype(feats.dtype)[:, None, None, :]
    x = feats + positional_encoding(positions, cfg.dim, feats.dtype)
    caches, attns = [], []
    for layer in range(cfg.blocks):
        x, attn, c = _block_forward(x, params, f"blocks.{layer}", cfg, key_bias)
        caches.append(c)
        attns.append(attn)
    logits, head_cache = linear_forward(x, params["head.w"], params["head.b"])
    return logits, x, attns, (caches, head_cache)


def forward_batch(params: ModelParams, values, mask, positions):
    """Batched forward pass.

    Returns ``(frame_probs (B, P, K), clip_probs (B, K), cache)``; rows of
    ``frame_probs`` at padded positions are meaningless.
    """
    cfg = params.config
    if values.shape[2:] != (cfg.channels, cfg.height, cfg.width):
        raise ValueError(
            f"frame shape {values.shape[2:]} does not match model input "
            f"{(cfg.channels, cfg.height, cfg.width)}"
        )
    if not mask.any(axis=1).all():
        raise ValueError("empty clip")
    b, p = mask.shape
    flat = values.reshape(b, p, cfg.frame_size).astype(cfg.dtype, copy=False)
    feats, embed_cache = linear_forward(flat, params["embed.w"], params["embed.b"])
    logits, _, _, enc_cache = _encode(params, feats, positions, mask)
    probs, sm_cache = softmax_forward(logits)
    weight = mask / mask.sum(axis=1, keepdims=True)
    clip_probs = np.einsum("bpk,bp->bk", probs, weight.astype(probs.dtype))
    cache = (embed_cache, enc_cache, sm_cache, weight.astype(probs.dtype))
    return probs, clip_probs, cache


def backward_batch(params: ModelParams, cache, dclip: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(clip_probs)."""
    cfg = params.config
    embed_cache, (block_caches, head_cache), sm_cache, weight = cache
    dprobs = dclip[:, None, :] * weight[:, :, None]
    (dlogits,) = softmax_backward(dprobs, sm_cache)
    grads = {}
    dx, grads["head.w"], grads["head.b"] = linear_backward(dlogits, head_cache)
    for layer in reversed(range(cfg.blocks)):
        dx = _block_backward(dx, block_caches[layer], f"blocks.{layer}", cfg, grads)
    _, grads["embed.w"], grads["embed.b"] = linear_backward(dx, embed_cache)
    return OrderedDict((name, grads[name]) for name in params)


# -- single-clip API ------------------------------------------------------------------

@dataclass
class FeatureSequence:
    features: np.ndarray  # (P', D)
    indices: np.ndarray  # source frame positions


@dataclass
class HiddenSequence:
    logits: np.ndarray  # (P', K)
    states: np.ndarray  # (P', D) encoder output before the head
    attention: list = field(default_factory=list)  # per block, (heads, P', P')


def embed_frames(clip: Clip, params: ModelParams) -> FeatureSequence:
    cfg = params.config
    if clip.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise ValueError(f"clip frame shape {clip.shape[1:]} does not match model input")
    flat = clip.values.reshape(clip.num_frames, cfg.frame_size).astype(cfg.dtype)
    feats, _ = linear_forward(flat, params["embed.w"], params["embed.b"])
    return FeatureSequence(feats, clip.indices.copy())


def temporal_encode(seq: FeatureSequence, params: ModelParams) -> HiddenSequence:
    if len(seq.features) == 0:
        raise ValueError("empty clip")
    mask = np.ones((1, len(seq.features)), dtype=bool)
    logits, states, attns, _ = _encode(params, seq.features[None], seq.indices[None], mask)
    return HiddenSequence(logits[0], states[0], [a[0] for a in attns])


def frame_probabilities(hidden: HiddenSequence | np.ndarray) -> np.ndarray:
    logits = hidden.logits if isinstance(hidden, HiddenSequence) else np.asarray(hidden)
    return softmax(logits, axis=-1)


def clip_probability(frame_probs: np.ndarray) -> np.ndarray:
    frame_probs = np.asarray(frame_probs)
    if frame_probs.ndim != 2 or len(frame_probs) == 0:
        raise ValueError("empty clip")
    return frame_probs.mean(axis=0)


def forward(clip: Clip, params: ModelParams):
    """Single-clip forward: ``(frame_probs (P', K), clip_prob (K,), cache)``."""
    values, mask, positions = pad_clips([clip], params.config.dtype)
    probs, clip_probs, cache = forward_batch(params, values, mask, positions)
    return probs[0], clip_probs[0], cache


def backward(params: ModelParams, cache, dclip: np.ndarray):
    return backward_batch(params, cache, np.asarray(dclip)[None])


# -- checkpoint file ----------------------------------------------------------------
#
# b"VNAWCKPT" | u16 version | u8 float width (4|8) | u8 reserved
# | u32 channels, height, width, dim, heads, blocks, classes, ffn_mult | f64 ln_eps
# | u32 tensor count | per tensor, in param_shapes order: u32 numel, numel LE floats

CKPT_MAGIC = b"VNAWCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sHBB8IdI")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ModelParams) -> bytes:
    cfg = params.config
    width = np.dtype(cfg.dtype).itemsize
    parts = [
        _CKPT_HEADER.pack(
            CKPT_MAGIC, CKPT_VERSION, width, 0,
            cfg.channels, cfg.height, cfg.width, cfg.dim, cfg.heads, cfg.blocks, cfg.classes, cfg.ffn_mult,
            cfg.ln_eps, len(params.arrays),
        )
    ]
    le = np.dtype(cfg.dtype).newbyteorder("<")
    for arr in params.arrays.values():
        parts.append(struct.pack("<I", arr.size))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ModelParams:
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    if len(buf) < _CKPT_HEADER.size:
        raise CheckpointError("truncated header")
    _, version, width, _, c, h, w, d, nh, nb, k, ffn, eps, count = _CKPT_HEADER.unpack_from(buf)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    precision = {4: "float32", 8: "float64"}.get(width)
    if precision is None:
        raise CheckpointError(f"unsupported float width {width}")
    cfg = ModelConfig(c, h, w, d, nh, nb, k, ffn, eps, precision)
    shapes = param_shapes(cfg)
    if count != len(shapes):
        raise CheckpointError(f"{count} tensors in file, architecture has {len(shapes)}")
    le = np.dtype(cfg.dtype).newbyteorder("<")
    pos = _CKPT_HEADER.size
    arrays = OrderedDict()
    for name, shape in shapes.items():
        if pos + 4 > len(buf):
            raise CheckpointError("truncated payload")
        (numel,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if numel != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {numel} values, expected {int(np.prod(shape))}")
        end = pos + numel * width
        if end > len(buf):
            raise CheckpointError("truncated payload")
        arrays[name] = np.frombuffer(buf, dtype=le, count=numel, offset=pos).reshape(shape).astype(cfg.dtype)
        pos = end
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelParams(cfg, arrays)


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
