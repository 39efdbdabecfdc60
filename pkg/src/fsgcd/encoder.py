"""Trainable path of the frozen feature backbone.

A bottleneck adapter runs beside a frozen block:

    adapted = relu(layernorm(v) @ w_down) @ w_up
    fused   = frozen_mlp(frozen_layernorm(v)) + v + scale * adapted

followed by a two-layer projection head and L2 normalization to the unit
sphere.  Only ``w_down``, ``w_up``, the adapter LayerNorm, and the head
receive gradients; the frozen block, its LayerNorm, and the residual scale do
not.  The frozen block defaults to the identity map because inputs here are
already backbone outputs; real block weights can be supplied at init.

The backward pass is analytic and exact; it is validated against central
finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, FeatureFormatError, ShapeMismatchError

LN_EPS = 1e-12

# Update order is part of the determinism contract.
TRAINABLE_FIELDS = (
    "w_down", "w_up", "ln_gain", "ln_bias",
    "head_w1", "head_b1", "head_w2", "head_b2",
)
FROZEN_FIELDS = (
    "frozen_mlp_w", "frozen_mlp_b", "frozen_ln_gain", "frozen_ln_bias", "scale",
)
# LayerNorm gains/biases are exempt from weight decay.
DECAY_EXEMPT = ("ln_gain", "ln_bias")


@dataclass
class EncoderConfig:
    input_dim: int
    adapter_dim: int = 64
    head_hidden: int = 2048
    embed_dim: int = 256
    scale: float = 0.1

    def __post_init__(self):
        if self.adapter_dim >= self.input_dim:
            raise ValueError(
                f"adapter_dim ({self.adapter_dim}) must be smaller than input_dim ({self.input_dim})"
            )
        if min(self.input_dim, self.adapter_dim, self.head_hidden, self.embed_dim) < 1:
            raise ValueError("all encoder dimensions must be positive")


@dataclass
class EncoderParams:
    w_down: np.ndarray        # (dim, adapter_dim)
    w_up: np.ndarray          # (adapter_dim, dim)
    ln_gain: np.ndarray       # (dim,)
    ln_bias: np.ndarray       # (dim,)
    head_w1: np.ndarray       # (dim, hidden)
    head_b1: np.ndarray       # (hidden,)
    head_w2: np.ndarray       # (hidden, embed_dim)
    head_b2: np.ndarray       # (embed_dim,)
    frozen_mlp_w: np.ndarray  # (dim, dim)
    frozen_mlp_b: np.ndarray  # (dim,)
    frozen_ln_gain: np.ndarray
    frozen_ln_bias: np.ndarray
    scale: float = 0.1

    @property
    def input_dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.head_w2.shape[1]

    def trainable_items(self):
        for name in TRAINABLE_FIELDS:
            yield name, getattr(self, name)

    def trainable_parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.trainable_items())

    def copy(self) -> "EncoderParams":
        kwargs = {name: getattr(self, name).copy() for name in TRAINABLE_FIELDS}
        kwargs.update({name: getattr(self, name).copy()
                       for name in FROZEN_FIELDS if name != "scale"})
        kwargs["scale"] = self.scale
        return EncoderParams(**kwargs)

    def check_finite(self) -> None:
        for name in TRAINABLE_FIELDS:
            if not np.isfinite(getattr(self, name)).all():
                raise DegenerateDataError(f"non-finite values in parameter '{name}'")

    def storage_roundtrip(self) -> "EncoderParams":
        """Parameters as they survive a 32-bit checkpoint round trip."""
        out = self.copy()
        for name in TRAINABLE_FIELDS + FROZEN_FIELDS:
            if name == "scale":
                out.scale = float(np.float32(self.scale))
            else:
                setattr(out, name, getattr(self, name).astype(np.float32).astype(np.float64))
        return out


@dataclass
class EncoderGrads:
    """Gradients for the trainable subset only; frozen tensors have no entry."""

    w_down: np.ndarray
    w_up: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray

    def items(self):
        for name in TRAINABLE_FIELDS:
            yield name, getattr(self, name)


def _partial_isometry(d: int, e: int, rng: np.random.Generator) -> np.ndarray:
    """Random (d, e) map preserving norms on its input or output space."""
    if e >= d:
        q, _ = np.linalg.qr(rng.normal(size=(e, d)))
        return q.T          # orthonormal rows: |xP| = |x|
    q, _ = np.linalg.qr(rng.normal(size=(d, e)))
    return q                # orthonormal columns: isometry onto a random subspace


def _mirrored_head(d: int, h: int, e: int, rng: np.random.Generator):
    """Head init whose ReLU pair cancels exactly: head(x) = x @ P at init.

    Splitting the hidden layer into (m, -m) mirror halves makes
    relu(xm) - relu(-xm) = xm, so the stacked head starts as the partial
    isometry P and training breaks the symmetry from there.  This stands in
    for a head that arrives pretrained: the initial embedding preserves the
    input geometry instead of scrambling it.
    """
    if h < 2:
        w1 = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h))
        w2 = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, e))
        return w1, w2
    half = h // 2
    m = _partial_isometry(d, half, rng)
    p = _partial_isometry(d, e, rng)
    u = m.T @ p if half >= d else np.linalg.lstsq(m, p, rcond=None)[0]
    w1 = np.zeros((d, h))
    w1[:, :half] = m
    w1[:, half:2 * half] = -m
    w2 = np.zeros((h, e))
    w2[:half] = u
    w2[half:2 * half] = -u
    return w1, w2


def init_encoder_params(
    cfg: EncoderConfig,
    rng: np.random.Generator,
    frozen_mlp: tuple[np.ndarray, np.ndarray] | None = None,
) -> EncoderParams:
    """Seeded initialization.

    The adapter starts as a no-op (zero up-projection) and the head starts as
    a geometry-preserving mirrored pair, so the initial embeddings are a
    normalized isometric image of the fused features.  The frozen block is
    the identity unless real block weights are supplied.
    """
    d, a, h, e = cfg.input_dim, cfg.adapter_dim, cfg.head_hidden, cfg.embed_dim
    if frozen_mlp is None:
        mlp_w = np.eye(d)
        mlp_b = np.zeros(d)
    else:
        mlp_w = np.asarray(frozen_mlp[0], dtype=np.float64)
        mlp_b = np.asarray(frozen_mlp[1], dtype=np.float64)
        if mlp_w.shape != (d, d) or mlp_b.shape != (d,):
            raise ShapeMismatchError("frozen block weights do not match input_dim")
    head_w1, head_w2 = _mirrored_head(d, h, e, rng)
    return EncoderParams(
        w_down=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, a)),
        w_up=np.zeros((a, d)),
        ln_gain=np.ones(d),
        ln_bias=np.zeros(d),
        head_w1=head_w1,
        head_b1=np.zeros(h),
        head_w2=head_w2,
        head_b2=np.zeros(e),
        frozen_mlp_w=mlp_w,
        frozen_mlp_b=mlp_b,
        frozen_ln_gain=np.ones(d),
        frozen_ln_bias=np.zeros(d),
        scale=cfg.scale,
    )


def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + LN_EPS)
    return gain * xhat + bias, xhat


def _check_input(v: np.ndarray, params: EncoderParams) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    x = np.atleast_2d(v)
    if x.shape[1] != params.input_dim:
        raise ShapeMismatchError(
            f"input dim {x.shape[1]} does not match encoder dim {params.input_dim}"
        )
    return x, squeeze


def adapter_forward(v: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Pre-projection feature: frozen block output + residual + scaled adapter."""
    x, squeeze = _check_input(v, params)
    ln_a, _ = _layernorm(x, params.ln_gain, params.ln_bias)
    adapted = np.maximum(ln_a @ params.w_down, 0.0) @ params.w_up
    ln_f, _ = _layernorm(x, params.frozen_ln_gain, params.frozen_ln_bias)
    fused = ln_f @ params.frozen_mlp_w + params.frozen_mlp_b + x + params.scale * adapted
    return fused[0] if squeeze else fused


def encode(v: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Unit-norm embedding of one vector or a stack of vectors."""
    emb, _ = encode_with_cache(v, params)
    return emb


def encode_with_cache(v: np.ndarray, params: EncoderParams):
    """Forward pass that retains the intermediates needed by the backward pass."""
    x, squeeze = _check_input(v, params)
    ln_a, xhat_a = _layernorm(x, params.ln_gain, params.ln_bias)
    z = ln_a @ params.w_down
    hidden = np.maximum(z, 0.0)
    adapted = hidden @ params.w_up
    ln_f, _ = _layernorm(x, params.frozen_ln_gain, params.frozen_ln_bias)
    fused = ln_f @ params.frozen_mlp_w + params.frozen_mlp_b + x + params.scale * adapted

    a1 = fused @ params.head_w1 + params.head_b1
    r1 = np.maximum(a1, 0.0)
    a2 = r1 @ params.head_w2 + params.head_b2
    norms = np.linalg.norm(a2, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        row = int(np.argmax(norms[:, 0] < 1e-12))
        raise DegenerateDataError(f"zero embedding before normalization (row {row})")
    emb = a2 / norms

    cache = {
        "params": params, "xhat_a": xhat_a, "z": z, "hidden": hidden,
        "fused": fused, "a1": a1, "r1": r1, "emb": emb, "norms": norms,
        "squeeze": squeeze,
    }
    return (emb[0] if squeeze else emb), cache


def encode_backward(cache: dict, upstream: np.ndarray) -> EncoderGrads:
    """Exact gradients of ``sum(upstream * encode(v))`` for the trainable set."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if cache["squeeze"] and upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != cache["emb"].shape:
        raise ShapeMismatchError(
            f"upstream gradient shape {upstream.shape} != embedding shape {cache['emb'].shape}"
        )
    if not np.isfinite(upstream).all():
        raise DegenerateDataError("non-finite upstream gradient")
    p: EncoderParams = cache["params"]
    emb, norms = cache["emb"], cache["norms"]

    # unit-normalization: d(a2/|a2|) = (g - emb * <g, emb>) / |a2|
    d_a2 = (upstream - emb * (upstream * emb).sum(axis=1, keepdims=True)) / norms

    d_head_w2 = cache["r1"].T @ d_a2
    d_head_b2 = d_a2.sum(axis=0)
    d_r1 = d_a2 @ p.head_w2.T
    d_a1 = d_r1 * (cache["a1"] > 0)
    d_head_w1 = cache["fused"].T @ d_a1
    d_head_b1 = d_a1.sum(axis=0)
    d_fused = d_a1 @ p.head_w1.T

    d_adapted = p.scale * d_fused
    d_hidden = d_adapted @ p.w_up.T
    d_w_up = cache["hidden"].T @ d_adapted
    d_z = d_hidden * (cache["z"] > 0)
    ln_a = p.ln_gain * cache["xhat_a"] + p.ln_bias
    d_w_down = ln_a.T @ d_z
    d_ln_a = d_z @ p.w_down.T
    d_ln_gain = (d_ln_a * cache["xhat_a"]).sum(axis=0)
    d_ln_bias = d_ln_a.sum(axis=0)

    return EncoderGrads(
        w_down=d_w_down, w_up=d_w_up, ln_gain=d_ln_gain, ln_bias=d_ln_bias,
        head_w1=d_head_w1, head_b1=d_head_b1, head_w2=d_head_w2, head_b2=d_head_b2,
    )


# ---------------------------------------------------------------------------
# Checkpoint format: magic "FSGP", u32 version, u32 tensor count, then per
# tensor: u16 name length, name (utf-8), u8 ndim, ndim * u64 dims, f32 payload.
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FSGP"
CKPT_VERSION = 1
_TENSOR_ORDER = TRAINABLE_FIELDS + FROZEN_FIELDS


def save_checkpoint(params: EncoderParams, path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(_TENSOR_ORDER))]
    for name in _TENSOR_ORDER:
        value = getattr(params, name)
        arr = np.atleast_1d(np.asarray(value, dtype=np.float64)).astype("<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> EncoderParams:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise FeatureFormatError(f"checkpoint not found: {path}") from exc
    if blob[:4] != CKPT_MAGIC:
        raise FeatureFormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = arr.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise FeatureFormatError(f"{path}: truncated or corrupt checkpoint") from exc
    missing = [n for n in _TENSOR_ORDER if n not in tensors]
    if missing:
        raise FeatureFormatError(f"{path}: checkpoint is missing tensors {missing}")
    kwargs = {name: tensors[name] for name in _TENSOR_ORDER if name != "scale"}
    kwargs["scale"] = float(tensors["scale"][0])
    return EncoderParams(**kwargs)
