"""Patch tokenisation and the gated state-space image encoder.

An image is cut into ``p x p`` patches in raster order, each patch is
linearly embedded, and the token sequence passes through ``depth`` residual
blocks. Each block normalises its input, runs the gated recurrence

    g_k = sigmoid(W_g x_k + b_g)
    h_k = g_k * (W_s h_{k-1} + W_x x_k),      h_0 = 0

forward (and, when bidirectional, over the reversed sequence too), and
projects the averaged states back to the model width with ``W_o``.

Everything accepts an optional leading batch axis so that a stack of
same-sized crops is encoded in one pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    model_dim: int = 32
    state_dim: int = 32
    depth: int = 2
    bidirectional: bool = True
    pooling: Literal["mean", "last"] = "mean"
    mixer: Literal["ssm", "attention"] = "ssm"

    def __post_init__(self):
        for name in ("patch_size", "model_dim", "state_dim", "depth"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.pooling not in ("mean", "last"):
            raise InvalidArgumentError(f"pooling must be 'mean' or 'last', got {self.pooling!r}")
        if self.mixer not in ("ssm", "attention"):
            raise InvalidArgumentError(f"mixer must be 'ssm' or 'attention', got {self.mixer!r}")

    @property
    def token_dim(self) -> int:
        return 3 * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MambaParams:
    W_s: Tensor
    W_x: Tensor
    W_g: Tensor
    b_g: Tensor
    W_o: Tensor
    norm_scale: Tensor
    norm_bias: Tensor

    @classmethod
    def init(cls, d: int, d_s: int, rng: np.random.Generator, dtype=np.float32) -> "MambaParams":
        def p(a):
            return ad.parameter(a, dtype=dtype)
        return cls(
            # spectral radius well below one keeps long scans bounded at init
            W_s=p(rng.normal(0.0, 0.5 / math.sqrt(d_s), (d_s, d_s))),
            W_x=p(rng.normal(0.0, 1.0 / math.sqrt(d), (d_s, d))),
            W_g=p(rng.normal(0.0, 1.0 / math.sqrt(d), (d_s, d))),
            b_g=p(np.zeros(d_s)),
            W_o=p(rng.normal(0.0, 0.5 / math.sqrt(d_s), (d, d_s))),
            norm_scale=p(np.ones(d)),
            norm_bias=p(np.zeros(d)),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in vars(self).items()}


@dataclass
class AttentionParams:
    """Single-head attention block; only used for the quadratic baseline."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    norm_scale: Tensor
    norm_bias: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        def w(std):
            return ad.parameter(rng.normal(0.0, std, (d, d)), dtype=dtype)
        return cls(W_q=w(1 / math.sqrt(d)), W_k=w(1 / math.sqrt(d)), W_v=w(1 / math.sqrt(d)),
                   W_o=w(0.5 / math.sqrt(d)),
                   norm_scale=ad.parameter(np.ones(d), dtype=dtype),
                   norm_bias=ad.parameter(np.zeros(d), dtype=dtype))

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in vars(self).items()}


@dataclass
class EncoderParams:
    W_e: Tensor
    b_e: Tensor
    blocks: list = field(default_factory=list)
    # fixed per-channel input standardisation, not learned
    pixel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pixel_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> "EncoderParams":
        d, d_in = cfg.model_dim, cfg.token_dim
        W_e = ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d, d_in)), dtype=dtype)
        b_e = ad.parameter(np.zeros(d), dtype=dtype)
        if cfg.mixer == "ssm":
            blocks = [MambaParams.init(d, cfg.state_dim, rng, dtype) for _ in range(cfg.depth)]
        else:
            blocks = [AttentionParams.init(d, rng, dtype) for _ in range(cfg.depth)]
        return cls(W_e, b_e, blocks)

    def named(self) -> dict[str, Tensor]:
        out = {"encoder.W_e": self.W_e, "encoder.b_e": self.b_e}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"encoder.blocks.{i}."))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {"pixel_mean": self.pixel_mean, "pixel_std": self.pixel_std}

    @classmethod
    def from_named(cls, cfg: EncoderConfig, named: dict[str, Tensor],
                   buffers: dict[str, np.ndarray] | None = None) -> "EncoderParams":
        kind = MambaParams if cfg.mixer == "ssm" else AttentionParams
        fields = list(kind.__dataclass_fields__)
        blocks = [kind(**{f: named[f"encoder.blocks.{i}.{f}"] for f in fields}) for i in range(cfg.depth)]
        return cls(named["encoder.W_e"], named["encoder.b_e"], blocks, **(buffers or {}))

    def standardize(self, image: np.ndarray, dtype=None) -> np.ndarray:
        image = np.asarray(image, dtype=dtype)
        # flatten each pixel row so the channel stats broadcast over a long inner loop
        width = image.shape[-2]
        rows = image.reshape(*image.shape[:-2], width * 3)
        mean = np.tile(np.asarray(self.pixel_mean, dtype=image.dtype), width)
        inv = np.tile(np.asarray(1.0 / np.asarray(self.pixel_std, dtype=np.float64), dtype=image.dtype), width)
        return ((rows - mean) * inv).reshape(image.shape)


@dataclass
class PatchSequence:
    tokens: np.ndarray          # [N, 3p^2] or [B, N, 3p^2]
    n: int
    origin_hw: tuple[int, int]
    patch_size: int

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.origin_hw
        return h // self.patch_size, w // self.patch_size


@dataclass
class EncoderOutput:
    Z: Tensor        # [N, d] (or [B, N, d])
    S: Tensor        # [N, d_s] last block's forward-scan states (attention mixer: [N, d])
    pooled: Tensor   # [d] (or [B, d])


# ---------------------------------------------------------------------------
# tokenisation

def patchify(image: np.ndarray, p: int) -> PatchSequence:
    """Split ``[H, W, 3]`` (or ``[B, H, W, 3]``) into raster-ordered flattened patches."""
    img = np.asarray(image)
    if img.ndim not in (3, 4) or img.shape[-1] != 3:
        raise ShapeError(f"expected [H, W, 3] or [B, H, W, 3], got {img.shape}")
    h, w = img.shape[-3:-1]
    if p < 1 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide image size {h}x{w}")
    gh, gw = h // p, w // p
    lead = img.shape[:-3]
    x = img.reshape(*lead, gh, p, gw, p, 3)
    x = np.moveaxis(x, -4, -3)          # [..., gh, gw, p, p, 3]
    tokens = x.reshape(*lead, gh * gw, p * p * 3)
    return PatchSequence(np.ascontiguousarray(tokens), gh * gw, (h, w), p)


def unpatchify(patches: PatchSequence) -> np.ndarray:
    p = patches.patch_size
    h, w = patches.origin_hw
    gh, gw = h // p, w // p
    lead = patches.tokens.shape[:-2]
    x = patches.tokens.reshape(*lead, gh, gw, p, p, 3)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h, w, 3)


# ---------------------------------------------------------------------------
# differentiable building blocks

def _linear(x2d: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise ``x W^T (+ b)`` on a 2-D tensor."""
    out = ad.matmul(x2d, ad.transpose(W))
    if b is not None:
        out = ad.add(out, ad.broadcast_rows(b, x2d.shape[0]))
    return out


def _rows(x: Tensor) -> Tensor:
    return ad.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x


def embed(patches: PatchSequence | Tensor | np.ndarray, W_e: Tensor, b_e: Tensor) -> Tensor:
    """Token-wise affine map ``x W_e^T + b_e``; keeps any leading batch axis."""
    if isinstance(patches, PatchSequence):
        patches = patches.tokens
    x = patches if isinstance(patches, Tensor) else Tensor(patches, dtype=W_e.dtype)
    if x.shape[-1] != W_e.shape[1] or b_e.shape != (W_e.shape[0],):
        raise ShapeError(f"embed: tokens {x.shape} incompatible with W_e {W_e.shape}, b_e {b_e.shape}")
    out = _linear(_rows(x), W_e, b_e)
    return ad.reshape(out, (*x.shape[:-1], W_e.shape[0]))


def _scan_inputs(u: Tensor, params: MambaParams) -> tuple[Tensor, Tensor]:
    """Drive ``W_x u`` and gates ``sigmoid(W_g u + b_g)``, both ``[..., N, d_s]``."""
    if u.ndim < 2 or u.shape[-2] < 1:
        raise InvalidArgumentError(f"ssm_scan needs a non-empty [.., N, d] sequence, got {u.shape}")
    d_s = params.W_s.shape[0]
    lead = u.shape[:-1]
    x = _rows(u)
    drive = ad.reshape(_linear(x, params.W_x), (*lead, d_s))
    gates = ad.sigmoid(ad.reshape(_linear(x, params.W_g, params.b_g), (*lead, d_s)))
    return drive, gates


def ssm_scan(u: Tensor, params: MambaParams, direction: str = "forward") -> tuple[Tensor, Tensor]:
    """Run the gated recurrence over tokens ``u`` (``[N, d]`` or ``[B, N, d]``).

    Returns ``(states, gates)``, both ``[..., N, d_s]`` and aligned with the
    input order regardless of ``direction``.
    """
    if direction not in ("forward", "backward"):
        raise InvalidArgumentError(f"direction must be forward|backward, got {direction!r}")
    drive, gates = _scan_inputs(u, params)
    if direction == "forward":
        return ad.gated_recurrence(gates, drive, params.W_s), gates
    tok_axis = u.ndim - 2
    states = ad.gated_recurrence(ad.flip(gates, tok_axis), ad.flip(drive, tok_axis), params.W_s)
    return ad.flip(states, tok_axis), gates


def _bidirectional_scan(u: Tensor, params: MambaParams) -> tuple[Tensor, Tensor]:
    """Forward and reversed scans in a single recurrence call; returns ``(fwd, bwd)`` in input order."""
    drive, gates = _scan_inputs(u, params)
    tok_axis = u.ndim - 2
    one = (1, *drive.shape)

    def both(t):
        return ad.concat([ad.reshape(t, one), ad.reshape(ad.flip(t, tok_axis), one)], axis=0)

    states = ad.gated_recurrence(both(gates), both(drive), params.W_s)
    fwd = ad.reshape(states[0:1], drive.shape)
    bwd = ad.flip(ad.reshape(states[1:2], drive.shape), tok_axis)
    return fwd, bwd


def _norm_affine(x: Tensor, scale_: Tensor, bias: Tensor) -> Tensor:
    rows = _rows(x)
    n = rows.shape[0]
    y = ad.add(ad.mul(ad.layer_norm(rows), ad.broadcast_rows(scale_, n)), ad.broadcast_rows(bias, n))
    return ad.reshape(y, x.shape)


def _mamba_block(tokens: Tensor, params: MambaParams, bidirectional: bool) -> tuple[Tensor, Tensor]:
    u = _norm_affine(tokens, params.norm_scale, params.norm_bias)
    if bidirectional:
        fwd, bwd = _bidirectional_scan(u, params)
        mix = ad.scale(ad.add(fwd, bwd), 0.5)
    else:
        fwd, _ = ssm_scan(u, params, "forward")
        mix = fwd
    proj = ad.reshape(_linear(_rows(mix), params.W_o), tokens.shape)
    return ad.add(tokens, proj), fwd


def mamba_block(tokens: Tensor, params: MambaParams, bidirectional: bool = True) -> Tensor:
    """Residual gated-scan block: ``tokens + W_o * scan(norm(tokens))``."""
    return _mamba_block(tokens, params, bidirectional)[0]


def attention_reference(tokens: Tensor, W_q: Tensor, W_k: Tensor, W_v: Tensor) -> Tensor:
    """Single-head ``softmax(Q K^T / sqrt(d)) V`` over ``[N, d]`` tokens. Θ(N²)."""
    if tokens.ndim != 2:
        raise ShapeError(f"attention_reference expects [N, d], got {tokens.shape}")
    d = tokens.shape[1]
    for name, W in (("W_q", W_q), ("W_k", W_k), ("W_v", W_v)):
        if W.shape != (d, d):
            raise ShapeError(f"{name} must be {(d, d)}, got {W.shape}")
    q = _linear(tokens, W_q)
    k = _linear(tokens, W_k)
    v = _linear(tokens, W_v)
    scores = ad.matmul(q, ad.transpose(k))
    att = ad.softmax(scores, temperature=math.sqrt(d))
    return ad.matmul(att, v)


def _attention_block(tokens: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    u = _norm_affine(tokens, params.norm_scale, params.norm_bias)
    if u.ndim == 2:
        mix = attention_reference(u, params.W_q, params.W_k, params.W_v)
    else:
        mix = ad.concat(
            [ad.reshape(attention_reference(u[b], params.W_q, params.W_k, params.W_v), (1, *u.shape[1:]))
             for b in range(u.shape[0])],
            axis=0,
        )
    proj = ad.reshape(_linear(_rows(mix), params.W_o), tokens.shape)
    return ad.add(tokens, proj), mix


def encode(image: np.ndarray, cfg: EncoderConfig, params: EncoderParams) -> EncoderOutput:
    """Patchify, embed and run all blocks on ``[H, W, 3]`` or a ``[B, H, W, 3]`` stack."""
    patches = patchify(params.standardize(image, params.W_e.dtype), cfg.patch_size)
    x = embed(patches, params.W_e, params.b_e)
    states = None
    for blk in params.blocks:
        if cfg.mixer == "ssm":
            x, states = _mamba_block(x, blk, cfg.bidirectional)
        else:
            x, states = _attention_block(x, blk)
    tok_axis = x.ndim - 2
    if cfg.pooling == "mean":
        pooled = ad.mean(x, axis=tok_axis)
    elif x.ndim == 2:
        pooled = x[-1]
    else:
        pooled = x[:, -1]
    return EncoderOutput(Z=x, S=states, pooled=pooled)


def param_count(cfg: EncoderConfig) -> int:
    """Number of learnable scalars in the patch embedding and all blocks."""
    d, d_s, d_in = cfg.model_dim, cfg.state_dim, cfg.token_dim
    embedding = d * d_in + d
    if cfg.mixer == "ssm":
        block = d_s * d_s + 2 * d_s * d + d_s + d * d_s + 2 * d
    else:
        block = 4 * d * d + 2 * d
    return embedding + cfg.depth * block
