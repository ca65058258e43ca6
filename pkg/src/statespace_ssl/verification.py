"""Finite-difference gradient checks over every primitive and a small end-to-end pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .augment import single_blob_image
from .encoder import EncoderConfig, EncoderParams, MambaParams, encode, mamba_block
from .head import HeadState, distill_loss, student_dist, teacher_dist

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random weights make every output element matter to the scalar
    return ad.sum(ad.mul(out, Tensor(w.reshape(out.shape))))


def _uniform(rng, *shape, low=-2.0, high=2.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape))


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """``(name, f, inputs)`` triples; each ``f`` maps the inputs to a scalar."""
    def unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
        w = rng.normal(size=shape)
        return lambda a: _weighted(op(a), w), [_uniform(rng, *shape, low=lo, high=hi)]

    def binary(op, shape=(3, 4)):
        w = rng.normal(size=shape)
        return lambda a, b: _weighted(op(a, b), w), [_uniform(rng, *shape), _uniform(rng, *shape)]

    # keep relu and clamp inputs off their kinks so central differences are exact
    kinked = rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    w_k = rng.normal(size=(3, 4))
    w_mm = rng.normal(size=(3, 5))
    w_t = rng.normal(size=(4, 3))
    w_r = rng.normal(size=(2, 6))
    w_sum = rng.normal(size=4)
    w_b = rng.normal(size=(3, 4))
    w_cat = rng.normal(size=(5, 4))
    w_gr = rng.normal(size=(2, 5, 3))

    cases = [
        ("add", *binary(ad.add)),
        ("sub", *binary(ad.sub)),
        ("mul", *binary(ad.mul)),
        ("scale", *unary(lambda a: ad.scale(a, -1.7))),
        ("sigmoid", *unary(ad.sigmoid)),
        ("silu", *unary(ad.silu)),
        ("relu", lambda a: _weighted(ad.relu(a), w_k), [Tensor(kinked.copy())]),
        ("exp", *unary(ad.exp)),
        ("log", *unary(ad.log, 0.1, 2.0)),
        ("sqrt", *unary(ad.sqrt, 0.1, 2.0)),
        ("clamp_min", lambda a: _weighted(ad.clamp_min(a, 0.0), w_k), [Tensor(kinked.copy())]),
        ("matmul", lambda a, b: _weighted(ad.matmul(a, b), w_mm), [_uniform(rng, 3, 4), _uniform(rng, 4, 5)]),
        ("transpose", lambda a: _weighted(ad.transpose(a), w_t), [_uniform(rng, 3, 4)]),
        ("reshape", lambda a: _weighted(ad.reshape(a, (2, 6)), w_r), [_uniform(rng, 3, 4)]),
        ("sum", lambda a: _weighted(ad.sum(a, axis=0), w_sum), [_uniform(rng, 3, 4)]),
        ("mean", lambda a: _weighted(ad.mean(a, axis=0), w_sum), [_uniform(rng, 3, 4)]),
        ("broadcast_rows", lambda v: _weighted(ad.broadcast_rows(v, 3), w_b), [_uniform(rng, 4)]),
        ("flip", *unary(lambda a: ad.flip(a, 0))),
        ("index", lambda a: _weighted(a[1:], w_b[1:]), [_uniform(rng, 3, 4)]),
        ("concat", lambda a, b: _weighted(ad.concat([a, b], axis=0), w_cat),
         [_uniform(rng, 2, 4), _uniform(rng, 3, 4)]),
        ("softmax", *unary(lambda a: ad.softmax(a, 0.7))),
        ("layer_norm", *unary(ad.layer_norm)),
        ("l2_normalize", *unary(ad.l2_normalize)),
        ("gated_recurrence",
         lambda g, x, W: _weighted(ad.gated_recurrence(g, x, W), w_gr),
         [Tensor(rng.uniform(0.1, 0.9, (2, 5, 3))), _uniform(rng, 2, 5, 3),
          Tensor(rng.uniform(-0.5, 0.5, (3, 3)))]),
    ]
    return cases


def _mamba_case(rng: np.random.Generator):
    d, d_s, n = 4, 3, 5
    blk = MambaParams.init(d, d_s, rng, dtype=np.float64)
    blk.b_g = Tensor(rng.normal(0, 0.5, d_s))
    tokens = _uniform(rng, n, d)
    w = rng.normal(size=(n, d))
    names = list(vars(blk))

    def f(x, *params):
        return _weighted(mamba_block(x, MambaParams(**dict(zip(names, params)))), w)

    return f, [tokens, *vars(blk).values()]


def _pipeline_case(rng: np.random.Generator):
    """Patchify, encode, project and distillation loss against a fixed teacher target."""
    cfg = EncoderConfig(patch_size=4, model_dim=4, state_dim=3, depth=1)
    enc = EncoderParams.init(cfg, rng, dtype=np.float64)
    # mild temperatures keep the loss O(1); sharp ones push gradients into finite-difference roundoff
    head = HeadState.init(cfg.model_dim, 5, 3, 4, rng, dtype=np.float64, T_s=1.0, T_t=0.5)
    # two 8x8 classes: a small lesion and a large one
    image = np.stack([single_blob_image(8, (2.5, 2.5), 1.0, rng), single_blob_image(8, (4.5, 4.0), 3.0, rng)])
    enc_named = enc.named()
    names = list(enc_named) + list(head.named())
    with_teacher = teacher_dist(encode(image[1:], cfg, enc).pooled, head)

    def f(*params):
        named = dict(zip(names, params))
        e = EncoderParams.from_named(cfg, named)
        h = head.with_weights(named)
        p_s = student_dist(encode(image[:1], cfg, e).pooled, h)
        return distill_loss([with_teacher], [p_s])

    return f, [*enc_named.values(), *head.named().values()]


def run_suite(tolerance: float | None = None, seed: int = 0,
              progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every check at float64. ``tolerance`` overrides both default thresholds."""
    rng = np.random.default_rng(seed)
    checks = [(name, f, xs, PRIMITIVE_TOL) for name, f, xs in primitive_cases(rng)]
    checks.append(("mamba_block", *_mamba_case(rng), COMPOSITE_TOL))
    checks.append(("pipeline", *_pipeline_case(rng), COMPOSITE_TOL))
    results = []
    for name, f, inputs, tol in checks:
        t0 = time.perf_counter()
        err = grad_check(f, inputs, eps=1e-6)
        res = CheckResult(name, err, tolerance if tolerance is not None else tol, time.perf_counter() - t0)
        results.append(res)
        if progress is not None:
            progress(res)
    return results
