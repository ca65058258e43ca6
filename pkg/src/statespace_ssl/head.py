"""Projection head, prototype scoring, teacher centering and the distillation loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError, ShapeError

LOG_FLOOR = 1e-12
SUM_TOL = 1e-6


@dataclass
class HeadState:
    W_1: Tensor              # [d_h, d]
    W_2: Tensor              # [d_p, d_h]
    prototypes: Tensor       # [K, d_p]
    T_s: float = 0.1
    T_t: float = 0.04
    center: np.ndarray | None = None
    center_momentum: float = 0.9
    centering: bool = True

    def __post_init__(self):
        if not (self.T_s > 0 and self.T_t > 0):
            raise InvalidArgumentError("temperatures must be positive")
        if self.T_t > self.T_s:
            raise InvalidArgumentError(f"teacher temperature {self.T_t} exceeds student {self.T_s}")
        if self.K < 2:
            raise InvalidArgumentError("need at least two prototypes")
        if not 0.0 <= self.center_momentum < 1.0:
            raise InvalidArgumentError("center_momentum must lie in [0, 1)")
        if self.center is None:
            self.center = np.zeros(self.K)
        if self.center.shape != (self.K,) or not np.all(np.isfinite(self.center)):
            raise InvalidArgumentError("center must be a finite [K] vector")

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def init(cls, d: int, hidden: int, out: int, K: int, rng: np.random.Generator,
             dtype=np.float32, **kwargs) -> "HeadState":
        W_2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (out, hidden))
        # zero row sums cancel the constant 0.5 the sigmoid adds to every hidden unit
        W_2 -= W_2.mean(axis=1, keepdims=True)
        return cls(
            W_1=ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (hidden, d)), dtype=dtype),
            W_2=ad.parameter(W_2, dtype=dtype),
            prototypes=ad.parameter(rng.normal(0.0, 1.0, (K, out)), dtype=dtype),
            **kwargs,
        )

    def named(self) -> dict[str, Tensor]:
        return {"head.W_1": self.W_1, "head.W_2": self.W_2, "head.prototypes": self.prototypes}

    def with_weights(self, named: dict[str, Tensor]) -> "HeadState":
        """Same temperatures and (shared) center, different weight tensors."""
        return replace(self, W_1=named["head.W_1"], W_2=named["head.W_2"],
                       prototypes=named["head.prototypes"], center=self.center)


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    return x, False


def project(z: Tensor, head: HeadState) -> Tensor:
    """``W_2 sigmoid(W_1 z)`` for a ``[d]`` embedding or a ``[B, d]`` batch."""
    rows, single = _as_rows(z)
    if rows.shape[1] != head.W_1.shape[1]:
        raise ShapeError(f"project: embedding width {rows.shape[1]} != W_1 input {head.W_1.shape[1]}")
    hidden = ad.sigmoid(ad.matmul(rows, ad.transpose(head.W_1)))
    out = ad.matmul(hidden, ad.transpose(head.W_2))
    return ad.reshape(out, (out.shape[1],)) if single else out


def prototype_logits(v: Tensor, head: HeadState) -> Tensor:
    """Cosine similarity of ``v`` with every prototype row; values in [-1, 1]."""
    rows, single = _as_rows(v)
    if rows.shape[1] != head.prototypes.shape[1]:
        raise ShapeError(f"prototype_logits: width {rows.shape[1]} != {head.prototypes.shape[1]}")
    logits = ad.matmul(ad.l2_normalize(rows), ad.transpose(ad.l2_normalize(head.prototypes)))
    return ad.reshape(logits, (logits.shape[1],)) if single else logits


def student_dist(z: Tensor, head: HeadState) -> Tensor:
    return ad.softmax(prototype_logits(project(z, head), head), head.T_s)


def teacher_logits(z: Tensor | np.ndarray, head: HeadState) -> np.ndarray:
    """Teacher prototype logits computed without recording anything."""
    frozen = head.with_weights({k: v.detach() for k, v in head.named().items()})
    zt = z.detach() if isinstance(z, Tensor) else Tensor(z)
    return prototype_logits(project(zt, frozen), frozen).data


def teacher_dist(z: Tensor | np.ndarray, head: HeadState, logits: np.ndarray | None = None) -> np.ndarray:
    """Sharpened, centred teacher distribution; carries no gradient.

    Pass precomputed ``logits`` to skip the projection.
    """
    if logits is None:
        logits = teacher_logits(z, head)
    shifted = logits - head.center if head.centering else logits
    return ad.softmax(Tensor(shifted), head.T_t).data


def center_update(center: np.ndarray, teacher_logits_batch: np.ndarray, momentum: float) -> np.ndarray:
    """``momentum * center + (1 - momentum) * batch mean``."""
    if not 0.0 <= momentum < 1.0:
        raise InvalidArgumentError(f"center momentum must lie in [0, 1), got {momentum}")
    batch = np.asarray(teacher_logits_batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise InvalidArgumentError("empty teacher batch")
    return momentum * np.asarray(center, dtype=np.float64) + (1.0 - momentum) * batch.mean(axis=0)


def _check_dist(p: np.ndarray, what: str) -> None:
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SUM_TOL) or np.any(p < 0):
        raise InvalidArgumentError(f"{what} rows must be probability vectors (sum 1 within {SUM_TOL})")


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def cross_entropy(p_t: np.ndarray | Tensor, p_s: Tensor) -> Tensor:
    """Row-averaged ``-sum_i p_t(i) log p_s(i)`` with the log clamped at 1e-12."""
    target = p_t.data if isinstance(p_t, Tensor) else np.asarray(p_t)
    p_s = p_s if isinstance(p_s, Tensor) else Tensor(p_s)
    if target.shape != p_s.shape:
        raise InvalidArgumentError(f"distribution shapes differ: {target.shape} vs {p_s.shape}")
    _check_dist(target, "teacher")
    _check_dist(p_s.data, "student")
    logp = ad.log(ad.clamp_min(p_s, LOG_FLOOR))
    per_row = ad.mul(Tensor(target.astype(p_s.dtype)), logp)
    rows = target.size // target.shape[-1]
    return ad.scale(ad.sum(per_row), -1.0 / rows)


def distill_loss(p_t_list: Sequence, p_s_list: Sequence, teacher_ids: Sequence | None = None,
                 student_ids: Sequence | None = None) -> Tensor:
    """Mean cross-entropy over every (teacher view, student view) pair.

    ``teacher_ids`` / ``student_ids`` name the crop each distribution came
    from; pairs that share a crop are skipped. Without ids every pair counts.
    """
    if not p_t_list or not p_s_list:
        raise InvalidArgumentError("need at least one teacher and one student distribution")
    t_ids = list(teacher_ids) if teacher_ids is not None else [("t", i) for i in range(len(p_t_list))]
    s_ids = list(student_ids) if student_ids is not None else [("s", i) for i in range(len(p_s_list))]
    if len(t_ids) != len(p_t_list) or len(s_ids) != len(p_s_list):
        raise InvalidArgumentError("id lists must match distribution lists")
    terms = [cross_entropy(pt, ps)
             for pt, ti in zip(p_t_list, t_ids)
             for ps, si in zip(p_s_list, s_ids) if ti != si]
    if not terms:
        raise InvalidArgumentError("pairing rule excluded every pair")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def pairs_used(teacher_ids: Sequence, student_ids: Sequence) -> list[tuple]:
    return [(t, s) for t in teacher_ids for s in student_ids if t != s]
