"""Teacher-student self-distillation training loop, optimiser and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .augment import ViewBatch, ViewConfig, item_rng, load_dataset, make_views
from .autodiff import Tape, Tensor
from .encoder import EncoderConfig, EncoderParams, encode
from .errors import ConfigError, CorruptCheckpointError, InvalidArgumentError, NonFiniteError
from .head import HeadState, center_update, distill_loss, entropy, student_dist, teacher_dist, teacher_logits

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "loss", "teacher_entropy", "momentum", "lr", "epoch_ms"]
RESOURCES_HEADER = ["epoch", "epoch_ms", "peak_mb"]


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.04
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m_start: float = 0.996
    m_end: float = 1.0
    t_student: float = 0.1
    t_teacher: float = 0.04
    prototypes: int = 64
    head_hidden: int = 64
    head_out: int = 32
    center_momentum: float = 0.9
    centering: bool = True
    patch_size: int = 8
    model_dim: int = 32
    state_dim: int = 32
    depth: int = 2
    bidirectional: bool = True
    pooling: str = "mean"
    mixer: str = "ssm"
    global_size: int = 224
    local_size: int = 96
    n_local: int = 6
    teacher_views: int = 1
    seed: int = 0
    data: str = "data"
    out: str = "runs/default"
    deterministic: bool = False
    workers: int = 0

    def __post_init__(self):
        positive = ("epochs", "batch_size", "prototypes", "head_hidden", "head_out", "global_size",
                    "local_size", "n_local")
        for name in positive:
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.m_start <= self.m_end <= 1:
            raise ConfigError("need 0 <= m_start <= m_end <= 1")
        if self.teacher_views not in (1, 2):
            raise ConfigError("teacher_views must be 1 or 2")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        self.encoder  # validates the encoder fields

    @property
    def encoder(self) -> EncoderConfig:
        try:
            return EncoderConfig(self.patch_size, self.model_dim, self.state_dim, self.depth,
                                 self.bidirectional, self.pooling, self.mixer)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def views(self) -> ViewConfig:
        return ViewConfig(global_size=self.global_size, local_size=self.local_size, n_local=self.n_local)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def architecture_hash(self) -> str:
        """Hash of every field that determines tensor shapes."""
        arch = self.encoder.to_dict()
        arch.update(prototypes=self.prototypes, head_hidden=self.head_hidden, head_out=self.head_out)
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


def _coerce(name: str, raw: str, kind):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return TrainConfig(**values)


def load_config(path: str | os.PathLike) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    rng: np.random.Generator
    config: TrainConfig
    m: float = 0.996
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=lambda: {
        "pixel_mean": np.zeros(3, np.float32), "pixel_std": np.ones(3, np.float32)})
    last_teacher_entropy: float = float("nan")

    def student_encoder(self) -> EncoderParams:
        return EncoderParams.from_named(self.config.encoder, self.student, self.buffers)

    def teacher_encoder(self) -> EncoderParams:
        return EncoderParams.from_named(self.config.encoder, self.teacher, self.buffers)


def pixel_stats(images: np.ndarray) -> dict[str, np.ndarray]:
    """Per-channel mean and std over a ``[n, H, W, 3]`` stack, as float32."""
    flat = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    std = flat.std(axis=0)
    return {"pixel_mean": flat.mean(axis=0).astype(np.float32),
            "pixel_std": np.where(std > 1e-6, std, 1.0).astype(np.float32)}


def init_state(cfg: TrainConfig, dtype=np.float32) -> tuple[TrainState, HeadState]:
    """Fresh student from ``cfg.seed``; the teacher starts as an exact copy."""
    rng = np.random.default_rng(cfg.seed)
    enc = EncoderParams.init(cfg.encoder, rng, dtype)
    head = HeadState.init(cfg.model_dim, cfg.head_hidden, cfg.head_out, cfg.prototypes, rng, dtype,
                          T_s=cfg.t_student, T_t=cfg.t_teacher, center=np.zeros(cfg.prototypes, dtype),
                          center_momentum=cfg.center_momentum, centering=cfg.centering)
    student = {**enc.named(), **head.named()}
    teacher = {k: Tensor(v.data, dtype=v.dtype) for k, v in student.items()}
    moments = {k: (np.zeros_like(v.data), np.zeros_like(v.data)) for k, v in student.items()}
    state = TrainState(student, teacher, moments, rng, cfg, m=cfg.m_start)
    return state, head


# ---------------------------------------------------------------------------
# update rules

def ema_update(teacher: Mapping[str, Tensor | np.ndarray], student: Mapping[str, Tensor | np.ndarray],
               m: float) -> Mapping:
    """In place ``teacher <- m * teacher + (1 - m) * student``."""
    if not 0.0 <= m <= 1.0:
        raise InvalidArgumentError(f"momentum must lie in [0, 1], got {m}")
    if teacher.keys() != student.keys():
        raise InvalidArgumentError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        td = t.data if isinstance(t, Tensor) else t
        sd = s.data if isinstance(s, Tensor) else s
        if td.shape != sd.shape:
            raise InvalidArgumentError(f"{name}: shape {td.shape} vs {sd.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            td[...] = sd
        else:
            td *= m
            td += (1.0 - m) * sd
    return teacher


def momentum_schedule(step: int, total_steps: int, m_start: float, m_end: float) -> float:
    """Cosine ramp from ``m_start`` (step 0) to ``m_end`` (step ``total_steps``)."""
    if total_steps < 1:
        raise InvalidArgumentError("total_steps must be >= 1")
    if not 0 <= m_start <= m_end <= 1:
        raise InvalidArgumentError("need 0 <= m_start <= m_end <= 1")
    t = min(max(step, 0), total_steps)
    return m_end - (m_end - m_start) * (math.cos(math.pi * t / total_steps) + 1) / 2


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay to zero."""
    total_steps = max(total_steps, 1)
    warm = int(round(warmup_frac * total_steps))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(total_steps - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
               moments: dict[str, tuple[np.ndarray, np.ndarray]], lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0, t: int = 1) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``t`` is the 1-based step used for bias correction. Parameters without a
    gradient only receive the weight decay.
    """
    if not lr > 0:
        raise InvalidArgumentError("lr must be > 0")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise InvalidArgumentError(f"{name}: gradient shape {g.shape} != {p.shape}")
        data = p.data
        if weight_decay:
            data -= lr * weight_decay * data
        if g is None:
            continue
        m1, m2 = moments[name]
        m1 *= beta1
        m1 += (1.0 - beta1) * g
        m2 *= beta2
        m2 += (1.0 - beta2) * g * g
        data -= lr * (m1 / c1) / (np.sqrt(m2 / c2) + eps)


# ---------------------------------------------------------------------------
# one optimisation step

def _stack(images: Sequence[np.ndarray], dtype) -> np.ndarray:
    return np.ascontiguousarray(np.stack(images), dtype=dtype)


def train_step(batch: Sequence[ViewBatch], state: TrainState, head: HeadState,
               total_steps: int | None = None) -> tuple[float, TrainState]:
    """Student on ``{v2g, v1l..v6l}``, teacher on ``v1g`` (or both globals), AdamW, EMA, centering."""
    cfg = state.config
    ecfg = cfg.encoder
    total = total_steps if total_steps is not None else max(state.step + 1, 1)
    dtype = state.student["encoder.W_e"].dtype
    b = len(batch)
    n_local = len(batch[0].locals)

    m = momentum_schedule(state.step, total, cfg.m_start, cfg.m_end)
    lr = lr_schedule(state.step, total, cfg.lr, cfg.warmup_frac)

    # teacher: no tape linkage, parameters never require grad
    t_views = [0] if cfg.teacher_views == 1 else [0, 1]
    t_enc = state.teacher_encoder()
    t_head = head.with_weights(state.teacher)
    t_imgs = _stack([vb.globals[j] for j in t_views for vb in batch], dtype)
    t_pooled = encode(t_imgs, ecfg, t_enc).pooled
    t_logits = teacher_logits(t_pooled, t_head)
    p_t_all = teacher_dist(None, head, logits=t_logits)
    p_t_list = [p_t_all[i * b:(i + 1) * b] for i in range(len(t_views))]
    teacher_ids = [f"g{j + 1}" for j in t_views]

    s_enc = state.student_encoder()
    s_head = head.with_weights(state.student)
    for p in state.student.values():
        p.grad = None
    with Tape() as tape:
        g_pooled = encode(_stack([vb.globals[1] for vb in batch], dtype), ecfg, s_enc).pooled
        l_imgs = _stack([vb.locals[j] for j in range(n_local) for vb in batch], dtype)
        l_pooled = encode(l_imgs, ecfg, s_enc).pooled
        p_s_global = student_dist(g_pooled, s_head)
        p_s_local = student_dist(l_pooled, s_head)
        p_s_list = [p_s_global] + [p_s_local[j * b:(j + 1) * b] for j in range(n_local)]
        student_ids = ["g2"] + [f"l{j + 1}" for j in range(n_local)]
        loss = distill_loss(p_t_list, p_s_list, teacher_ids, student_ids)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} at step {state.step}")
    tape.backward(loss)

    grads = {k: p.grad for k, p in state.student.items()}
    adamw_step(state.student, grads, state.moments, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
               cfg.weight_decay, t=state.step + 1)
    ema_update(state.teacher, state.student, m)
    if head.centering:
        head.center[...] = center_update(head.center, t_logits, head.center_momentum).astype(head.center.dtype)
    state.m = m
    state.step += 1
    state.last_teacher_entropy = float(entropy(p_t_all).mean())
    return value, state


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SSSL"
VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")  # tobytes() is C-order; keeps 0-d shapes
    dims = arr.shape
    out = [struct.pack("<I", len(raw)), raw, struct.pack("<I", len(dims))]
    out += [struct.pack("<Q", d) for d in dims]
    out.append(arr.tobytes())
    return b"".join(out)


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    body = MAGIC + struct.pack("<I", VERSION) + b"".join(_pack_tensor(k, v) for k, v in tensors.items())
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12:
        raise CorruptCheckpointError("file too short for a checkpoint")
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("CRC32 mismatch: file is truncated or corrupted")
    pos, end = 8, len(buf) - 4
    out = {}
    try:
        while pos < end:
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > end:
                raise CorruptCheckpointError(f"tensor {name!r} overruns the file")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed tensor table: {exc}") from None
    return out


def _meta_tensor(meta: dict) -> np.ndarray:
    # bytes stored as f32 values (exact for 0..255)
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _meta_from(arr: np.ndarray) -> dict:
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def save_checkpoint(state: TrainState, head: HeadState, path: str | os.PathLike) -> None:
    meta = {
        "step": state.step,
        "m": state.m,
        "rng": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
        "config_hash": state.config.architecture_hash(),
        "head": {"T_s": head.T_s, "T_t": head.T_t, "center_momentum": head.center_momentum,
                 "centering": head.centering},
    }
    tensors = {"__meta__": _meta_tensor(meta), "head.center": np.asarray(head.center)}
    for k, v in state.buffers.items():
        tensors[f"buffer/{k}"] = v
    for k, v in state.student.items():
        tensors[f"student/{k}"] = v.data
    for k, v in state.teacher.items():
        tensors[f"teacher/{k}"] = v.data
    for k, (m1, m2) in state.moments.items():
        tensors[f"adam_m/{k}"] = m1
        tensors[f"adam_v/{k}"] = m2
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike,
                    expected_config: TrainConfig | None = None) -> tuple[TrainState, HeadState]:
    """Inverse of :func:`save_checkpoint`; optionally enforce the architecture hash."""
    tensors = decode_checkpoint(Path(path).read_bytes())
    if "__meta__" not in tensors:
        raise CorruptCheckpointError("checkpoint has no metadata record")
    meta = _meta_from(tensors.pop("__meta__"))
    cfg = TrainConfig(**meta["config"])
    if cfg.architecture_hash() != meta["config_hash"]:
        raise CorruptCheckpointError("stored config does not match its hash")
    if expected_config is not None and expected_config.architecture_hash() != meta["config_hash"]:
        raise CorruptCheckpointError("config-hash mismatch: checkpoint was built for a different encoder/head")

    def group(prefix, grad):
        return {k[len(prefix):]: Tensor(v, requires_grad=grad, dtype=np.float32)
                for k, v in tensors.items() if k.startswith(prefix)}

    student = group("student/", True)
    teacher = group("teacher/", False)
    m1 = {k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    m2 = {k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    moments = {k: (m1[k], m2[k]) for k in student}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    buffers = {k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")}
    state = TrainState(student, teacher, moments, rng, cfg, m=meta["m"], step=meta["step"], buffers=buffers)
    h = meta["head"]
    head = HeadState(student["head.W_1"], student["head.W_2"], student["head.prototypes"],
                     T_s=h["T_s"], T_t=h["T_t"], center=tensors["head.center"],
                     center_momentum=h["center_momentum"], centering=h["centering"])
    return state, head


# ---------------------------------------------------------------------------
# full loop

@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path | None
    metrics_path: Path
    history: list[dict] = field(default_factory=list)


def _views_for(images: np.ndarray, indices: Sequence[int], epoch: int, cfg: TrainConfig,
               pool: ThreadPoolExecutor | None) -> list[ViewBatch]:
    vcfg = cfg.views

    def job(i):
        return make_views(images[i], item_rng(cfg.seed, epoch, i), vcfg, source_id=int(i))

    if pool is None:
        return [job(i) for i in indices]
    return list(pool.map(job, indices))  # map preserves order


def fit_images(images: np.ndarray, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
               state: TrainState | None = None, head: HeadState | None = None) -> TrainResult | tuple:
    """Pretrain on an in-memory ``[n, H, W, 3]`` stack.

    With ``out_dir`` the run writes ``metrics.csv``, ``resources.csv`` and
    checkpoints and returns a :class:`TrainResult`; without it the trained
    ``(state, head, history)`` is returned.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InvalidArgumentError(f"expected [n, H, W, 3] images, got {images.shape}")
    if state is None:
        state, head = init_state(cfg)
        state.buffers = pixel_stats(images)
    n = images.shape[0]
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = max(cfg.epochs * per_epoch, 1)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.csv", "w", newline="")
        resources_f = open(out / "resources.csv", "w", newline="")
        metrics = csv.writer(metrics_f, lineterminator="\n")
        resources = csv.writer(resources_f, lineterminator="\n")
        metrics.writerow(METRICS_HEADER)
        resources.writerow(RESOURCES_HEADER)
        save_checkpoint(state, head, out / "initial.sssl")

    workers = 0 if cfg.deterministic else cfg.workers
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    history: list[dict] = []
    best_loss = math.inf
    try:
        for epoch in range(1, cfg.epochs + 1):
            ad.reset_peak_memory()
            t0 = time.perf_counter()
            order = state.rng.permutation(n)
            losses, entropies = [], []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = _views_for(images, idx, epoch, cfg, pool)
                try:
                    loss, _ = train_step(batch, state, head, total)
                except NonFiniteError as exc:
                    if out is not None:
                        _dump_diagnostic(out, state, str(exc))
                    raise
                losses.append(loss)
                entropies.append(state.last_teacher_entropy)
            ms = (time.perf_counter() - t0) * 1000.0
            row = {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "teacher_entropy": float(np.mean(entropies)),
                "momentum": state.m,
                "lr": lr_schedule(state.step - 1, total, cfg.lr, cfg.warmup_frac),
                "epoch_ms": ms,
                "peak_mb": ad.memory_stats()["peak_bytes"] / 2 ** 20,
            }
            history.append(row)
            log.info("epoch %d loss %.4f teacher_entropy %.3f", epoch, row["loss"], row["teacher_entropy"])
            if out is not None:
                # wall clock is not reproducible, so deterministic runs keep it out of metrics.csv
                shown_ms = 0.0 if cfg.deterministic else ms
                metrics.writerow([epoch, repr(row["loss"]), repr(row["teacher_entropy"]), repr(row["momentum"]),
                                  repr(row["lr"]), f"{shown_ms:.3f}"])
                resources.writerow([epoch, f"{ms:.3f}", f"{row['peak_mb']:.3f}"])
                metrics_f.flush()
                resources_f.flush()
                if row["loss"] < best_loss:
                    best_loss = row["loss"]
                    save_checkpoint(state, head, out / "best.sssl")
    finally:
        if pool is not None:
            pool.shutdown()
        if out is not None:
            metrics_f.close()
            resources_f.close()

    if out is None:
        return state, head, history
    final = out / "final.sssl"
    if cfg.epochs > 0:
        save_checkpoint(state, head, final)
    else:
        final = out / "initial.sssl"
    best = out / "best.sssl" if (out / "best.sssl").exists() else None
    return TrainResult(final, best, out / "metrics.csv", history)


def _dump_diagnostic(out: Path, state: TrainState, reason: str) -> None:
    info = {
        "reason": reason,
        "step": state.step,
        "param_norms": {k: float(np.linalg.norm(v.data)) for k, v in state.student.items()},
        "param_finite": {k: bool(np.all(np.isfinite(v.data))) for k, v in state.student.items()},
    }
    (out / "diagnostic.json").write_text(json.dumps(info, indent=2))


def train(cfg: TrainConfig) -> TrainResult:
    """Pretrain on the PPM dataset at ``cfg.data``; outputs go to ``cfg.out``."""
    dataset = load_dataset(cfg.data)
    images = dataset.load_images()
    return fit_images(images, cfg, cfg.out)
