"""Linear probing, mixer scaling benchmark, epoch timing summaries and saliency maps."""

from __future__ import annotations

import csv
import gc
import math
import os
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import LabeledDataset, _read_token, check_image, resize_bilinear
from .autodiff import Tape, Tensor
from .encoder import EncoderConfig, EncoderParams, MambaParams, attention_reference, encode, ssm_scan
from .errors import DatasetError, FormatError, InvalidArgumentError
from .head import HeadState, entropy, project, prototype_logits
from .training import TrainState, load_checkpoint

# ---------------------------------------------------------------------------
# collapse diagnostics


def entropy_monitor(distributions: np.ndarray | Tensor) -> float:
    """Mean row entropy (nats) of a ``[B, K]`` batch of distributions."""
    p = distributions.data if isinstance(distributions, Tensor) else np.asarray(distributions, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidArgumentError("every row must be a probability vector")
    return float(entropy(p).mean())


# ---------------------------------------------------------------------------
# linear probe

def _resolve(model) -> tuple[TrainState, HeadState]:
    if isinstance(model, (str, os.PathLike)):
        return load_checkpoint(model)
    return model


def extract_features(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Pooled student embeddings for ``[n, H, W, 3]`` images (no tape)."""
    state, _ = _resolve(model)
    enc = state.student_encoder()
    frozen = EncoderParams.from_named(state.config.encoder, {k: v.detach() for k, v in enc.named().items()},
                                      enc.buffers())
    feats = []
    for start in range(0, len(images), batch_size):
        out = encode(np.asarray(images[start:start + batch_size]), state.config.encoder, frozen)
        feats.append(out.pooled.data.astype(np.float64))
    return np.concatenate(feats)


def stratified_split(labels: np.ndarray, test_frac: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = max(1, int(round(test_frac * idx.size)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train)), np.sort(np.array(test))


def fit_softmax_classifier(X: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 1000, lr: float = 0.5,
                           l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on an affine softmax classifier. Returns ``(W, b)``."""
    n, d = X.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * (X.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    return W, b


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int


def probe_features(features: np.ndarray, labels: np.ndarray, epochs: int = 1000, lr: float = 0.5,
                   seed: int = 0) -> ProbeResult:
    labels = np.asarray(labels, dtype=int)
    n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if n_classes < 2 or np.any(counts == 0):
        raise DatasetError("linear probe needs >= 2 classes, each with at least one sample")
    tr, te = stratified_split(labels, 0.2, seed)
    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Xtr = (features[tr] - mu) / sd
    Xte = (features[te] - mu) / sd
    W, b = fit_softmax_classifier(Xtr, labels[tr], n_classes, epochs, lr)
    acc = float(np.mean(np.argmax(Xte @ W + b, axis=1) == labels[te]))
    tr_acc = float(np.mean(np.argmax(Xtr @ W + b, axis=1) == labels[tr]))
    return ProbeResult(acc, tr_acc, len(tr), len(te))


def linear_probe(model, dataset: LabeledDataset, epochs: int = 1000, lr: float = 0.5, seed: int = 0,
                 images: np.ndarray | None = None) -> float:
    """Held-out accuracy of an affine classifier on frozen pooled embeddings."""
    labels = dataset.labels
    if len(dataset.class_names) < 2:
        raise DatasetError("linear probe needs >= 2 classes")
    if np.any(np.bincount(labels, minlength=len(dataset.class_names)) == 0):
        raise DatasetError("a class has zero samples")
    if images is None:
        images = dataset.load_images()
    feats = extract_features(model, images)
    return probe_features(feats, labels, epochs, lr, seed).accuracy


# ---------------------------------------------------------------------------
# scaling benchmark

@dataclass
class ScalingRow:
    mixer: str
    N: int
    mean_ms: float
    std_ms: float
    median_ms: float
    repeats: int


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    exponent: dict[str, float] = field(default_factory=dict)
    r2: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def times(self, mixer: str, stat: str = "median_ms") -> dict[int, float]:
        # fits use the median: one GC pause should not bend the exponent
        return {r.N: getattr(r, stat) for r in self.rows if r.mixer == mixer}

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mixer", "N", "mean_ms", "std_ms", "median_ms", "repeats"])
            for r in self.rows:
                w.writerow([r.mixer, r.N, f"{r.mean_ms:.6f}", f"{r.std_ms:.6f}", f"{r.median_ms:.6f}", r.repeats])
            for mixer in self.exponent:
                fh.write(f"# mixer={mixer} exponent={self.exponent[mixer]:.4f} r2={self.r2[mixer]:.4f}\n")
            for msg in self.warnings:
                fh.write(f"# warning: {msg}\n")


def loglog_fit(n: Sequence[float], t: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log(t) on log(n) and the fit's R²."""
    x = np.log(np.asarray(n, dtype=np.float64))
    y = np.log(np.asarray(t, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _time_interleaved(calls: dict, repeats: int, warmup: int, rounds: int = 5) -> dict[object, list[float]]:
    """Time every call ``repeats`` times, split into short blocks over several rounds.

    Within a block a call runs back to back with warm caches; rounds alternate
    direction over the calls, so a slow spell on a shared machine is spread
    over every length instead of bending the curve at a few of them.
    """
    rounds = max(1, min(rounds, repeats))
    blocks = [repeats // rounds + (i < repeats % rounds) for i in range(rounds)]
    keys = list(calls)
    out = {key: [] for key in keys}
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for r, block in enumerate(blocks):
            for key in (keys if r % 2 == 0 else keys[::-1]):
                fn = calls[key]
                for _ in range(warmup):
                    fn()
                for _ in range(block):
                    t0 = time.perf_counter()
                    fn()
                    out[key].append((time.perf_counter() - t0) * 1000.0)
    finally:
        if gc_was_on:
            gc.enable()
    return out


def _timer_resolution_ms() -> float:
    info = time.get_clock_info("perf_counter")
    return info.resolution * 1000.0


def scaling_benchmark(seq_lengths: Sequence[int], d: int = 64, d_s: int = 64, repeats: int = 10,
                      warmup: int = 2, seed: int = 0) -> ScalingReport:
    """Time forward passes of the gated scan and single-head attention at each length.

    Runs single-threaded (BLAS pinned to one thread) with float64 tensors.
    """
    lengths = sorted({int(n) for n in seq_lengths})
    if len(lengths) < 4 or lengths[-1] < 8 * lengths[0]:
        raise InvalidArgumentError("need >= 4 distinct lengths spanning at least an 8x range")
    if repeats < 5:
        raise InvalidArgumentError("repeats must be >= 5")
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    params = MambaParams.init(d, d_s, rng, dtype=np.float64)
    W_q, W_k, W_v = (Tensor(rng.normal(0, 1 / math.sqrt(d), (d, d))) for _ in range(3))
    report = ScalingReport(rows=[])
    calls = {}
    for n in lengths:
        u = Tensor(rng.normal(size=(n, d)))
        calls[("ssm", n)] = lambda u=u: ssm_scan(u, params, "forward")
        calls[("attention", n)] = lambda u=u: attention_reference(u, W_q, W_k, W_v)
    with threadpool_limits(limits=1):
        timings = _time_interleaved(calls, repeats, warmup)
    for (mixer, n), ts in timings.items():
        report.rows.append(ScalingRow(mixer, n, statistics.fmean(ts), statistics.stdev(ts),
                                      statistics.median(ts), repeats))
    fastest = min(r.mean_ms for r in report.rows)
    if _timer_resolution_ms() > 0.01 * fastest:
        report.warnings.append("unreliable timing: timer resolution exceeds 1% of the fastest measurement")
    report.rows.sort(key=lambda r: (r.mixer != "ssm", r.N))
    for mixer in ("ssm", "attention"):
        times = report.times(mixer)
        report.exponent[mixer], report.r2[mixer] = loglog_fit(list(times), list(times.values()))
    return report


# ---------------------------------------------------------------------------
# epoch timing

@dataclass
class TimingSummary:
    run: str
    epochs: int
    mean_ms: float
    std_ms: float
    peak_mb: float | None


def read_metrics(path: str | os.PathLike) -> list[dict]:
    """Parse a metrics CSV; malformed rows raise :class:`FormatError` with the line number."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "epoch_ms" not in header or "epoch" not in header:
            raise FormatError(f"{path}: missing header with epoch/epoch_ms", offset=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}: expected {len(header)} fields, got {len(rec)}", offset=lineno)
            try:
                rows.append({k: float(v) for k, v in zip(header, rec)})
            except ValueError:
                raise FormatError(f"{path}: non-numeric field", offset=lineno) from None
    return rows


def epoch_timing_report(paths: Sequence[str | os.PathLike], plot_csv: str | os.PathLike | None = None,
                        labels: Sequence[str] | None = None) -> tuple[list[TimingSummary], str]:
    """Per-run mean/std epoch time (and peak tensor memory when ``resources.csv`` sits alongside)."""
    labels = list(labels) if labels is not None else [str(p) for p in paths]
    summaries = []
    plot_rows = []
    for label, path in zip(labels, paths):
        rows = read_metrics(path)
        ms = [r["epoch_ms"] for r in rows]
        peak = None
        res = Path(path).with_name("resources.csv")
        if res.exists():
            res_rows = read_metrics(res)
            if res_rows and "peak_mb" in res_rows[0]:
                peak = max(r["peak_mb"] for r in res_rows)
                if not any(ms):
                    # deterministic runs keep wall clock only in resources.csv
                    ms = [r["epoch_ms"] for r in res_rows]
        mean = statistics.fmean(ms) if ms else float("nan")
        std = statistics.stdev(ms) if len(ms) > 1 else 0.0
        summaries.append(TimingSummary(label, len(ms), mean, std, peak))
        plot_rows.extend((label, i + 1, v) for i, v in enumerate(ms))
    lines = [f"{'run':<40} {'epochs':>6} {'mean_ms':>12} {'std_ms':>10} {'peak_mb':>9}"]
    for s in summaries:
        peak = f"{s.peak_mb:9.2f}" if s.peak_mb is not None else f"{'-':>9}"
        lines.append(f"{s.run:<40} {s.epochs:>6} {s.mean_ms:12.2f} {s.std_ms:10.2f} {peak}")
    if plot_csv is not None:
        with open(plot_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "epoch", "epoch_ms"])
            w.writerows(plot_rows)
    return summaries, "\n".join(lines)


# ---------------------------------------------------------------------------
# saliency

@dataclass
class SaliencyMap:
    values: np.ndarray            # [H, W] in [0, 1]
    token_relevance: np.ndarray   # [gh, gw], before normalisation

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def argmax_token(self) -> tuple[int, int]:
        r, c = np.unravel_index(np.argmax(self.token_relevance), self.token_relevance.shape)
        return int(r), int(c)


def token_relevance(model, image: np.ndarray, target: str = "norm") -> np.ndarray:
    """``|d target / d Z * Z|`` summed over channels, on the patch grid."""
    state, head = _resolve(model)
    cfg = state.config.encoder
    img = check_image(image)
    p = cfg.patch_size
    if img.shape[0] % p or img.shape[1] % p:
        raise InvalidArgumentError(f"image {img.shape[:2]} not divisible by patch size {p}")
    enc = state.student_encoder()
    with Tape() as tape:
        out = encode(img, cfg, enc)
        Z = out.Z.retain_grad()
        if target == "norm":
            value = ad.sqrt(ad.sum(ad.mul(out.pooled, out.pooled)))
        elif target.startswith("proto:"):
            i = int(target.split(":", 1)[1])
            if not 0 <= i < head.K:
                raise InvalidArgumentError(f"prototype index {i} out of range [0, {head.K})")
            s_head = head.with_weights(state.student)
            value = prototype_logits(project(out.pooled, s_head), s_head)[i]
        else:
            raise InvalidArgumentError(f"unknown saliency target {target!r}")
    tape.backward(value)
    for prm in state.student.values():
        prm.grad = None
    rel = np.abs(Z.grad * Z.data).sum(axis=-1)
    return rel.reshape(img.shape[0] // p, img.shape[1] // p).astype(np.float64)


def saliency_map(model, image: np.ndarray, target: str = "norm") -> SaliencyMap:
    """Token relevance upsampled bilinearly to the image and min-max normalised."""
    img = check_image(image)
    rel = token_relevance(model, img, target)
    up = resize_bilinear(rel[..., None], img.shape[0], img.shape[1])[..., 0]
    lo, hi = up.min(), up.max()
    values = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    return SaliencyMap(values, rel)


def write_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    """Binary P5 greyscale, maxval 255."""
    v = np.asarray(values, dtype=np.float64)
    q = np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'P5'", offset=0)
    pos = 2
    vals = []
    for _ in range(3):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric header field {tok!r}", offset=start)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=start)
    pos += 1
    data = buf[pos:pos + w * h]
    if len(data) < w * h:
        raise FormatError("truncated PGM payload", offset=pos + len(data))
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_relevance_csv(path: str | os.PathLike, relevance: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "relevance"])
        for (r, c), v in np.ndenumerate(relevance):
            w.writerow([r, c, repr(float(v))])
