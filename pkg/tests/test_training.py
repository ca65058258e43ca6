import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statespace_ssl.augment import item_rng, make_views
from statespace_ssl.autodiff import Tensor
from statespace_ssl.errors import ConfigError, CorruptCheckpointError, InvalidArgumentError, NonFiniteError
from statespace_ssl.training import (TrainConfig, adamw_step, decode_checkpoint, ema_update, encode_checkpoint,
                                     fit_images, format_config, init_state, load_checkpoint, lr_schedule,
                                     momentum_schedule, parse_config, save_checkpoint, train_step)

TINY = dict(epochs=2, batch_size=3, lr=1e-3, prototypes=8, head_hidden=8, head_out=8, patch_size=8,
            model_dim=8, state_dim=8, depth=1, global_size=16, local_size=8, n_local=2, deterministic=True)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def tiny_images(n=6, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 16, 16, 3))


def batch_for(cfg, images, epoch=1):
    vcfg = cfg.views
    return [make_views(img, item_rng(cfg.seed, epoch, i), vcfg) for i, img in enumerate(images)]


# -- EMA and schedules -------------------------------------------------------------

def test_ema_extremes_and_midpoint():
    s = {"w": np.array([2.0, 4.0])}
    t = {"w": np.array([0.0, 0.0])}
    ema_update(t, s, 1.0)
    np.testing.assert_array_equal(t["w"], [0.0, 0.0])
    ema_update(t, s, 0.5)
    np.testing.assert_array_equal(t["w"], [1.0, 2.0])
    ema_update(t, s, 0.0)
    np.testing.assert_array_equal(t["w"], [2.0, 4.0])


def test_ema_rejects_mismatch():
    with pytest.raises(InvalidArgumentError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)
    with pytest.raises(InvalidArgumentError):
        ema_update({"w": np.zeros(2)}, {"v": np.zeros(2)}, 0.5)
    with pytest.raises(InvalidArgumentError):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(2)}, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(-100, 100), st.floats(-100, 100))
def test_ema_stays_between_endpoints(m, a, b):
    t = {"w": np.array([a])}
    ema_update(t, {"w": np.array([b])}, m)
    lo, hi = min(a, b), max(a, b)
    assert lo - 1e-12 <= t["w"][0] <= hi + 1e-12


def test_momentum_schedule_endpoints():
    assert momentum_schedule(0, 100, 0.996, 1.0) == pytest.approx(0.996)
    assert momentum_schedule(100, 100, 0.996, 1.0) == pytest.approx(1.0)
    assert momentum_schedule(50, 100, 0.996, 1.0) == pytest.approx(0.998)
    vals = [momentum_schedule(k, 100, 0.9, 1.0) for k in range(101)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_lr_schedule_warmup_then_cosine():
    lrs = [lr_schedule(k, 100, 1.0, 0.1) for k in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert lrs[10] == pytest.approx(1.0)
    assert lrs[55] == pytest.approx(0.5)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lr_schedule(100, 100, 1.0, 0.1) == pytest.approx(0.0)


# -- optimiser -------------------------------------------------------------------

def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adamw_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    p = {"w": Tensor(p0.copy())}
    moments = {"w": (np.zeros((3, 2)), np.zeros((3, 2)))}
    for t, g in enumerate(grads, 1):
        adamw_step(p, {"w": g}, moments, 0.01, weight_decay=0.04, t=t)
    np.testing.assert_allclose(p["w"].data, reference_adamw(p0, grads, 0.01, 0.9, 0.999, 1e-8, 0.04),
                               rtol=1e-13)


def test_adamw_first_step_is_signed_lr():
    p = {"w": Tensor(np.zeros(3))}
    moments = {"w": (np.zeros(3), np.zeros(3))}
    adamw_step(p, {"w": np.array([0.3, -5.0, 2e-3])}, moments, 0.1, t=1)
    np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-5)


def test_adamw_decay_only_without_grad():
    p = {"w": Tensor(np.full(2, 10.0))}
    adamw_step(p, {"w": None}, {"w": (np.zeros(2), np.zeros(2))}, 0.1, weight_decay=0.5)
    np.testing.assert_allclose(p["w"].data, 9.5)


def test_adamw_rejects_non_finite_gradient():
    p = {"w": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteError):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, {"w": (np.zeros(2), np.zeros(2))}, 0.1)


# -- training step ---------------------------------------------------------------

def test_train_step_updates_student_and_teacher():
    cfg = tiny()
    state, head = init_state(cfg, dtype=np.float64)
    before_s = {k: v.data.copy() for k, v in state.student.items()}
    before_t = {k: v.data.copy() for k, v in state.teacher.items()}
    loss, state = train_step(batch_for(cfg, tiny_images(3)), state, head, total_steps=10)
    assert np.isfinite(loss) and state.step == 1
    assert any(not np.array_equal(before_s[k], v.data) for k, v in state.student.items())
    # teacher moves by (1 - m) of the way towards the updated student
    m = state.m
    for k, t in state.teacher.items():
        np.testing.assert_allclose(t.data, m * before_t[k] + (1 - m) * state.student[k].data, atol=1e-12)


def test_teacher_never_receives_gradients():
    cfg = tiny()
    state, head = init_state(cfg)
    train_step(batch_for(cfg, tiny_images(3)), state, head, total_steps=5)
    assert all(t.grad is None and not t.requires_grad for t in state.teacher.values())
    assert all(s.grad is not None for s in state.student.values())


@pytest.mark.parametrize("views", [1, 2])
def test_loss_bounded_by_floor(views):
    cfg = tiny(teacher_views=views)
    state, head = init_state(cfg, dtype=np.float64)
    loss, _ = train_step(batch_for(cfg, tiny_images(3)), state, head, total_steps=5)
    assert 0.0 < loss < -np.log(1e-12)


def test_centre_moves_towards_teacher_logits():
    cfg = tiny()
    state, head = init_state(cfg, dtype=np.float64)
    train_step(batch_for(cfg, tiny_images(3)), state, head, total_steps=5)
    assert np.any(head.center != 0) and np.all(np.abs(head.center) <= 0.1 + 1e-12)


# -- checkpoints -----------------------------------------------------------------

def trained_state(tmp_path, **kw):
    cfg = tiny(**kw)
    result = fit_images(tiny_images(), cfg, tmp_path / "run")
    return cfg, result


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny()
    state, head = init_state(cfg)
    train_step(batch_for(cfg, tiny_images(3)), state, head, total_steps=5)
    save_checkpoint(state, head, tmp_path / "a.sssl")
    s2, h2 = load_checkpoint(tmp_path / "a.sssl", expected_config=cfg)
    assert s2.step == state.step and s2.m == state.m and s2.config == cfg
    for k in state.student:
        np.testing.assert_array_equal(s2.student[k].data, state.student[k].data)
        np.testing.assert_array_equal(s2.teacher[k].data, state.teacher[k].data)
        np.testing.assert_array_equal(s2.moments[k][0], state.moments[k][0])
    np.testing.assert_array_equal(h2.center, head.center)
    assert s2.rng.uniform() == state.rng.uniform()


def test_checkpoint_codec_preserves_shapes():
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(3.5), "v": np.ones(1)}
    back = decode_checkpoint(encode_checkpoint(tensors))
    assert list(back) == ["a", "s", "v"]
    assert back["a"].shape == (2, 3) and back["s"].shape == () and back["s"] == 3.5


def test_checkpoint_corruption_detected(tmp_path):
    buf = encode_checkpoint({"a": np.ones((4, 4), np.float32)})
    flipped = bytearray(buf)
    flipped[20] ^= 0x01
    for bad, what in [(bytes(flipped), "CRC"), (buf[:-7], "CRC"), (b"XXXX" + buf[4:], "magic"),
                      (buf[:4] + b"\x02\x00\x00\x00" + buf[8:], "version"), (b"SSSL", "short")]:
        with pytest.raises(CorruptCheckpointError, match=what):
            decode_checkpoint(bad)


def test_checkpoint_config_hash_mismatch(tmp_path):
    cfg = tiny()
    state, head = init_state(cfg)
    save_checkpoint(state, head, tmp_path / "a.sssl")
    with pytest.raises(CorruptCheckpointError, match="config-hash"):
        load_checkpoint(tmp_path / "a.sssl", expected_config=tiny(model_dim=16))
    # non-architectural changes keep the hash
    load_checkpoint(tmp_path / "a.sssl", expected_config=tiny(lr=0.5, epochs=9))


# -- full runs -------------------------------------------------------------------

def test_zero_epochs_writes_initial_only(tmp_path):
    cfg, result = trained_state(tmp_path, epochs=0)
    assert result.final_checkpoint.name == "initial.sssl"
    assert (tmp_path / "run" / "metrics.csv").read_text().splitlines() == [
        "epoch,loss,teacher_entropy,momentum,lr,epoch_ms"]
    state, _ = load_checkpoint(result.final_checkpoint)
    assert state.step == 0


def test_deterministic_runs_are_byte_identical(tmp_path):
    a = fit_images(tiny_images(), tiny(), tmp_path / "a")
    b = fit_images(tiny_images(), tiny(), tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    rows = a.metrics_path.read_text().splitlines()
    assert len(rows) == 3 and rows[1].endswith(",0.000")


def test_resources_csv_has_timings(tmp_path):
    _, result = trained_state(tmp_path)
    rows = (tmp_path / "run" / "resources.csv").read_text().splitlines()
    assert rows[0] == "epoch,epoch_ms,peak_mb" and len(rows) == 3
    assert float(rows[1].split(",")[1]) > 0
    assert result.best_checkpoint is not None


def test_worker_pool_matches_serial(tmp_path):
    a = fit_images(tiny_images(), tiny(deterministic=False, workers=3), tmp_path / "a")
    b = fit_images(tiny_images(), tiny(), tmp_path / "b")
    ta = decode_checkpoint(a.final_checkpoint.read_bytes())
    tb = decode_checkpoint(b.final_checkpoint.read_bytes())
    # stored configs differ in the worker fields only
    del ta["__meta__"], tb["__meta__"]
    assert ta.keys() == tb.keys()
    for k in ta:
        np.testing.assert_array_equal(ta[k], tb[k])


def test_non_finite_loss_dumps_diagnostic(tmp_path):
    cfg = tiny()
    state, head = init_state(cfg)
    state.student["encoder.W_e"].data[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        fit_images(tiny_images(), cfg, tmp_path / "run", state=state, head=head)
    info = json.loads((tmp_path / "run" / "diagnostic.json").read_text())
    assert info["param_finite"]["encoder.W_e"] is False


# -- config files ------------------------------------------------------------------

def test_config_roundtrip():
    cfg = tiny(seed=7, bidirectional=False)
    assert parse_config(format_config(cfg)) == cfg


def test_config_comments_and_bools():
    cfg = parse_config("# header\nepochs = 3  # short\ncentering = off\n\n")
    assert cfg.epochs == 3 and cfg.centering is False


@pytest.mark.parametrize("text,match", [
    ("epochs = 3\nbogus = 1\n", ":2: unknown key"),
    ("epochs 3\n", ":1: expected"),
    ("lr = fast\n", "cannot parse"),
    ("centering = maybe\n", "boolean"),
    ("teacher_views = 3\n", "teacher_views"),
    ("m_start = 1.0\nm_end = 0.9\n", "m_start"),
    ("patch_size = 0\n", "patch_size"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)
