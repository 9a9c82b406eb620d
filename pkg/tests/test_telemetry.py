import io
import json
from types import SimpleNamespace

import numpy as np
import pytest

from gradlibra.data import SampleBatch
from gradlibra.errors import DimensionError, UnsupportedArchError
from gradlibra.losses import LossConfig, LossKind, compute_loss
from gradlibra.model import Model, ModelSpec, OptimSpec, train
from gradlibra.telemetry import (
    GradientLedger,
    LedgerMode,
    TelemetryRecorder,
    coefficient_of_variation,
    normalized_norms,
    weight_norms,
)

P2 = np.array([[0.6], [0.3]])
Y2 = np.array([[1.0], [0.0]])


def test_two_sample_example():
    led = GradientLedger(1, LedgerMode.RAW_CE)
    led.accumulate(P2, Y2)
    # |(0.6 - 1)| / 2 and 0.3 / 2
    assert led.pos_sum[0] == pytest.approx(0.2, abs=1e-15)
    assert led.neg_sum[0] == pytest.approx(0.15, abs=1e-15)
    assert led.ratio()[0] == pytest.approx(4 / 3, rel=1e-14)


def test_no_positives_adds_nothing_positive():
    led = GradientLedger(2, LedgerMode.RAW_CE)
    led.accumulate(np.array([[0.4, 0.2], [0.3, 0.9]]), np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert led.pos_sum[0] == 0.0 and led.ratio()[0] == 0.0
    assert led.neg_sum[0] == pytest.approx(0.35)


def test_identical_batches_double():
    a = GradientLedger(1, LedgerMode.RAW_CE)
    a.accumulate(P2, Y2)
    once = (a.pos_sum.copy(), a.neg_sum.copy())
    a.accumulate(P2, Y2)
    assert a.pos_sum[0] == 2 * once[0][0] and a.neg_sum[0] == 2 * once[1][0]
    assert a.iteration == 2


def test_balanced_ratio_is_one():
    led = GradientLedger(1, LedgerMode.RAW_CE)
    led.accumulate(np.array([[0.75], [0.25]]), Y2)
    assert led.ratio()[0] == 1.0


def test_no_negatives_gives_infinite_sentinel():
    led = GradientLedger(2, LedgerMode.RAW_CE)
    led.accumulate(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    r = led.ratio()
    assert np.isinf(r[0]) and r[1] == 0.0
    snap = led.snapshot()
    assert snap["r"][0] is None and snap["r_inf"] == [True, False]
    json.dumps(snap)  # must serialize without NaN/Infinity tokens
    assert "Infinity" not in json.dumps(snap)


def test_active_mode_needs_gradients():
    led = GradientLedger(1, LedgerMode.ACTIVE_LOSS)
    with pytest.raises(DimensionError):
        led.accumulate(P2, Y2)
    with pytest.raises(DimensionError):
        GradientLedger(2).accumulate(P2, Y2, P2)


def test_active_mode_equals_raw_mode_under_ce():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(16, 3))
    y = np.eye(3)[rng.integers(0, 3, 16)]
    out = compute_loss(z, y, LossConfig(kind=LossKind.CROSS_ENTROPY))
    raw, act = GradientLedger(3, LedgerMode.RAW_CE), GradientLedger(3, LedgerMode.ACTIVE_LOSS)
    raw.accumulate(out.probs, y)
    act.accumulate(out.probs, y, out.grad_logits * 16)
    np.testing.assert_allclose(act.pos_sum, raw.pos_sum, rtol=1e-13)
    np.testing.assert_allclose(act.neg_sum, raw.neg_sum, rtol=1e-13)


def test_sums_nonnegative_and_nondecreasing():
    rng = np.random.default_rng(1)
    led = GradientLedger(4, LedgerMode.ACTIVE_LOSS)
    prev = (led.pos_sum.copy(), led.neg_sum.copy())
    for _ in range(20):
        p = rng.uniform(size=(8, 4))
        y = (rng.uniform(size=(8, 4)) < 0.3).astype(float)
        led.accumulate(p, y, rng.normal(size=(8, 4)))
        assert (led.pos_sum >= prev[0]).all() and (led.neg_sum >= prev[1]).all()
        prev = (led.pos_sum.copy(), led.neg_sum.copy())


def test_norm_examples():
    np.testing.assert_allclose(normalized_norms(np.diag([2.0, 1.0, 1.0])).values, [1.5, 0.75, 0.75],
                               rtol=1e-15)
    equal = normalized_norms(np.tile([[3.0, -4.0]], (5, 1)))
    np.testing.assert_array_equal(equal.values, np.ones(5))
    assert not equal.degenerate


def test_zero_matrix_is_flagged():
    snap = normalized_norms(np.zeros((4, 3)))
    assert snap.degenerate and snap.values.tolist() == [1.0] * 4


def test_normalized_norms_have_unit_mean():
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = normalized_norms(rng.normal(size=(10, 7)) * rng.uniform(0, 5, size=(10, 1))).values
        assert abs(v.mean() - 1.0) <= 1e-12


def test_coefficient_of_variation():
    assert coefficient_of_variation([1.0, 1.0, 1.0]) == 0.0
    assert coefficient_of_variation([1.5, 0.75, 0.75]) == pytest.approx(np.std([2, 1, 1]) / (4 / 3))


def test_unsupported_arch():
    fake = SimpleNamespace(spec=SimpleNamespace(arch="conv"))
    with pytest.raises(UnsupportedArchError):
        weight_norms(fake)


def _toy():
    rng = np.random.default_rng(3)
    y = np.zeros((30, 2))
    y[:12, 0] = 1
    y[12:18, 1] = 1
    return SampleBatch(rng.normal(size=(30, 3)), y, np.arange(30))


def _record(cfg, optim=None):
    buf = io.StringIO()
    rec = TelemetryRecorder(2, stream=buf)
    optim = optim or OptimSpec(epochs=2, batch_size=8, lr=0.05, warmup_iters=2, lr_decay_epochs=[1])
    train(_toy(), ModelSpec(3, 2, prior_prob=0.1), optim, cfg, hooks=[rec], seed=1)
    return rec, [json.loads(line) for line in buf.getvalue().splitlines()]


def test_raw_mode_ignores_supplied_gradients():
    rng = np.random.default_rng(4)
    batches = [(rng.uniform(size=(6, 2)), np.eye(2)[rng.integers(0, 2, 6)]) for _ in range(5)]
    a, b = GradientLedger(2, LedgerMode.RAW_CE), GradientLedger(2, LedgerMode.RAW_CE)
    for p, y in batches:
        a.accumulate(p, y, rng.normal(size=p.shape))
        b.accumulate(p, y, rng.normal(size=p.shape) * 100)
    np.testing.assert_array_equal(a.pos_sum, b.pos_sum)
    np.testing.assert_array_equal(a.neg_sum, b.neg_sum)


def test_jsonl_records():
    rec, lines = _record(LossConfig())
    its = [r for r in lines if r["type"] == "iteration"]
    eps = [r for r in lines if r["type"] == "epoch"]
    assert len(its) == 2 * 4 and len(eps) == 2
    assert [r["iteration"] for r in its] == list(range(1, 9))
    first = its[0]
    assert set(first) == {"type", "iteration", "epoch", "lr", "loss", "raw-ce", "active-loss"}
    assert set(first["raw-ce"]) == {"pos_sum", "neg_sum", "r", "r_inf"}
    assert its[-1]["active-loss"]["pos_sum"] == rec.ledgers[LedgerMode.ACTIVE_LOSS].pos_sum.tolist()
    assert abs(np.mean(eps[-1]["weight_norms"]) - 1) <= 1e-12
    assert eps[-1]["degenerate"] is False


def test_recorder_feeds_loss_gradients_in_active_mode():
    rec, _ = _record(LossConfig(kind=LossKind.CROSS_ENTROPY))
    raw = rec.ledgers[LedgerMode.RAW_CE]
    act = rec.ledgers[LedgerMode.ACTIVE_LOSS]
    np.testing.assert_allclose(act.pos_sum, raw.pos_sum, rtol=1e-12)
    rec_gl, _ = _record(LossConfig(kind=LossKind.GRAD_LIBRA))
    assert not np.allclose(rec_gl.ledgers[LedgerMode.ACTIVE_LOSS].pos_sum,
                           rec_gl.ledgers[LedgerMode.RAW_CE].pos_sum)


def test_weight_norms_of_model():
    m = Model(ModelSpec(3, 3))
    m.layout.view(m.params, "W")[...] = np.diag([2.0, 1.0, 1.0])
    np.testing.assert_allclose(weight_norms(m).values, [1.5, 0.75, 0.75])
