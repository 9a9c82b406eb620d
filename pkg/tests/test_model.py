import numpy as np
import pytest
from oracles import central_difference, rel_error

from gradlibra.data import SampleBatch
from gradlibra.errors import ConfigError, DataError, DimensionError, NumericError
from gradlibra.losses import LossConfig, LossKind, compute_loss, grad_libra_forward, hardness, sigmoid
from gradlibra.model import (
    Arch,
    Model,
    ModelSpec,
    OptimSpec,
    backward_step,
    init_state,
    learning_rate,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    train,
)


def tiny_batch(seed=0, n=4, d=3, c=2):
    rng = np.random.default_rng(seed)
    y = np.zeros((n, c))
    y[np.arange(n), rng.integers(0, c, n)] = 1.0
    y[0] = 0.0  # one background row
    return SampleBatch(rng.normal(size=(n, d)), y, np.arange(n))


SPECS = [
    ModelSpec(3, 2, Arch.LINEAR, init_seed=1),
    ModelSpec(3, 2, Arch.MLP1, hidden_dim=5, init_seed=2),
]
DIFFERENTIABLE = [
    LossConfig(kind=LossKind.CROSS_ENTROPY),
    LossConfig(kind=LossKind.FOCAL),
    LossConfig(kind=LossKind.FOCAL_STAR),
    LossConfig(kind=LossKind.GRAD_LIBRA, alpha_pos=0.8, alpha_neg=0.5, differentiate_weight=True),
]


def test_zero_model_gives_zero_logits():
    spec = ModelSpec(3, 4)
    m = Model(spec, np.zeros(3 * 4 + 4))
    np.testing.assert_array_equal(m.forward(np.ones((5, 3))), np.zeros((5, 4)))


def test_identity_weights_pass_features_through():
    m = Model(ModelSpec(3, 3))
    m.layout.view(m.params, "W")[...] = np.eye(3)
    m.layout.view(m.params, "b")[...] = 0.0
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(m.forward(x), x)


def test_output_shape_and_dim_check():
    m = Model(SPECS[1])
    assert m.forward(np.zeros((7, 3))).shape == (7, 2)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((7, 4)))


def test_prior_prob_bias_init():
    m = Model(ModelSpec(3, 4, prior_prob=0.01))
    np.testing.assert_allclose(sigmoid(m.forward(np.zeros((1, 3)))), 0.01, rtol=1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=["linear", "mlp1"])
@pytest.mark.parametrize("cfg", DIFFERENTIABLE, ids=lambda c: c.kind.value)
def test_parameter_gradient_matches_finite_difference(spec, cfg):
    batch = tiny_batch()
    m = Model(spec)
    _, grad = loss_and_grad(m, m.params, batch, cfg)
    f = lambda p: compute_loss(m.forward(batch.features, p), batch.labels, cfg).total  # noqa: E731
    assert rel_error(grad, central_difference(f, m.params.copy())) <= 1e-6


@pytest.mark.parametrize("spec", SPECS, ids=["linear", "mlp1"])
def test_detached_weights_gradient_is_frozen_weight_derivative(spec):
    cfg = LossConfig(kind=LossKind.GRAD_LIBRA, alpha_pos=0.8, alpha_neg=0.6)
    batch = tiny_batch(3)
    m = Model(spec)
    _, grad = loss_and_grad(m, m.params, batch, cfg)
    y = batch.labels
    hw = hardness(sigmoid(m.forward(batch.features)), y, 0.8, 0.6)
    w = hw.G
    f = lambda p: grad_libra_forward(m.forward(batch.features, p), y, cfg, weights=w).total  # noqa: E731
    assert rel_error(grad, central_difference(f, m.params.copy())) <= 1e-6


def test_vanilla_sgd_step_is_exact():
    spec = ModelSpec(3, 2)
    batch = tiny_batch()
    optim = OptimSpec(lr=0.1, momentum=0.0, weight_decay=0.0, warmup_iters=0)
    cfg = LossConfig(kind=LossKind.CROSS_ENTROPY)
    state = init_state(spec)
    m = Model(spec)
    _, grad = loss_and_grad(m, state.params, batch, cfg)
    new, _ = backward_step(m, state, batch, cfg, optim)
    np.testing.assert_array_equal(new.params, state.params - 0.1 * grad)
    assert new.iteration == 1 and state.iteration == 0


def test_momentum_and_decay_skip_biases():
    spec = ModelSpec(3, 2)
    batch = tiny_batch()
    optim = OptimSpec(lr=0.1, momentum=0.9, weight_decay=0.01, warmup_iters=0)
    cfg = LossConfig(kind=LossKind.CROSS_ENTROPY)
    m = Model(spec)
    s0 = init_state(spec)
    s0.momentum_buffers[:] = 0.5
    _, grad = loss_and_grad(m, s0.params, batch, cfg)
    s1, _ = backward_step(m, s0, batch, cfg, optim)
    mask = np.r_[np.ones(6), np.zeros(2)]
    v = 0.9 * 0.5 + grad + 0.01 * mask * s0.params
    np.testing.assert_allclose(s1.momentum_buffers, v, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s1.params, s0.params - 0.1 * v, rtol=0, atol=1e-15)


def test_step_schedule():
    o = OptimSpec()
    it = o.warmup_iters + 1
    assert learning_rate(o, it, 0) == pytest.approx(0.002, rel=1e-15)
    assert learning_rate(o, it, 7) == pytest.approx(0.002, rel=1e-15)
    assert learning_rate(o, it, 8) == pytest.approx(0.0002, rel=1e-12)
    assert learning_rate(o, it, 11) == pytest.approx(0.00002, rel=1e-12)


def test_warmup_boundaries():
    o = OptimSpec()
    assert learning_rate(o, 0, 0) == pytest.approx(0.002 * 0.001, rel=1e-15)
    assert learning_rate(o, 250, 0) == pytest.approx(0.002 * (0.001 + 0.999 * 0.5), rel=1e-15)
    assert learning_rate(o, 500, 0) == 0.002
    assert learning_rate(o, 499, 0) < 0.002


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"batch_size": 0}, {"momentum": 1.0}, {"epochs": -1},
                                {"warmup_ratio": 1.5},
                                {"epochs": 10, "lr_decay_epochs": [8, 11]}, {"lr_decay_epochs": [8, 8]}])
def test_bad_optim_specs(kw):
    with pytest.raises(ConfigError):
        OptimSpec(**kw)


def _toy(n=40):
    rng = np.random.default_rng(5)
    y = np.zeros((n, 2))
    y[: n // 2, 0] = 1
    y[n // 2 : 3 * n // 4, 1] = 1
    return SampleBatch(rng.normal(size=(n, 3)) + y @ np.array([[2.0, 0, 0], [0, 2.0, 0]]), y, np.arange(n))


def test_zero_epochs_returns_initial_params():
    spec = ModelSpec(3, 2, init_seed=4)
    model, state = train(_toy(), spec, OptimSpec(epochs=0), LossConfig())
    np.testing.assert_array_equal(model.params, init_state(spec).params)
    assert state.iteration == 0


def test_training_is_deterministic():
    spec = ModelSpec(3, 2, Arch.MLP1, hidden_dim=4)
    optim = OptimSpec(epochs=3, batch_size=8, warmup_iters=5, lr=0.05, lr_decay_epochs=[1, 2])
    a = train(_toy(), spec, optim, LossConfig(), seed=9)[1]
    b = train(_toy(), spec, optim, LossConfig(), seed=9)[1]
    np.testing.assert_array_equal(a.params, b.params)
    assert a.iteration == b.iteration == 3 * 5


def test_resume_matches_uninterrupted_run():
    spec = ModelSpec(3, 2)
    full = OptimSpec(epochs=4, batch_size=8, warmup_iters=3, lr=0.05, lr_decay_epochs=[1, 3])
    ref = train(_toy(), spec, full, LossConfig(), seed=1)[1]
    half = train(_toy(), spec, OptimSpec(**{**full.to_dict(), "epochs": 2, "lr_decay_epochs": [1]}), LossConfig(), seed=1)[1]
    resumed = train(_toy(), spec, full, LossConfig(), seed=1, state=half)[1]
    np.testing.assert_array_equal(ref.params, resumed.params)


def test_empty_dataset_rejected():
    empty = SampleBatch(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    with pytest.raises(DataError):
        train(empty, ModelSpec(3, 2), OptimSpec(epochs=1, lr_decay_epochs=[]), LossConfig())


def test_nonfinite_loss_raises_with_snapshot():
    spec = ModelSpec(3, 2)
    batch = tiny_batch()
    batch.features[1, 0] = np.nan
    m = Model(spec)
    with pytest.raises(NumericError) as exc:
        backward_step(m, init_state(spec), batch, LossConfig(), OptimSpec(epochs=1, lr_decay_epochs=[]))
    snap = exc.value.snapshot
    assert snap["iteration"] == 0 and snap["sample_ids"] == [0, 1, 2, 3]


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec(3, 2, Arch.MLP1, hidden_dim=3, prior_prob=0.01)
    optim = OptimSpec(epochs=1, batch_size=8, lr=0.05, lr_decay_epochs=[])
    cfg = LossConfig(alpha_pos=0.7, alpha_neg=0.9)
    _, state = train(_toy(), spec, optim, cfg, seed=2)
    save_checkpoint(tmp_path / "c.json", spec, optim, cfg, state)
    s2, o2, c2, st2 = load_checkpoint(tmp_path / "c.json")
    assert s2 == spec and o2 == optim and c2 == cfg
    np.testing.assert_array_equal(st2.params, state.params)
    np.testing.assert_array_equal(st2.momentum_buffers, state.momentum_buffers)
    assert (st2.iteration, st2.epoch, st2.seed) == (state.iteration, state.epoch, state.seed)


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(DataError):
        load_checkpoint(p)
