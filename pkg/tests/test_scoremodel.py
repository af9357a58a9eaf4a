"""Tests for the convolutional denoiser, its gradients, training and checkpoints.

Verifies that:
1. Analytic parameter gradients match central differences, and a broken activation
   derivative is caught by the gradient check.
2. The network is translation-equivariant away from the lattice border.
3. Masked-out input values never reach the loss or the gradients; a zero net outputs
   zero and still passes the gradient check.
4. The Gaussian oracle attains the analytic minimum of the denoising loss.
5. Training is deterministic, descends on a frozen batch and checks its inputs.
6. Checkpoints round-trip parameters and optimizer moments and reject corrupt files.
"""

from __future__ import annotations

import struct

import numpy as np
import pytest
from scipy.special import expit

from tetdiff import scoremodel
from tetdiff.diffusion import denoising_loss, forward_sample, make_schedule, masked_mse
from tetdiff.errors import DimensionError, FormatError, ParameterError, StateError
from tetdiff.models import NetArch, TrainConfig
from tetdiff.optim import Adam
from tetdiff.scoremodel import (
    DenoiserNet,
    GaussianOracle,
    ScoreModel,
    grad_check,
    load_checkpoint,
    net_backward,
    net_forward,
    oracle_gaussian_eps,
    param_specs,
    save_checkpoint,
    time_embedding,
    train,
)
from tetdiff.tetgrid import GridState, build_bcc_grid, embed_to_cubic

# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


def _make_arch(**overrides) -> NetArch:
    base = dict(widths=(4,), kernel=3, time_dim=4, T=50, lattice=5)
    return NetArch(**{**base, **overrides})


def _make_dataset(grid, count: int = 2, seed: int = 0) -> list[GridState]:
    rng = np.random.default_rng(seed)
    return [
        GridState(
            rng.uniform(-grid.delta_max, grid.delta_max, (grid.num_vertices, 3)),
            rng.choice([-1.0, 1.0], grid.num_vertices),
            normalized=True,
        )
        for _ in range(count)
    ]


class _ScaledModel(ScoreModel):
    def __init__(self, inner: ScoreModel, factor: float):
        self.inner = inner
        self.factor = factor

    def eval(self, x_t, t, mask=None):
        return self.factor * self.inner.eval(x_t, t, mask)


def _make_train_cfg(**overrides) -> TrainConfig:
    base = dict(steps=6, batch_size=2, learning_rate=1e-2, widths=(4,), time_dim=4, log_every=2)
    return TrainConfig(**{**base, **overrides})


@pytest.fixture()
def grid():
    return build_bcc_grid(2)


@pytest.fixture()
def sched():
    return make_schedule(50)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def test_param_specs_layout():
    specs = dict(param_specs(_make_arch(widths=(8, 6), kernel=3, time_dim=4)))
    assert specs["conv0.weight"] == (8, 5, 3, 3, 3)
    assert specs["conv1.weight"] == (6, 8, 3, 3, 3)
    assert specs["conv2.weight"] == (4, 6, 3, 3, 3)
    assert specs["conv2.bias"] == (4,)
    assert specs["time1.weight"] == (6, 4)
    assert len(specs) == 9


def test_time_embedding():
    a, b = time_embedding(1, 8), time_embedding(2, 8)
    assert a.shape == (8,)
    assert not np.allclose(a, b)
    assert time_embedding(3, 7).shape == (7,)


def test_forward_shapes_and_eval_is_pure():
    net = DenoiserNet(_make_arch(), seed=1)
    x = np.random.default_rng(0).standard_normal((4, 5, 5, 5))
    out = net.eval(x, 3)
    assert out.shape == x.shape
    with pytest.raises(StateError):
        net.backward(np.ones_like(out))
    assert np.array_equal(net_forward(net, x, 3, None), out)
    grads = net_backward(net, np.ones_like(out))
    assert set(grads) == {name for name, _ in param_specs(net.arch)}


def test_input_checks():
    net = DenoiserNet(_make_arch())
    with pytest.raises(DimensionError):
        net.eval(np.zeros((3, 5, 5, 5)), 1)
    with pytest.raises(DimensionError):
        net.eval(np.zeros((4, 5, 5, 5)), 1, np.ones((4, 4, 4), bool))
    with pytest.raises(DimensionError):
        DenoiserNet(_make_arch(), params={"conv0.weight": np.zeros((1,))})


def test_gradients_match_finite_differences():
    net = DenoiserNet(_make_arch(widths=(4, 4)), seed=2)
    report = grad_check(net, tolerance=1e-4, per_param=10, lattice=5, seed=0)
    assert report.passed
    assert report.max_rel_error <= 1e-4
    assert set(report.per_layer) == {name for name, _ in param_specs(net.arch)}


def test_grad_check_catches_wrong_activation_derivative(monkeypatch):
    monkeypatch.setattr(scoremodel, "_silu_grad", lambda z: expit(z))
    report = grad_check(DenoiserNet(_make_arch(), seed=2), per_param=10)
    assert not report.passed
    assert "conv0.weight" in report.failures


def test_translation_equivariance_in_interior():
    net = DenoiserNet(_make_arch(widths=(4,), lattice=None), seed=3)
    x = np.random.default_rng(1).standard_normal((4, 9, 9, 9))
    out = net.eval(x, 7)
    shifted = net.eval(np.roll(x, 1, axis=1), 7)
    # two 3x3x3 layers see two sites in each direction
    np.testing.assert_allclose(shifted[:, 3:7], out[:, 2:6], atol=1e-10)


def test_masked_inputs_do_not_reach_loss_or_gradients():
    net = DenoiserNet(_make_arch(), seed=6, dtype=np.float64)
    rng = np.random.default_rng(2)
    mask = rng.random((5, 5, 5)) > 0.4
    x = rng.standard_normal((4, 5, 5, 5))
    eps = rng.standard_normal(x.shape) * mask

    loss, upstream = masked_mse(net.forward(x, 9, mask), eps, mask)
    grads = net.backward(upstream)

    noisy = x.copy()
    noisy[:, ~mask] = 50.0 * rng.standard_normal((4, int((~mask).sum())))
    noisy_loss, upstream = masked_mse(net.forward(noisy, 9, mask), eps, mask)
    noisy_grads = net.backward(upstream)

    assert noisy_loss == loss
    for name, g in grads.items():
        assert np.array_equal(noisy_grads[name], g)


def test_zero_net_outputs_zero_and_passes_grad_check():
    arch = _make_arch(widths=(4, 4))
    net = DenoiserNet(arch, params={name: np.zeros(shape, np.float32)
                                    for name, shape in param_specs(arch)})
    x = np.random.default_rng(0).standard_normal((4, 5, 5, 5))
    assert np.all(net.eval(x, 4) == 0)
    assert grad_check(net, per_param=10).passed


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


def test_point_mass_oracle_returns_true_noise(sched):
    rng = np.random.default_rng(0)
    mu = rng.uniform(-1, 1, (4, 3, 3, 3))
    eps = rng.standard_normal(mu.shape)
    xt = forward_sample(mu, 17, eps, sched)
    np.testing.assert_allclose(GaussianOracle(sched, mu).eval(xt, 17), eps, atol=1e-10)
    with pytest.raises(ParameterError):
        oracle_gaussian_eps(xt, 17, sched, mu, -1.0)


def test_gaussian_oracle_attains_analytic_minimum(sched):
    """At fixed t the oracle's loss is the posterior variance of eps; a rescaled one does worse."""
    mu, var, t = 0.2, 0.25, 25
    rng = np.random.default_rng(9)
    batch = [mu + np.sqrt(var) * rng.standard_normal((4, 40, 40, 40)) for _ in range(2)]
    mask = np.ones((40, 40, 40), bool)
    oracle = GaussianOracle(sched, mu, var)

    loss = denoising_loss(oracle, batch, mask, sched, np.random.default_rng(1), t=t)
    ab = sched.alpha_bars[t]
    assert loss == pytest.approx(ab * var / (ab * var + 1.0 - ab), rel=0.01)

    scaled = _ScaledModel(oracle, 1.1)
    assert denoising_loss(scaled, batch, mask, sched, np.random.default_rng(1), t=t) > loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_training_is_deterministic(grid, sched):
    data = _make_dataset(grid)
    cfg = _make_train_cfg()
    a = DenoiserNet(_make_arch(), seed=0)
    b = DenoiserNet(_make_arch(), seed=0)
    trace_a, adam = train(a, data, grid, sched, cfg)
    trace_b, _ = train(b, data, grid, sched, cfg)
    assert trace_a == trace_b
    assert len(trace_a) == cfg.steps
    assert all(np.isfinite(trace_a))
    assert adam.state.step == cfg.steps
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
        assert a.params[name].dtype == np.float32


def test_loss_descends_on_frozen_batch(grid, sched):
    net = DenoiserNet(_make_arch(), seed=7, dtype=np.float64)
    rng = np.random.default_rng(3)
    emb = embed_to_cubic(grid, _make_dataset(grid, count=1)[0])
    eps = rng.standard_normal(emb.data.shape) * emb.mask
    xt = forward_sample(emb.data, 10, eps, sched, emb.mask)

    adam = Adam(1e-4)
    trace = []
    for _ in range(100):
        loss, upstream = masked_mse(net.forward(xt, 10, emb.mask), eps, emb.mask)
        trace.append(loss)
        for name, inc in adam.update(net.backward(upstream)).items():
            net.params[name] = net.params[name] - inc
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_zero_steps_leave_initialization(grid, sched):
    net = DenoiserNet(_make_arch(), seed=8)
    initial = {name: p.copy() for name, p in net.params.items()}
    trace, adam = train(net, _make_dataset(grid), grid, sched, _make_train_cfg(steps=0))
    assert trace == []
    assert adam.state.step == 0
    for name, p in initial.items():
        assert np.array_equal(net.params[name], p)


def test_training_checks_inputs(grid, sched):
    net = DenoiserNet(_make_arch())
    cfg = _make_train_cfg()
    with pytest.raises(ParameterError):
        train(net, [], grid, sched, cfg)
    with pytest.raises(StateError):
        train(net, [GridState.zeros(grid.num_vertices)], grid, sched, cfg)
    wrong = DenoiserNet(_make_arch(lattice=7))
    with pytest.raises(DimensionError):
        train(wrong, _make_dataset(grid), grid, sched, cfg)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, grid, sched):
    net = DenoiserNet(_make_arch(), seed=4)
    _, adam = train(net, _make_dataset(grid), grid, sched, _make_train_cfg(steps=2))
    path = tmp_path / "model.mdck"
    save_checkpoint(path, net, adam)

    loaded, state = load_checkpoint(path)
    assert loaded.arch == net.arch
    assert state.step == 2
    for name in net.params:
        assert np.array_equal(loaded.params[name], net.params[name])
        np.testing.assert_allclose(state.m[name], adam.state.m[name], rtol=1e-6, atol=1e-30)
    x = np.random.default_rng(0).standard_normal((4, 5, 5, 5))
    assert np.array_equal(loaded.eval(x, 5), net.eval(x, 5))

    resumed = Adam(1e-2, state=state)
    assert resumed.state.step == 2


def test_checkpoint_without_optimizer(tmp_path):
    net = DenoiserNet(_make_arch(), seed=5)
    path = tmp_path / "fresh.mdck"
    save_checkpoint(path, net)
    _, state = load_checkpoint(path)
    assert state.step == 0
    assert all(np.all(m == 0) for m in state.m.values())


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "model.mdck"
    save_checkpoint(path, DenoiserNet(_make_arch()))
    blob = path.read_bytes()
    bad = tmp_path / "bad.mdck"

    bad.write_bytes(b"ZZZZ" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    bad.write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    bad.write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    bad.write_bytes(blob[:10])
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    descriptor = b'{"widths": "nope"}'
    header = struct.pack("<4sIII", b"MDCK", 1, len(descriptor), 0)
    bad.write_bytes(header + descriptor)
    with pytest.raises(FormatError):
        load_checkpoint(bad)
