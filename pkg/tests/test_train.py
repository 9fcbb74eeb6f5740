import math

import numpy as np
import pytest

from affuse.data import gen_smoke
from affuse.models import ModelSpec, model_build
from affuse.module import Linear
from affuse.rng import RngStream
from affuse.tensor import Parameter, Tensor, _make, as_tensor, backward, matmul
from affuse.train import (LossConfig, Optimizer, TrainConfig, cross_entropy, epoch_stream,
                          evaluate, grad_check, l2_penalty, mse, total_loss, train_epoch)

from conftest import projected


def smoke_model(seed=0, mode="aff", aux=0.1, dropout=0.0):
    spec = ModelSpec.from_dict({
        "arch": "direct", "num_classes": 2, "fusion_mode": mode, "source_dims": [3, 3],
        "fusion": {"common_dim": 4, "attention_hidden": 3, "meta_hidden": 3,
                   "aux_weight": aux, "dropout_p": dropout}})
    return model_build(spec, seed)


# ---------------------------------------------------------------- losses

@pytest.mark.parametrize("c", [2, 3, 10])
def test_cross_entropy_uniform_is_log_c(c):
    loss = cross_entropy(Tensor(np.zeros((4, c))), [0, 1, 1, 0])
    assert abs(loss.item() - math.log(c)) <= 1e-15


def test_cross_entropy_large_margin_vanishes():
    assert cross_entropy(Tensor([[50.0, 0.0]]), [0]).item() < 1e-20


def test_cross_entropy_closed_form():
    got = cross_entropy(Tensor([[2.0, 0.0]]), [0]).item()
    assert abs(got - math.log(1 + math.exp(-2))) <= 1e-15


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 2))), [2])


def test_total_loss_switch_off_is_exact():
    model = smoke_model(aux=0.0)
    ds = gen_smoke(8)
    logits, out = model(ds.inputs(np.arange(8)))
    total = total_loss(logits, ds.labels, out, model.parameters(), LossConfig(0.0, 0.0))
    assert total.item() == cross_entropy(logits, ds.labels).item()


def test_penalty_of_single_weight():
    w = Parameter([[3.0]])
    assert l2_penalty([w], 0.1).item() == pytest.approx(0.45, abs=1e-15)


def test_penalty_zero_weights_and_exempt():
    w = Parameter(np.zeros((2, 2)))
    b = Parameter(np.full(2, 5.0), decay_exempt=True)
    assert l2_penalty([w, b], 0.3).item() == 0.0


def test_missing_aux_pred_is_an_error():
    model = smoke_model(aux=0.0)
    logits, out = model(gen_smoke(4).inputs(np.arange(4)))
    with pytest.raises(ValueError):
        total_loss(logits, [0, 1, 0, 1], out, model.parameters(), LossConfig(aux_weight=0.5))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(aux_weight=-1.0)
    with pytest.raises(ValueError):
        LossConfig(weight_decay=math.nan)


def test_mse():
    assert mse(Tensor([[1.0, 3.0]]), Tensor([[0.0, 0.0]])).item() == 5.0


# ---------------------------------------------------------------- optimizers

def test_adam_zero_grad_leaves_parameters():
    p = Parameter([1.0, -2.0])
    Optimizer([p], "adam", lr=0.1).step()
    assert p.data.tolist() == [1.0, -2.0]


def test_sgd_single_step():
    p = Parameter([0.0])
    p.grad = np.array([1.0])
    Optimizer([p], "sgd_momentum", lr=0.1, momentum=0.0).step()
    assert p.data.tolist() == [-0.1]


def test_sgd_momentum_two_steps():
    p = Parameter([0.0])
    opt = Optimizer([p], "sgd_momentum", lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    # v1 = 1, v2 = 1.9
    assert p.data[0] == pytest.approx(-0.1 - 0.19, abs=1e-15)


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def test_adam_first_step():
    p = Parameter([0.0])
    p.grad = np.array([1.0])
    Optimizer([p], "adam", lr=0.1).step()
    assert p.data[0] == adam_scalar(0.0, [1.0], 0.1)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_matches_scalar_transcription():
    grads = [0.3, -1.2, 2.5, 0.0, -0.7]
    p = Parameter([0.5])
    opt = Optimizer([p], "adam", lr=0.01)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    assert abs(p.data[0] - adam_scalar(0.5, grads, 0.01)) <= 1e-15


def test_optimizer_detects_shape_drift():
    p = Parameter([0.0, 1.0])
    opt = Optimizer([p])
    p.grad = np.zeros(3)
    with pytest.raises(ValueError):
        opt.step()


def test_optimizer_zero_grad():
    p = Parameter([1.0])
    p.grad = np.array([4.0])
    Optimizer([p]).zero_grad()
    assert p.grad.tolist() == [0.0]


# ---------------------------------------------------------------- epoch loop

def test_zero_lr_freezes_parameters():
    model = smoke_model(dropout=0.3)
    before = model.state_dict()
    cfg = TrainConfig(batch_size=5, lr=0.0, seed=1)
    train_epoch(model, gen_smoke(23), cfg, LossConfig(0.1), Optimizer(model.parameters(), lr=0.0))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_epoch_is_deterministic():
    def run():
        model = smoke_model(dropout=0.3)
        cfg = TrainConfig(batch_size=5, seed=3)
        opt = Optimizer(model.parameters(), lr=0.01)
        stats = [train_epoch(model, gen_smoke(23), cfg, LossConfig(0.1), opt, e) for e in range(2)]
        return stats, model.state_dict()

    (s1, p1), (s2, p2) = run(), run()
    assert s1 == s2
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_one_epoch_decreases_smoke_loss():
    model = smoke_model()
    ds = gen_smoke(64)
    initial, _, _ = evaluate(model, ds)
    cfg = TrainConfig(batch_size=8, lr=0.01, seed=0)
    train_epoch(model, ds, cfg, LossConfig(0.1), Optimizer(model.parameters(), lr=0.01))
    final, _, _ = evaluate(model, ds)
    assert final < initial


def test_empty_dataset_rejected():
    model = smoke_model()
    ds = gen_smoke(4).subset([])
    with pytest.raises(ValueError):
        train_epoch(model, ds, TrainConfig(), LossConfig(), Optimizer(model.parameters()))


def test_epoch_stream_distinct_per_epoch():
    assert epoch_stream(1, 0).next_u64() != epoch_stream(1, 1).next_u64()
    assert epoch_stream(1, 4).next_u64() == epoch_stream(1, 4).next_u64()


def test_decay_exempt_update_is_bit_exact():
    ds = gen_smoke(16)
    results = {}
    for wd in (0.0, 0.5):
        model = smoke_model(aux=0.1)
        cfg = TrainConfig(batch_size=16, seed=2, shuffle=False)
        train_epoch(model, ds, cfg, LossConfig(0.1, wd), Optimizer(model.parameters(), lr=0.05))
        results[wd] = dict(model.named_parameters())
    for name, p in results[0.0].items():
        other = results[0.5][name].data
        if p.decay_exempt:
            np.testing.assert_array_equal(p.data, other, err_msg=name)
        else:
            assert not np.array_equal(p.data, other), name


def test_every_fusion_parameter_gets_gradient():
    model = smoke_model(aux=0.1)
    ds = gen_smoke(16)
    logits, out = model(ds.inputs(np.arange(16)), "train", RngStream(0))
    backward(total_loss(logits, ds.labels, out, model.parameters(), LossConfig(0.1)))
    for name, p in model.fusion.named_parameters("fusion."):
        assert np.any(p.grad != 0), name


# ---------------------------------------------------------------- gradient checker

def test_linear_model_check_is_tight():
    rng = RngStream(4)
    lin = Linear(5, 3, rng)
    lin.bias.data = rng.normal_array(3)
    x = Tensor(rng.normal_array((6, 5)))
    target = Tensor(rng.normal_array((6, 3)))
    assert grad_check(lambda: mse(lin(x), target), lin.parameters(), 20, 1) <= 1e-7


def _broken_tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    # deliberately wrong: derivative should be 1 - y^2
    return _make(y, (x,), lambda g: (g * (1.0 - y),), "broken_tanh", np.tanh)


def test_corrupted_backward_is_caught():
    rng = RngStream(6)
    w = Parameter(rng.normal_array((4, 3)))
    x = Tensor(rng.normal_array((5, 4)))
    loss = lambda: projected(_broken_tanh(matmul(x, w)), RngStream(2))
    assert grad_check(loss, [w], 20, 0) > 1e-2


def test_grad_check_restores_parameters_and_rejects_non_scalar():
    w = Parameter(np.arange(4.0).reshape(2, 2))
    before = w.data.copy()
    grad_check(lambda: (w * w).sum(), [w])
    np.testing.assert_array_equal(w.data, before)
    assert w.data.dtype == np.float64
    with pytest.raises(ValueError):
        grad_check(lambda: w * 2.0, [w])
