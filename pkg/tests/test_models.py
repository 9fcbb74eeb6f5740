import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affuse import tensor as T
from affuse.fusion import ConfigError
from affuse.models import FUSION_MODES, ModelSpec, model_build, normalize_adjacency
from affuse.module import glorot, glorot_bound
from affuse.rng import RngStream
from affuse.tensor import Tensor
from affuse.train import LossConfig, grad_check, model_loss_fn


def spec(arch, mode="aff", **extra):
    fusion = {"common_dim": 6, "attention_hidden": 4, "meta_hidden": 5, "aux_weight": 0.1}
    fusion.update(extra.pop("fusion", {}))
    raw = {"arch": arch, "num_classes": 3 if arch != "gcn" else 2, "fusion_mode": mode,
           "fusion": fusion}
    raw.update(extra)
    return ModelSpec.from_dict(raw)


def path_graph(n):
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return a


# ---------------------------------------------------------------- adjacency normalisation

def test_isolated_nodes_normalize_to_identity():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((3, 3))), np.eye(3))


def test_single_edge_gives_halves():
    np.testing.assert_allclose(normalize_adjacency([[0, 1], [1, 0]]), np.full((2, 2), 0.5),
                               rtol=0, atol=1e-15)


@given(st.integers(0, 2**32), st.integers(1, 8))
@settings(max_examples=50)
def test_normalized_adjacency_symmetric(seed, n):
    rng = RngStream(seed)
    upper = np.triu(rng.uniform_array((n, n)) > 0.5, 1).astype(float)
    a_sym = normalize_adjacency(upper + upper.T)
    assert np.max(np.abs(a_sym - a_sym.T)) <= 1e-12


@pytest.mark.parametrize("bad", [[[0, 1], [0, 0]], [[0, -1], [-1, 0]], [[1, 0], [0, 0]]])
def test_normalize_rejects(bad):
    with pytest.raises(ValueError):
        normalize_adjacency(bad)


# ---------------------------------------------------------------- initialisation

def test_glorot_bound_for_fan_three_three():
    assert glorot_bound(3, 3) == 1.0


def test_same_seed_identical_parameters():
    a = model_build(spec("rnn"), 7).state_dict()
    b = model_build(spec("rnn"), 7).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = model_build(spec("rnn"), 8).state_dict()
    assert not np.array_equal(a["extractor.W_h"], c["extractor.W_h"])


def _fan_bound(p):
    shape = p.shape
    if len(shape) == 4:
        return glorot_bound(shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3])
    if len(shape) == 2:
        return glorot_bound(shape[0], shape[1])
    return glorot_bound(shape[0], 1)


@pytest.mark.parametrize("arch", ["direct", "cnn", "rnn", "gcn"])
def test_weights_within_glorot_bound_and_biases_zero(arch):
    model = model_build(spec(arch), 3)
    for name, p in model.named_parameters():
        if p.decay_exempt:
            assert not p.data.any(), name
        else:
            assert np.abs(p.data).max() <= _fan_bound(p), name


def test_glorot_draws_uniformly_inside_bound():
    w = glorot((40, 60), 60, 40, RngStream(1)).data
    bound = math.sqrt(6 / 100)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.95 * bound
    assert abs(w.mean()) < 0.02


def test_arms_share_extractor_heads_and_classifier():
    models = {m: model_build(spec("cnn", m), 11) for m in FUSION_MODES}
    ref = models["aff"].state_dict()
    for mode, model in models.items():
        state = model.state_dict()
        for key in ref:
            if key.startswith(("extractor.", "classifier.", "fusion.heads.")):
                np.testing.assert_array_equal(state[key], ref[key], err_msg=f"{mode}:{key}")


# ---------------------------------------------------------------- forward behaviour

@pytest.mark.parametrize("mode", FUSION_MODES)
def test_cnn_zero_image_equal_logits(mode):
    model = model_build(spec("cnn", mode), 2)
    logits, _ = model(np.zeros((2, 1, 16, 16)))
    assert np.all(logits.data == logits.data[0, 0])


@given(st.integers(0, 2**32))
@settings(max_examples=20, deadline=None)
def test_rnn_single_step_sources_coincide(seed):
    model = model_build(spec("rnn"), seed)
    tokens = np.array([[seed % 50], [(seed // 50) % 50]])
    last, mean, mx = model.extractor(tokens)
    np.testing.assert_array_equal(last.data, mean.data)
    np.testing.assert_array_equal(last.data, mx.data)


def test_rnn_rejects_unknown_tokens():
    model = model_build(spec("rnn"), 0)
    with pytest.raises(ValueError):
        model(np.array([[1, 50]]))
    with pytest.raises(ValueError):
        model(np.zeros((2, 0), dtype=int))


def _gcn_loop_logits(model, a, x):
    n = len(a)
    deg = [1.0 + sum(a[i]) for i in range(n)]
    a_hat = [[((1.0 if i == j else 0.0) + a[i][j]) / math.sqrt(deg[i] * deg[j]) for j in range(n)]
             for i in range(n)]

    def layer(h, w):
        hw = [[sum(h[i][q] * w[q][c] for q in range(len(w))) for c in range(len(w[0]))] for i in range(n)]
        return [[max(0.0, sum(a_hat[i][j] * hw[j][c] for j in range(n))) for c in range(len(w[0]))]
                for i in range(n)]

    ex = model.extractor
    h1 = layer(x, ex.W0.data.tolist())
    h2 = layer(h1, ex.W1.data.tolist())
    pooled = [[sum(h[i][c] for i in range(n)) / n for c in range(len(h[0]))] for h in (h1, h2)]
    fused = None
    for src, head in zip(pooled, model.fusion.heads):
        w, b = head.weight.data, head.bias.data
        z = [b[r] + sum(w[r][c] * src[c] for c in range(len(src))) for r in range(len(b))]
        fused = z if fused is None else [u + v for u, v in zip(fused, z)]
    w, b = model.classifier.weight.data, model.classifier.bias.data
    return [b[r] + sum(w[r][c] * fused[c] for c in range(len(fused))) for r in range(len(b))]


def test_gcn_matches_scalar_loop_on_path():
    model = model_build(spec("gcn", "add", fusion={"projection_act": "identity"}), 5)
    for p in model.parameters():
        if p.decay_exempt:
            p.data = RngStream(9).normal_array(p.shape, std=0.3)
    a = path_graph(4)
    x = RngStream(6).normal_array((4, 10))
    logits, _ = model([(a, x)])
    expect = _gcn_loop_logits(model, a.tolist(), x.tolist())
    np.testing.assert_allclose(logits.data[0], expect, rtol=0, atol=1e-12)


@given(st.integers(0, 2**32), st.permutations(range(6)))
@settings(max_examples=25, deadline=None)
def test_gcn_node_relabel_invariance(seed, perm):
    model = model_build(spec("gcn"), seed)
    rng = RngStream(seed ^ 1)
    upper = np.triu(rng.uniform_array((6, 6)) > 0.5, 1).astype(float)
    a = upper + upper.T
    x = rng.normal_array((6, 10))
    ref, _ = model([(a, x)])
    got, _ = model([(a[np.ix_(perm, perm)], x[list(perm)])])
    assert np.max(np.abs(got.data - ref.data)) <= 1e-9


def test_gcn_batch_equals_individual_graphs():
    model = model_build(spec("gcn"), 4)
    g1 = (path_graph(5), RngStream(1).normal_array((5, 10)))
    g2 = (path_graph(3), RngStream(2).normal_array((3, 10)))
    both, _ = model([g1, g2])
    one, _ = model([g1])
    two, _ = model([g2])
    np.testing.assert_allclose(both.data, np.vstack([one.data, two.data]), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- gradient checks on minimal instances

def _minimal_batch(arch):
    rng = RngStream(77)
    if arch == "cnn":
        return rng.normal_array((2, 1, 16, 16)), np.array([0, 2])
    if arch == "rnn":
        return np.array([[1, 20, 33], [9, 0, 49]]), np.array([1, 0])
    if arch == "direct":
        return [rng.normal_array((3, 9)) for _ in range(3)], np.array([0, 1, 2])
    upper = np.triu(rng.uniform_array((5, 5)) > 0.4, 1).astype(float)
    return [(upper + upper.T, rng.normal_array((5, 10)))], np.array([1])


GRAD_SEED = 22


def _switch_margin(pre):
    """Smallest distance of a pre-activation to a relu kink or a 2x2 max-pool tie."""
    b, c, h, w = pre.shape
    act = np.maximum(pre, 0).reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    top = np.sort(act.reshape(b, c, h // 2, w // 2, 4), axis=-1)
    gaps = (top[..., 3] - top[..., 2])[top[..., 3] > 0]
    return min(np.abs(pre).min(), gaps.min())


def test_cnn_instance_clear_of_switch_points():
    # central differences are only meaningful away from relu/max-pool switch points
    ex = model_build(spec("cnn"), GRAD_SEED).extractor
    images, _ = _minimal_batch("cnn")
    a1 = T.conv2d(Tensor(images), ex.conv1_w, ex.conv1_b, pad=1)
    a2 = T.conv2d(T.maxpool2d(T.relu(a1), 2), ex.conv2_w, ex.conv2_b, pad=1)
    assert min(_switch_margin(a1.data), _switch_margin(a2.data)) > 1e-5


@pytest.mark.parametrize("arch", ["direct", "cnn", "rnn", "gcn"])
@pytest.mark.parametrize("mode", FUSION_MODES)
def test_full_model_gradient(arch, mode):
    model = model_build(spec(arch, mode, fusion={"projection_act": "tanh"}), GRAD_SEED)
    batch, labels = _minimal_batch(arch)
    loss_cfg = LossConfig(aux_weight=0.1 if mode == "aff" else 0.0, weight_decay=0.01)
    err = grad_check(model_loss_fn(model, batch, labels, loss_cfg), model.parameters(), 20, 5)
    assert err <= 1e-5


# ---------------------------------------------------------------- spec validation

@pytest.mark.parametrize("raw,key", [
    ({"arch": "mlp", "num_classes": 2}, "model.arch"),
    ({"arch": "cnn"}, "model.num_classes"),
    ({"arch": "cnn", "num_classes": 1}, "model.num_classes"),
    ({"arch": "cnn", "num_classes": 2, "hiden": 3}, "model.hiden"),
    ({"arch": "cnn", "num_classes": 2, "fusion_mode": "max"}, "model.fusion_mode"),
    ({"arch": "cnn", "num_classes": 2, "fusion": {"sources": [["a", 8]]}}, "model.fusion.sources"),
])
def test_spec_errors(raw, key):
    with pytest.raises(ConfigError, match=key):
        ModelSpec.from_dict(raw)


def test_spec_round_trip():
    s = spec("rnn", "concat")
    assert ModelSpec.from_dict(s.to_dict()).to_dict() == s.to_dict()
