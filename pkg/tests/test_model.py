import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from remarnet import ops
from remarnet.model import (ConfigError, ModelConfig, ReMarNet, UsageError, loss_ce, loss_rm,
                            loss_total, predict)
from remarnet.ops import DimensionError
from remarnet.tensor import Tensor, use_compute_mode


def small_cfg(**kw):
    base = dict(in_channels=1, num_classes=3, height=16, width=16, channels=4, rm_hidden=8, fc_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def images(n, c=1, h=16, w=16, seed=0):
    return np.random.default_rng(seed).random((n, c, h, w)).astype(np.float32)


# ---------------------------------------------------------------- geometry

def test_full_size_embedding_shape():
    net = ReMarNet(ModelConfig(num_classes=2), seed=0)
    assert net.embed(images(2, h=32, w=32)).shape == (2, 64, 8, 8)


def test_16x16_embedding_shape():
    net = ReMarNet(ModelConfig(num_classes=2, height=16, width=16), seed=0)
    assert net.embed(images(3)).shape == (3, 64, 4, 4)


def test_embed_rejects_bad_geometry():
    net = ReMarNet(small_cfg(), seed=0)
    with pytest.raises(DimensionError):
        net.embed(images(1, c=3))
    with pytest.raises(DimensionError):
        net.embed(images(1, h=18, w=16))


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(rm_enabled=False, fc_enabled=False).validate()
    with pytest.raises(ConfigError, match="divisible"):
        small_cfg(height=24).validate()


def test_relation_module_input_channels():
    net = ReMarNet(small_cfg(), seed=0)
    assert net.rm.blocks[0].weight.shape[1] == 2 * 4


def test_parameter_groups_partition():
    net = ReMarNet(small_cfg(), seed=0)
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    groups = {p.group for p in net.parameters()}
    assert groups == {"embedding", "rm", "fc"}
    assert sum(len(net.parameters(g)) for g in groups) == len(net.parameters())
    for name, p in net.named_parameters():
        assert name.split(".")[0] == p.group


def test_init_rule():
    net = ReMarNet(small_cfg(), seed=3)
    w = net.embedding.blocks[1].weight.data
    bound = math.sqrt(6 / (4 * 9))
    assert np.all(np.abs(w) <= bound) and np.abs(w).max() > 0.8 * bound
    assert np.all(net.embedding.blocks[0].bias.data == 0)
    assert np.all(net.embedding.blocks[0].gamma.data == 1)


def test_same_seed_same_weights():
    a, b = ReMarNet(small_cfg(), seed=5), ReMarNet(small_cfg(), seed=5)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data)


# ---------------------------------------------------------------- branches

def test_relation_scores_shape_and_range():
    net = ReMarNet(small_cfg(), seed=0)
    sf, pf = net.embed(images(3)), net.embed(images(8, seed=1))
    r = net.relation_scores(sf, pf)
    assert r.shape == (3, 8)
    assert np.all(r.data > 0) and np.all(r.data < 1)


def test_zero_rm_weights_give_half():
    net = ReMarNet(small_cfg(), seed=0)
    for p in net.parameters("rm"):
        p.data = np.zeros_like(p.data)
    feats = net.embed(images(2))
    assert np.all(net.relation_scores(feats, feats).data == 0.5)


def test_pairwise_scores_match_batched_path_bit_exactly():
    net = ReMarNet(small_cfg(), seed=2)
    sf, pf = net.embed(images(3)), net.embed(images(3, seed=9))
    batched = net.relation_scores(sf, pf, train=False).data
    for i in range(3):
        for j in range(3):
            pair = net.relation_scores(ops.slice_rows(sf, i, i + 1), ops.slice_rows(pf, j, j + 1), train=False)
            assert pair.data[0, 0] == batched[i, j]


def test_fast_mode_relation_path_close_to_default():
    net = ReMarNet(small_cfg(), seed=2)
    x, protos = images(4), images(3, seed=4)
    r0, p0 = net.forward(x, protos, train=False)
    with use_compute_mode("fast"):
        r1, p1 = net.forward(x, protos, train=False)
    assert np.allclose(r0.data, r1.data, rtol=1e-5, atol=1e-6)
    assert np.allclose(p0.data, p1.data, rtol=1e-5, atol=1e-6)


def test_feature_mismatch_raises():
    net = ReMarNet(small_cfg(), seed=0)
    sf = net.embed(images(2))
    with pytest.raises(DimensionError):
        net.relation_scores(sf, Tensor(np.zeros((3, 4, 2, 2), dtype=np.float32)))


def test_fc_probs_rows():
    net = ReMarNet(small_cfg(num_classes=10), seed=0)
    p = net.fc_probs(net.embed(images(5)))
    assert p.shape == (5, 10)
    assert np.allclose(p.data.sum(axis=1), 1, atol=1e-6)
    net.fc.out.weight.data[:] = 0
    net.fc.out.bias.data[:] = 0
    assert np.allclose(net.fc_probs(net.embed(images(2))).data, 0.1)


def test_disabled_branch_usage_errors():
    net = ReMarNet(small_cfg(fc_enabled=False), seed=0)
    feats = net.embed(images(2))
    with pytest.raises(UsageError):
        net.fc_probs(feats)
    r, p = net.forward(images(2), images(3, seed=1))
    assert p is None and r.shape == (2, 3)
    net = ReMarNet(small_cfg(rm_enabled=False), seed=0)
    with pytest.raises(UsageError):
        net.relation_scores(feats, feats)
    r, p = net.forward(images(2), images(3, seed=1))
    assert r is None and p.shape == (2, 3)


def test_eval_mode_is_pure():
    net = ReMarNet(small_cfg(), seed=0)
    x, protos = images(3), images(3, seed=1)
    net.forward(x, protos, train=True)  # populate running stats
    a = net.forward(x, protos, train=False)
    b = net.forward(x, protos, train=False)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_identical_inputs_identical_features():
    net = ReMarNet(small_cfg(), seed=0)
    x = np.repeat(images(1), 3, axis=0)
    f = net.embed(x, train=False).data
    assert np.array_equal(f[0], f[1]) and np.array_equal(f[1], f[2])


def test_state_dict_round_trip():
    a, b = ReMarNet(small_cfg(), seed=1), ReMarNet(small_cfg(), seed=2)
    a.forward(images(2), images(3), train=True)
    b.load_state_dict(a.state_dict())
    x, protos = images(2, seed=5), images(3, seed=6)
    ra, pa = a.forward(x, protos)
    rb, pb = b.forward(x, protos)
    assert np.array_equal(ra.data, rb.data) and np.array_equal(pa.data, pb.data)
    state = a.state_dict()
    del state["fc.out.bias"]
    with pytest.raises(ConfigError, match="fc.out.bias"):
        b.load_state_dict(state)


# ---------------------------------------------------------------- losses

def test_loss_rm_examples():
    y = np.eye(3, dtype=np.float32)[[0, 2]]
    assert float(loss_rm(Tensor(y), y).data) == 0.0
    assert float(loss_rm(Tensor([[0.5, 0.5]]), [[1.0, 0.0]]).data) == 0.5
    y8 = np.eye(8, dtype=np.float32)[[1, 4]]
    assert float(loss_rm(Tensor(np.full((2, 8), 0.5)), y8).data) == pytest.approx(2.0)


def test_loss_ce_examples():
    y = np.eye(4, dtype=np.float32)[[0, 3, 1]]
    assert float(loss_ce(Tensor(y), y).data) == 0.0
    assert float(loss_ce(Tensor(np.full((3, 4), 0.25)), y).data) == pytest.approx(math.log(4), abs=1e-6)
    assert float(loss_ce(Tensor([[0.9, 0.1]]), [[0.0, 1.0]]).data) == pytest.approx(-math.log(0.1), rel=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_rm(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        loss_ce(Tensor(np.zeros((2, 3))), np.zeros((3, 3)))


def test_loss_total_examples():
    l_rm, l_ce = Tensor(np.float32(0.5)), Tensor(np.float32(1.0))
    assert float(loss_total(l_rm, l_ce, 1, 1).data) == 1.5
    assert float(loss_total(l_rm, l_ce, 0, 1).data) == 1.0
    assert float(loss_total(l_rm, l_ce, 1, 0).data) == 0.5
    with pytest.raises(ConfigError):
        loss_total(l_rm, l_ce, 0, 0)


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(2, 6))
def test_loss_properties(seed, b, k):
    rng = np.random.default_rng(seed)
    y = np.eye(k, dtype=np.float32)[rng.integers(0, k, b)]
    r = Tensor(rng.random((b, k)).astype(np.float32))
    p = ops.softmax_rows(Tensor(rng.standard_normal((b, k)).astype(np.float32)))
    l_rm, l_ce = loss_rm(r, y), loss_ce(p, y)
    assert float(l_rm.data) >= 0 and float(l_ce.data) >= 0
    assert loss_total(l_rm, l_ce, 1, 1).data == (l_rm.data + l_ce.data)


# ---------------------------------------------------------------- prediction

def test_predict_examples():
    assert predict(np.array([[0.9, 0.2]]), np.array([[0.3, 0.7]])).tolist() == [0]
    assert predict(np.array([[0.1, 0.2, 0.9]]), np.array([[0.2, 0.1, 0.7]])).tolist() == [2]
    assert predict(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])).tolist() == [0]
    assert predict(p=np.array([[0.2, 0.8]])).tolist() == [1]
    with pytest.raises(UsageError):
        predict()


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 20), st.integers(2, 8))
def test_agreement_implies_ensemble_agreement(seed, b, k):
    rng = np.random.default_rng(seed)
    r = rng.random((b, k)).astype(np.float32)
    p = rng.dirichlet(np.ones(k), b).astype(np.float32)
    agree = r.argmax(1) == p.argmax(1)
    assert np.array_equal(predict(r, p)[agree], r.argmax(1)[agree])
