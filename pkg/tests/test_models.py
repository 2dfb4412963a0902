import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathprox.errors import ConfigError, FormatError
from pathprox.models import (
    Conv,
    Flatten,
    Linear,
    NetworkSpec,
    Pool,
    ReLU,
    WeightStore,
    build_mlp,
    build_toy_cnn,
    derive_grouping,
    group_v,
    group_w,
    init_store,
    load_checkpoint,
    named_mlp,
    predict,
    rescale_unit,
    save_checkpoint,
    unit_view,
)


def manual_mlp(store, x):
    # plain MLP: ReLU after every layer but the last
    h = x
    n = len(store.weights)
    for k, (W, b) in enumerate(zip(store.weights, store.biases)):
        h = h @ W.T + b
        if k < n - 1:
            h = np.maximum(h, 0)
    return h


def test_plain_mlp_layout():
    spec = build_mlp(2, 16, 5, 3)
    assert [type(l) for l in spec.layers] == [Linear, ReLU, Linear, ReLU, Linear]
    sch = derive_grouping(spec)
    assert len(sch.groups) == 1 and sch.residual == (2,) and sch.c == 1


def test_factorized_mlp_layout():
    spec = build_mlp(3, 8, 4, 2, factorized=True)
    lin = spec.param_layers
    assert len(lin) == 6
    assert [l.bias for l in lin] == [True, False, False, False, False, True]
    sch = derive_grouping(spec)
    assert [(g.in_layer, g.out_layer) for g in sch.groups] == [(0, 1), (2, 3), (4, 5)]
    assert sch.residual == () and sch.c == 0


def test_factorized_forward_matches_manual():
    spec = build_mlp(2, 6, 3, 2, factorized=True)
    st_ = init_store(spec, 3)
    x = np.random.default_rng(0).normal(size=(7, 3))
    W0, W1, W2, W3 = st_.weights
    h = np.maximum(x @ W0.T + st_.biases[0], 0)
    h = np.maximum(h @ W1.T @ W2.T, 0)
    ref = h @ W3.T + st_.biases[3]
    np.testing.assert_allclose(predict(spec, st_, x), ref, atol=1e-12)


def test_plain_forward_matches_manual():
    spec = build_mlp(3, 5, 4, 3)
    s = init_store(spec, 1)
    x = np.random.default_rng(1).normal(size=(6, 4))
    np.testing.assert_allclose(predict(spec, s, x), manual_mlp(s, x), atol=1e-12)


@pytest.mark.parametrize("name,n_matrices", [("MLP-3-400 factorized", 6), ("MLP-6-400", 6), ("MLP-3-800", 4)])
def test_named_architectures(name, n_matrices):
    spec = named_mlp(name)
    assert len(spec.param_layers) == n_matrices
    assert spec.input_shape == (784,) and spec.output_dim == 10


def test_bad_builds():
    with pytest.raises(ConfigError):
        build_mlp(0, 4, 2, 2)
    with pytest.raises(ConfigError):
        named_mlp("MLP-9-1")
    with pytest.raises(ConfigError):
        build_toy_cnn((1, 2, 2, 2), 3, (), 2, (8, 8))  # odd conv count
    with pytest.raises(ConfigError):
        build_toy_cnn((1, 2, 2), 3, (0, 1), 2, (4, 4))  # pooling a 1x1 map
    with pytest.raises(ConfigError):
        NetworkSpec((Linear(3, 4), ReLU(), Linear(5, 2)), (3,), 2).validate()


def test_cnn_grouping_straddles_pool():
    spec = build_toy_cnn((1, 3, 4), 3, (0,), 2, (8, 8))
    sch = derive_grouping(spec)
    assert len(sch.groups) == 1
    g = sch.groups[0]
    assert g.kind == "conv" and g.pool == "max" and g.n_units == 3
    assert sch.residual == (2,)


def test_two_pools_between_convs_is_not_grouped():
    spec = NetworkSpec((Conv(1, 2, 3, 3), ReLU(), Pool("max"), Pool("max"), Conv(2, 2, 1, 1), ReLU(), Flatten(),
                        Linear(2 * 2 * 2, 2)), (1, 12, 12), 2)
    spec.validate()
    assert derive_grouping(spec).groups == ()


def test_group_accessors_shapes():
    spec = build_toy_cnn((2, 3, 4), 3, (), 2, (6, 6))
    s = init_store(spec, 0)
    g = derive_grouping(spec).groups[0]
    assert group_w(s, g).shape == (3, 2 * 9)
    assert group_w(s, g, include_bias=True).shape == (3, 2 * 9 + 1)
    assert group_v(s, g).shape == (3, 4 * 9)
    np.testing.assert_array_equal(group_v(s, g)[1], s.weights[1][:, 1].ravel())


def test_unit_view_round_trip_and_errors():
    spec = build_mlp(2, 4, 3, 2, factorized=True)
    s = init_store(spec, 0)
    sch = derive_grouping(spec)
    before = s.copy()
    v = unit_view(s, sch, 0, 2, include_bias=True)
    assert v.w.shape == (4,) and v.v.shape == (4,)
    v.write()
    assert s.identical_to(before)
    v.w = v.w * 0 + 1.0
    v.write()
    np.testing.assert_array_equal(s.weights[0][2], np.ones(3))
    assert s.biases[0][2] == 1.0
    with pytest.raises(IndexError):
        unit_view(s, sch, 0, 4)
    with pytest.raises(IndexError):
        unit_view(s, sch, 5, 0)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
def test_rescaling_a_unit_preserves_the_function(seed, alpha):
    spec = build_toy_cnn((1, 3, 2), 3, (0,), 3, (8, 8), pool_kind="avg") if seed % 2 else build_mlp(2, 5, 3, 3)
    s = init_store(spec, seed)
    s.biases[0] = np.random.default_rng(seed).normal(size=s.biases[0].shape)
    x = np.random.default_rng(seed + 1).normal(size=(4,) + spec.input_shape)
    before = predict(spec, s, x)
    g = derive_grouping(spec).groups[0]
    rescale_unit(s, g, seed % g.n_units, alpha)
    np.testing.assert_allclose(predict(spec, s, x), before, rtol=1e-10, atol=1e-12)


def test_init_is_seeded_and_scaled():
    spec = build_mlp(1, 400, 200, 2)
    a, b = init_store(spec, 5), init_store(spec, 5)
    assert a.identical_to(b)
    assert not a.identical_to(init_store(spec, 6))
    assert abs(a.weights[0].std() - np.sqrt(2 / 200)) < 0.01
    assert np.all(a.biases[0] == 0)


def test_checkpoint_round_trip(tmp_path):
    spec = build_toy_cnn((1, 2, 2), 3, (0,), 2, (8, 8))
    s = init_store(spec, 4)
    save_checkpoint(tmp_path / "c.json", s, 4, {"note": 1})
    back, doc = load_checkpoint(tmp_path / "c.json")
    assert back.identical_to(s) and back.spec == spec
    assert doc["seed"] == 4 and doc["note"] == 1 and back.version == s.version


def test_checkpoint_shape_mismatch(tmp_path):
    s = init_store(build_mlp(1, 3, 2, 2), 0)
    save_checkpoint(tmp_path / "c.json", s, 0)
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["layers"][0]["W"] = [[0.0]]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.json")
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.json")


def test_zeros_store_gives_uniform_probabilities():
    spec = build_mlp(1, 4, 2, 2)
    s = WeightStore.zeros(spec)
    np.testing.assert_array_equal(predict(spec, s, np.ones((3, 2))), np.zeros((3, 2)))
