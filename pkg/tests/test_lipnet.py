import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segcert import lipnet, selftest
from segcert.lipnet import LayerSpec, ToyModel


def dense_model(w, b=None, size=(3, 3)):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    layer = LayerSpec("dense_1x1", w, b)
    model = ToyModel([layer], w.shape[1], w.shape[0], size)
    lipnet.refresh_bounds(model)
    return model


def naive_conv(w, b, x):
    """Direct loops over a zero-padded (C, H, W) input."""
    c_out, c_in = w.shape[:2]
    _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = b[o] + np.sum(w[o] * xp[:, i:i + 3, j:j + 3])
    return out


def test_identity_dense_layer():
    x = np.random.default_rng(0).random((2, 3, 3))
    np.testing.assert_array_equal(lipnet.forward(dense_model(np.eye(2)), x), x)


def test_zero_weights_give_bias():
    model = dense_model(np.zeros((3, 2)), b=[0.5, -1.0, 2.0])
    out = lipnet.forward(model, np.random.default_rng(1).random((2, 3, 3)))
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0.5, -1.0, 2.0])[:, None, None], out.shape))


def test_groupsort_pair():
    layer = LayerSpec("groupsort2")
    x = np.array([3.0, 1.0, -2.0, 5.0]).reshape(1, 4, 1, 1)
    y, _ = lipnet._layer_forward(layer, x, train=False)
    np.testing.assert_array_equal(y.ravel(), [1.0, 3.0, -2.0, 5.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_groupsort_preserves_pair_norms(seed):
    x = np.random.default_rng(seed).standard_normal((2, 6, 3, 3))
    y, _ = lipnet._layer_forward(LayerSpec("groupsort2"), x, train=False)
    nx = x.reshape(2, 3, 2, 3, 3) ** 2
    ny = y.reshape(2, 3, 2, 3, 3) ** 2
    np.testing.assert_allclose(ny.sum(axis=2), nx.sum(axis=2), rtol=0, atol=0)


def test_groupsort_odd_channels_rejected():
    with pytest.raises(ValueError):
        lipnet._layer_forward(LayerSpec("groupsort2"), np.zeros((1, 3, 2, 2)), train=False)


def test_dense_bound_diagonal():
    n = 5
    w = 2 * np.eye(n)
    assert math.sqrt(np.sum(w * w)) == pytest.approx(2 * math.sqrt(n))
    assert lipnet.dense_bound(w) == 2.0


def test_dense_bound_dominates_spectral_norm():
    rng = np.random.default_rng(2)
    for _ in range(50):
        w = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        assert lipnet.dense_bound(w) >= np.linalg.norm(w, 2) * (1 - 1e-12)


def test_orthogonal_dense_bound_range():
    rng = np.random.default_rng(3)
    for n in (2, 4, 8):
        layer = lipnet.dense_layer(rng, n, n)
        assert 1 - 1e-12 <= layer.lip_bound <= math.sqrt(n) + 1e-12


def test_identity_model_bound_is_one():
    assert lipnet.lipschitz_upper_bound(dense_model(np.eye(4))) == 1.0


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    x = rng.standard_normal((2, 5, 6))
    model = ToyModel([LayerSpec("conv3x3", w, b)], 2, 3, (5, 6))
    np.testing.assert_allclose(lipnet.forward(model, x), naive_conv(w, b, x), rtol=1e-12, atol=1e-12)


def conv_operator_norm(w, h, wd):
    """Exact l2 operator norm of the zero-padded convolution via its dense matrix."""
    c_in = w.shape[1]
    cols = []
    for idx in range(c_in * h * wd):
        e = np.zeros(c_in * h * wd)
        e[idx] = 1.0
        cols.append(naive_conv(w, np.zeros(w.shape[0]), e.reshape(c_in, h, wd)).ravel())
    return np.linalg.norm(np.stack(cols, axis=1), 2)


def test_conv_bound_dominates_operator_norm():
    rng = np.random.default_rng(5)
    for _ in range(5):
        w = rng.standard_normal((2, 2, 3, 3))
        assert lipnet.conv_bound(w) >= conv_operator_norm(w, 5, 5)


def test_residual_bound():
    rng = np.random.default_rng(6)
    conv = lipnet.conv_layer(rng, 4, 4)
    conv.weight = conv.weight * 3.0
    res = LayerSpec("residual_add", branch=[conv, LayerSpec("groupsort2")])
    assert lipnet.layer_bound(res) == pytest.approx(0.5 * (1 + lipnet.conv_bound(conv.weight)))


def test_model_output_shape():
    model = lipnet.build_toy_model(1, 3, width=6, blocks=1, size=(8, 10), seed=0)
    assert lipnet.forward(model, np.zeros((1, 8, 10))).shape == (3, 8, 10)
    assert lipnet.forward(model, np.zeros((4, 1, 8, 10))).shape == (4, 3, 8, 10)
    with pytest.raises(ValueError):
        lipnet.forward(model, np.zeros((2, 8, 10)))


def test_global_lip_is_product():
    model = selftest._random_model(3)
    assert model.global_lip == pytest.approx(math.prod(layer_.lip_bound for layer_ in model.layers))
    assert model.global_lip == pytest.approx(lipnet.lipschitz_upper_bound(model))


@pytest.mark.parametrize("seed", range(3))
def test_empirical_lipschitz_random_models(seed):
    res = selftest.lipschitz_pairs(selftest._random_model(seed), 300, seed)
    assert res.failures == 0


def test_linear_model_gradient_is_transpose():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((3, 2))
    model = dense_model(w)
    gy = rng.standard_normal((3, 3, 3))

    def objective(logits):
        return float((logits * gy).sum()), np.broadcast_to(gy, logits.shape).copy()

    g = lipnet.input_gradient(model, np.zeros((2, 3, 3)), objective)
    np.testing.assert_allclose(g, np.einsum("oc,ohw->chw", w, gy), rtol=1e-13, atol=1e-13)


def test_zero_objective_gradient():
    model = selftest._random_model(1)
    x = np.random.default_rng(0).random((1, 8, 8))

    def objective(logits):
        return 0.0, np.zeros_like(logits)

    assert not np.any(lipnet.input_gradient(model, x, objective))


@pytest.mark.parametrize("objective", ["masked_ce", "sum_margin"])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed, objective):
    assert selftest.gradient_check(selftest._random_model(seed), seed, objective=objective) < 1e-3


def test_synthetic_dataset_determinism_and_range():
    a = lipnet.generate_synthetic_dataset(5, 20, 16, 3)
    b = lipnet.generate_synthetic_dataset(5, 20, 16, 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.mask, y.mask)
        assert x.image.min() >= 0 and x.image.max() <= 1
        assert x.image.shape == (1, 16, 16)
        assert set(np.unique(x.mask)) <= {0, 1, 2}


def test_synthetic_masks_have_two_classes():
    samples = lipnet.generate_synthetic_dataset(0, 400, 16, 2)
    share = np.mean([len(np.unique(s.mask)) >= 2 for s in samples])
    assert share >= 0.95


@pytest.mark.parametrize("kwargs", [{"size": 4}, {"classes": 5}])
def test_synthetic_rejects_bad_args(kwargs):
    with pytest.raises(ValueError):
        lipnet.generate_synthetic_dataset(0, 2, **{"size": 16, "classes": 2, **kwargs})


def test_zero_steps_leave_model_unchanged():
    model = lipnet.build_toy_model(seed=2)
    trained = lipnet.train_toy(model, lipnet.generate_synthetic_dataset(0, 4), steps=0)
    for a, b in zip(lipnet.iter_layers(model.layers), lipnet.iter_layers(trained.layers)):
        if a.weight is not None:
            np.testing.assert_array_equal(a.weight, b.weight)


def test_short_training_keeps_unit_bounds():
    model = lipnet.build_toy_model(seed=3)
    data = lipnet.generate_synthetic_dataset(3, 16)
    trained = lipnet.train_toy(model, data, steps=5, batch_size=4, seed=3)
    for layer in lipnet.iter_layers(trained.layers):
        if layer.kind in lipnet.LINEAR_KINDS:
            assert abs(layer.lip_bound - 1.0) <= 1e-9
    assert abs(lipnet.lipschitz_upper_bound(trained) - 1.0) <= 1e-9
    # training works on a copy
    assert model.layers[0].weight is not trained.layers[0].weight


def test_training_is_reproducible():
    data = lipnet.generate_synthetic_dataset(4, 16)
    a = lipnet.train_toy(lipnet.build_toy_model(seed=4), data, steps=3, batch_size=4, seed=9)
    b = lipnet.train_toy(lipnet.build_toy_model(seed=4), data, steps=3, batch_size=4, seed=9)
    for la, lb in zip(lipnet.iter_layers(a.layers), lipnet.iter_layers(b.layers)):
        if la.weight is not None:
            assert la.weight.tobytes() == lb.weight.tobytes()


def test_training_divergence_reports_step():
    with pytest.raises(lipnet.TrainingDiverged) as info:
        lipnet.train_toy(lipnet.build_toy_model(seed=0), lipnet.generate_synthetic_dataset(0, 4),
                         steps=2, lr=math.nan, batch_size=2)
    assert info.value.step == 2


def test_batch_center_uses_running_mean_at_eval():
    layer = LayerSpec("batch_center", running_mean=np.array([0.25, -0.5]))
    x = np.ones((1, 2, 2, 2))
    y, _ = lipnet._layer_forward(layer, x, train=False)
    np.testing.assert_array_equal(y[0, :, 0, 0], [0.75, 1.5])


def test_save_load_round_trip(tmp_path):
    model = selftest._random_model(2).as_float32()
    lipnet.save_model(model, tmp_path / "m")
    back = lipnet.load_model(tmp_path / "m")
    x = np.random.default_rng(0).random((2, 1, 8, 8))
    assert lipnet.forward(back, x).tobytes() == lipnet.forward(model, x).tobytes()
    assert back.global_lip == model.global_lip
    for a, b in zip(lipnet.iter_layers(model.layers), lipnet.iter_layers(back.layers)):
        assert a.kind == b.kind
        for name in ("weight", "bias", "running_mean"):
            va, vb = getattr(a, name), getattr(b, name)
            assert (va is None) == (vb is None)
            if va is not None:
                assert va.tobytes() == vb.tobytes()


def test_load_rejects_foreign_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        lipnet.load_model(tmp_path)


@pytest.mark.slow
def test_trained_model_accuracy(trained_model, toy_data):
    _, test = toy_data
    xs, ys = lipnet.stack_dataset(test)
    assert lipnet.pixel_accuracy(trained_model, xs, ys) >= 0.85
    assert abs(trained_model.global_lip - 1.0) <= 1e-9
