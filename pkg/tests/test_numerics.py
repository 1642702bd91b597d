import numpy as np
import pytest

from shardsim.deferred_init import eager_param_values
from shardsim.numerics import (
    Adam,
    DenseTensor,
    LayeredModel,
    ModelSpec,
    NumericsError,
    SGD,
    batch_stream,
    make_optimizer,
    mse_loss,
    named_stream,
)


def build_model(spec: ModelSpec, seed: int = 0) -> LayeredModel:
    values = eager_param_values(spec, seed)
    params = {name: DenseTensor(arr.reshape(-1).copy(), arr.shape)
              for name, arr in values.items()}
    return LayeredModel(spec, params)


# ---------------------------------------------------------------------------
# DenseTensor
# ---------------------------------------------------------------------------

def test_dense_tensor_views_share_storage():
    base = DenseTensor(np.zeros(12), (12,))
    v = base.view(4, (2, 3))
    v.array[1, 2] = 7.0
    assert base.data[4 + 5] == 7.0  # row-major offset within the view


def test_dense_tensor_rejects_bad_shapes():
    with pytest.raises(NumericsError):
        DenseTensor(np.zeros((2, 3)), (6,))
    with pytest.raises(NumericsError):
        DenseTensor(np.zeros(5), (2, 3))
    base = DenseTensor(np.zeros(6), (6,))
    with pytest.raises(NumericsError):
        base.view(4, (3,))


def test_named_stream_is_stable_and_independent():
    a1 = named_stream(3, "data").uniform(size=8)
    a2 = named_stream(3, "data").uniform(size=8)
    b = named_stream(3, "init/linear0.weight").uniform(size=8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


# ---------------------------------------------------------------------------
# ModelSpec
# ---------------------------------------------------------------------------

def test_model_spec_default_units_one_linear_each():
    spec = ModelSpec(dims=(4, 8, 8, 2))
    assert spec.units == [[0], [1], [2]]
    assert spec.unit_param_names() == [
        ["linear0.weight", "linear0.bias"],
        ["linear1.weight", "linear1.bias"],
        ["linear2.weight", "linear2.bias"],
    ]


def test_model_spec_grouped_units():
    spec = ModelSpec(dims=(4, 8, 8, 8, 2), unit_sizes=(2, 2))
    assert spec.units == [[0, 1], [2, 3]]
    names = spec.unit_param_names()
    assert names[0] == ["linear0.weight", "linear0.bias",
                        "linear1.weight", "linear1.bias"]


def test_model_spec_rejects_uncovering_unit_sizes():
    with pytest.raises(NumericsError):
        ModelSpec(dims=(4, 8, 2), unit_sizes=(1, 1, 1)).units


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def test_forward_matches_plain_numpy():
    spec = ModelSpec(dims=(3, 4, 2), activation="relu")
    model = build_model(spec, seed=1)
    x = named_stream(9, "x").uniform(-1, 1, size=(5, 3))
    out, _ = model.forward(x)

    w0 = model.params["linear0.weight"].array
    b0 = model.params["linear0.bias"].array
    w1 = model.params["linear1.weight"].array
    b1 = model.params["linear1.bias"].array
    h = x @ w0.T + b0
    h = h * (h > 0)
    expect = h @ w1.T + b1  # final linear has no activation
    assert np.array_equal(out, expect)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("bias", [True, False])
def test_gradients_match_finite_differences(activation, bias):
    spec = ModelSpec(dims=(3, 5, 4, 2), activation=activation, bias=bias)
    model = build_model(spec, seed=2)
    for tensor in model.params.values():
        tensor.data += 1.0 / 32  # keep relu pre-activations off the kink
    rng = named_stream(11, "fd")
    x = rng.uniform(-1, 1, size=(6, 3))
    y = rng.uniform(-1, 1, size=(6, 2))

    pred, caches = model.forward(x)
    loss, dpred = mse_loss(pred, y)
    grads = model.backward(caches, dpred)

    eps = 1e-6
    for name, tensor in model.params.items():
        flat = tensor.data
        for idx in range(0, flat.size, max(1, flat.size // 7)):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, _ = mse_loss(model.forward(x)[0], y)
            flat[idx] = orig - eps
            lm, _ = mse_loss(model.forward(x)[0], y)
            flat[idx] = orig
            numeric = (lp - lm) / (2 * eps)
            analytic = grads[name].reshape(-1)[idx]
            assert abs(numeric - analytic) < 1e-7, (name, idx)


def test_unitwise_forward_backward_composes_to_whole_model():
    spec = ModelSpec(dims=(4, 8, 8, 2))
    model = build_model(spec, seed=3)
    x = named_stream(4, "x").uniform(-1, 1, size=(6, 4))
    y = named_stream(4, "y").uniform(-1, 1, size=(6, 2))

    whole_pred, whole_caches = model.forward(x)
    h = x
    caches = []
    for u in range(len(spec.units)):
        h, cache = model.forward_unit(u, h)
        caches.append(cache)
    assert np.array_equal(h, whole_pred)

    _, dpred = mse_loss(whole_pred, y)
    grads_whole = model.backward(whole_caches, dpred)
    dout = dpred
    grads_units = {}
    for u in reversed(range(len(spec.units))):
        dout, g = model.backward_unit(u, caches[u], dout)
        grads_units.update(g)
    for name in grads_whole:
        assert np.array_equal(grads_whole[name], grads_units[name])


def test_forward_rejects_wrong_fan_in():
    model = build_model(ModelSpec(dims=(3, 4, 2)))
    with pytest.raises(NumericsError):
        model.forward(np.zeros((5, 7)))


def test_backward_without_cache_raises():
    model = build_model(ModelSpec(dims=(3, 2)))
    with pytest.raises(NumericsError):
        model.backward_unit(0, None, np.zeros((1, 2)))


def test_flops_and_activation_counts():
    spec = ModelSpec(dims=(4, 8, 2))
    model = build_model(spec)
    assert model.unit_flops(0, batch=6) == 2.0 * 6 * 4 * 8
    assert model.unit_flops(0, batch=6, backward=True) == 4.0 * 6 * 4 * 8
    assert model.unit_activation_elements(1, batch=6) == 6 * (8 + 2)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_mse_loss_values_and_gradient():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.array([[0.0, 0.0], [0.0, 0.0]])
    loss, dpred = mse_loss(pred, target, reduction="mean")
    assert loss == (1 + 4 + 9 + 16) / 4
    assert np.array_equal(dpred, 2.0 / 4 * pred)

    loss_s, dpred_s = mse_loss(pred, target, reduction="sum")
    assert loss_s == 30.0
    assert np.array_equal(dpred_s, 2.0 * pred)

    with pytest.raises(NumericsError):
        mse_loss(pred, target, reduction="median")
    with pytest.raises(NumericsError):
        mse_loss(pred, np.zeros(3))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def test_sgd_step_is_a_scaled_subtraction():
    opt = SGD(lr=0.25)
    p = np.array([1.0, 2.0, 3.0])
    opt.step(p, np.array([4.0, 0.0, -4.0]), opt.init_state(3))
    assert np.array_equal(p, [0.0, 2.0, 4.0])
    assert opt.state_elements(10) == 0


def test_sgd_default_lr_is_a_power_of_two():
    # keeps integer-data training exactly representable
    assert SGD().lr == 2.0 ** -5


def test_adam_matches_reference_formulas():
    opt = Adam(lr=0.01)
    n = 5
    rng = named_stream(7, "adam")
    p = rng.uniform(-1, 1, size=n)
    p_ref = p.copy()
    state = opt.init_state(n)
    m = np.zeros(n)
    v = np.zeros(n)
    for t in range(1, 4):
        g = rng.uniform(-1, 1, size=n)
        opt.step(p, g, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        p_ref -= 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.array_equal(p, p_ref)
    assert opt.state_elements(n) == 2 * n


def test_optimizer_shape_mismatch_raises():
    opt = SGD()
    with pytest.raises(NumericsError):
        opt.step(np.zeros(3), np.zeros(4), {})


def test_make_optimizer():
    assert make_optimizer("sgd").kind == "sgd"
    assert make_optimizer("adam", lr=0.5).lr == 0.5
    with pytest.raises(NumericsError):
        make_optimizer("lion")


# ---------------------------------------------------------------------------
# data stream
# ---------------------------------------------------------------------------

def test_batch_stream_deterministic_and_shaped():
    a = list(batch_stream(5, 3, 8, 4, 2, "integer"))
    b = list(batch_stream(5, 3, 8, 4, 2, "integer"))
    assert len(a) == 3
    for (xa, ya), (xb, yb) in zip(a, b):
        assert xa.shape == (8, 4) and ya.shape == (8, 2)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)


def test_batch_stream_integer_regime_is_small_integers():
    for x, y in batch_stream(1, 2, 16, 3, 3, "integer"):
        for arr in (x, y):
            assert np.array_equal(arr, np.round(arr))
            assert arr.min() >= -3 and arr.max() <= 3


def test_batch_stream_uniform_regime_bounds():
    x, y = next(batch_stream(1, 1, 32, 4, 4, "uniform"))
    assert x.min() >= -1.0 and x.max() < 1.0
    assert not np.array_equal(x, np.round(x))


def test_batch_stream_unknown_regime():
    with pytest.raises(NumericsError):
        next(batch_stream(1, 1, 4, 2, 2, "gaussian"))
