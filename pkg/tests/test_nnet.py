import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flexihorizon.errors import InvalidInputError, ParseError
from flexihorizon.nnet import (
    MlpSpec,
    OptimState,
    cross_entropy,
    decode_checkpoint,
    encode_checkpoint,
    finite_diff_check,
    huber_loss,
    huber_loss_grad,
    init_params,
    kl_divergence,
    laplace_nll,
    laplace_nll_grad,
    load_checkpoint,
    log_softmax,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    save_checkpoint,
    sigmoid,
    softmax,
    softmax_cross_entropy_grad,
    softplus,
)


def test_softmax_properties():
    z = np.array([[1000.0, 1000.0], [0.0, math.log(3.0)]])
    p = softmax(z)
    assert p[0].tolist() == [0.5, 0.5]
    assert p[1] == pytest.approx([0.25, 0.75])
    assert np.exp(log_softmax(z)) == pytest.approx(p)


def test_cross_entropy_and_grad():
    assert cross_entropy([[0.25, 0.75]], [[0, 1]]) == pytest.approx(-math.log(0.75))
    assert math.isfinite(cross_entropy([[0.0, 1.0]], [[1, 0]]))
    g = softmax_cross_entropy_grad(np.array([0.0, math.log(3.0)]), np.array([0.0, 1.0]))
    assert g == pytest.approx([0.25, -0.25])


def test_huber_loss_and_grad():
    assert huber_loss([0.5, 3.0], [0.0, 0.0], 1.0) == pytest.approx((0.125 + 2.5) / 2)
    assert huber_loss_grad(np.array([0.5, 3.0, -3.0]), np.zeros(3), 1.0).tolist() == [0.5, 1.0, -1.0]


def test_laplace_nll():
    assert laplace_nll([0.0], [1.0], [2.0]) == pytest.approx(math.log(2) + 2)
    gl, gs = laplace_nll_grad(np.array([0.0]), np.array([2.0]), np.array([1.0]))
    assert gl.tolist() == [-0.5] and gs == pytest.approx([0.5 - 0.25])
    with pytest.raises(InvalidInputError):
        laplace_nll([0.0], [0.0], [1.0])


def test_kl_divergence():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_softplus_sigmoid():
    assert softplus(np.array([0.0]))[0] == pytest.approx(math.log(2))
    assert softplus(np.array([800.0]))[0] == 800.0
    assert sigmoid(np.array([0.0]))[0] == 0.5


def test_init_params_shapes_and_seed():
    spec = MlpSpec((4, 8, 3))
    p = init_params(spec, np.random.default_rng(0))
    assert p["W0"].shape == (4, 8) and p["b1"].shape == (3,)
    assert not p["b0"].any()
    q = init_params(spec, np.random.default_rng(0))
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        MlpSpec((4,))
    with pytest.raises(InvalidInputError):
        MlpSpec((4, 2), activation="gelu")


@pytest.mark.parametrize("activation", ["relu", "tanh", "identity"])
@pytest.mark.parametrize("final", [False, True])
def test_backward_matches_finite_differences(activation, final):
    spec = MlpSpec((3, 5, 4, 2), activation=activation, final_activation=final)
    rng = np.random.default_rng(1)
    params = init_params(spec, rng)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 2))

    def loss(p):
        out, cache = mlp_forward(spec, p, x)
        grads, _ = mlp_backward(spec, p, cache, w)
        return float((out * w).sum()), grads

    assert finite_diff_check(loss, params, n_samples=None, fd_dtype=np.longdouble) < 1e-6


def test_backward_input_gradient():
    spec = MlpSpec((3, 4, 1), activation="tanh")
    params = init_params(spec, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(1, 3))
    _, cache = mlp_forward(spec, params, x)
    _, gin = mlp_backward(spec, params, cache, np.ones((1, 1)))
    h = 1e-6
    for k in range(3):
        e = np.zeros_like(x)
        e[0, k] = h
        cd = (mlp_forward(spec, params, x + e)[0] - mlp_forward(spec, params, x - e)[0])[0, 0] / (2 * h)
        assert gin[0, k] == pytest.approx(cd, rel=1e-6)


def test_adamw_single_step_by_hand():
    params = {"p": np.array([1.0])}
    state = OptimState(lr=0.1, weight_decay=0.01)
    optimizer_step(params, {"p": np.array([2.0])}, state)
    # bias-corrected first step moves by lr * g / (|g| + eps), decay is decoupled
    assert params["p"][0] == pytest.approx(0.8990000005, abs=1e-12)
    assert state.step == 1


def test_adamw_defaults():
    s = OptimState()
    assert (s.lr, s.weight_decay, s.beta1, s.beta2) == (5e-4, 1e-4, 0.9, 0.999)


def test_adamw_minimises_quadratic():
    params = {"x": np.array([3.0, -2.0])}
    state = OptimState(lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        optimizer_step(params, {"x": 2 * params["x"]}, state)
    assert np.abs(params["x"]).max() < 1e-2


def test_adamw_shape_mismatch():
    with pytest.raises(InvalidInputError):
        optimizer_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, OptimState())


def test_finite_diff_check_flags_wrong_gradient():
    params = {"x": np.array([1.0, 2.0])}
    assert finite_diff_check(lambda p: (float((p["x"] ** 2).sum()), {"x": 3 * p["x"]}), params) > 0.1


def test_checkpoint_roundtrip(tmp_path):
    params = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([math.pi])}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"kind": "test", "n": 3})
    back, meta = load_checkpoint(path)
    assert meta["kind"] == "test" and set(back) == {"a", "b"}
    assert np.array_equal(back["b"], params["b"]) and back["a"][0] == math.pi
    assert encode_checkpoint(params, {"n": 1}) == encode_checkpoint(dict(reversed(params.items())), {"n": 1})


@pytest.mark.parametrize("corrupt", ["magic", "payload", "truncate", "trailing"])
def test_checkpoint_corruption_detected(corrupt):
    blob = bytearray(encode_checkpoint({"w": np.ones(4)}))
    if corrupt == "magic":
        blob[0] ^= 0xFF
    elif corrupt == "payload":
        blob[20] ^= 0x01
    elif corrupt == "truncate":
        blob = blob[:-5]
    else:
        blob += b"x"
    with pytest.raises(ParseError):
        decode_checkpoint(bytes(blob))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_checkpoint_roundtrip_is_bit_exact(a):
    back, _ = decode_checkpoint(encode_checkpoint({"a": a}))
    assert back["a"].tobytes() == a.tobytes()
