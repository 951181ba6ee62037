import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgflow import numeric as nm
from sgflow.numeric import AdamState, ModelParams, Tape, Tensor

from oracles import adam_scalar, check_grads


def P(x):
    return Tensor(np.asarray(x, float), requires_grad=True)


def test_matmul_identity_and_values():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(nm.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    assert np.array_equal(nm.matmul(a, Tensor([[5], [6]])).data, [[17], [39]])


def test_softmax_uniform():
    np.testing.assert_allclose(nm.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(nm.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nm.ShapeError, match="add"):
        nm.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    # a row vector broadcasts over rows
    assert nm.add(Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0])).shape == (2, 3)


def test_backward_simple_cases():
    x = P(3.0)
    with Tape() as tape:
        g = tape.gradient(nm.mul(x, x), {"x": x})
    assert g["x"] == pytest.approx(6.0)
    x = P(-1.0)
    with Tape() as tape:
        g = tape.gradient(nm.relu(x), {"x": x})
    assert g["x"] == 0.0


def test_backward_errors():
    x = P([1.0, 2.0])
    with pytest.raises(nm.TapeError):
        nm.backward(nm.sum(x), {"x": x})
    with Tape():
        y = nm.mul(x, 2.0)
        with pytest.raises(nm.ShapeError):
            nm.backward(y, {"x": x})


def test_unreachable_parameter_gets_zero_gradient():
    x, unused = P([1.0, 2.0]), P(np.ones((2, 2)))
    with Tape():
        g = nm.backward(nm.sum(nm.square(x)), {"x": x, "u": unused})
    assert np.array_equal(g["u"], np.zeros((2, 2)))
    np.testing.assert_allclose(g["x"], [2.0, 4.0])


def test_tape_is_inactive_outside_context():
    x = P([1.0])
    y = nm.exp(x)
    assert not y.requires_grad
    assert nm.active_tape() is None


OPS = {
    "add": lambda a, b: nm.sum(nm.mul(nm.add(a, b), nm.add(a, b))),
    "sub": lambda a, b: nm.sum(nm.square(nm.sub(a, b))),
    "mul": lambda a, b: nm.sum(nm.mul(a, b)),
    "row_broadcast": lambda a, b: nm.sum(nm.square(nm.add(a, nm.index(b, 0)))),
    "relu": lambda a, b: nm.sum(nm.mul(nm.relu(a), b)),
    "exp": lambda a, b: nm.sum(nm.mul(nm.exp(a), b)),
    "log": lambda a, b: nm.sum(nm.mul(nm.log(nm.add(nm.square(a), 1.0)), b)),
    "softmax": lambda a, b: nm.sum(nm.mul(nm.softmax(a), b)),
    "log_softmax": lambda a, b: nm.sum(nm.mul(nm.log_softmax(a), b)),
    "matmul": lambda a, b: nm.sum(nm.square(nm.matmul(a, nm.reshape(b, (4, 3))))),
    "mean": lambda a, b: nm.sum(nm.mul(nm.mean(nm.mul(a, b), axis=0), nm.mean(a, axis=0))),
    "concat": lambda a, b: nm.sum(nm.square(nm.concat([a, b], axis=0))),
    "take_rows": lambda a, b: nm.sum(nm.mul(nm.take_rows(a, [0, 2, 2, 1]), nm.take_rows(b, [1, 1, 0, 2]))),
    "clamp": lambda a, b: nm.sum(nm.mul(nm.clamp(a, -0.5, 0.5), b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    a = P(rng.normal(size=(3, 4)))
    b = P(rng.normal(size=(3, 4)))
    if name == "clamp":
        # keep away from the kinks at +-0.5
        a.data[np.abs(np.abs(a.data) - 0.5) < 1e-3] += 0.01
    if name == "relu":
        a.data[np.abs(a.data) < 1e-3] = 0.1
    err = check_grads(lambda: OPS[name](a, b), {"a": a, "b": b}, rng)
    assert err < 1e-3


def test_batched_matmul_gradients():
    rng = np.random.default_rng(5)
    a = P(rng.normal(size=(4, 3, 3)))
    h = P(rng.normal(size=(4, 3, 5)))
    w = P(rng.normal(size=(5, 2)))
    err = check_grads(lambda: nm.sum(nm.square(nm.matmul(a, nm.matmul(h, w)))), {"a": a, "h": h, "w": w}, rng)
    assert err < 1e-3


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(11)
    x = P(rng.normal(size=(7, 4)))
    g = P(rng.uniform(0.5, 1.5, size=4))
    b = P(rng.normal(size=4))
    w = rng.normal(size=(7, 4))
    st0 = {"running_mean": rng.normal(size=4), "running_var": rng.uniform(0.5, 2, size=4)}

    def f():
        state = {k: v.copy() for k, v in st0.items()}
        return nm.sum(nm.mul(nm.batch_norm(x, g, b, state, training), w))

    assert check_grads(f, {"x": x, "g": g, "b": b}, rng) < 1e-3


def test_batch_norm_running_statistics():
    x = np.arange(12.0).reshape(6, 2)
    state = {"running_mean": np.zeros(2), "running_var": np.ones(2)}
    out = nm.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True)
    np.testing.assert_allclose(out.data.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(state["running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(state["running_var"], 0.9 + 0.1 * x.var(axis=0))
    inf = nm.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False)
    np.testing.assert_allclose(inf.data, (x - state["running_mean"]) / np.sqrt(state["running_var"] + 1e-5))


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    ps = {"w1": P(rng.normal(size=(3, 6))), "b1": P(rng.normal(size=6)),
          "w2": P(rng.normal(size=(6, 2))), "b2": P(rng.normal(size=2))}

    def f():
        h = nm.relu(nm.linear(Tensor(x), ps["w1"], ps["b1"]))
        return nm.sum(nm.square(nm.linear(h, ps["w2"], ps["b2"])))

    assert check_grads(f, ps, rng) < 1e-3


# ---------------------------------------------------------------- segment max


def test_segment_max_values():
    out = nm.segment_max(Tensor([[1.0], [5.0], [3.0]]), [0, 0, 1], 2)
    assert np.array_equal(out.data, [[5.0], [3.0]])


def test_segment_max_missing_instance():
    with pytest.raises(ValueError, match=r"\[1\]"):
        nm.segment_max(Tensor([[1.0], [2.0]]), [0, 2], 3)


def test_segment_max_gradient_routes_to_first_argmax():
    x = P([[1.0, 7.0], [5.0, 7.0], [5.0, 0.0], [2.0, 3.0]])
    with Tape() as tape:
        g = tape.gradient(nm.sum(nm.segment_max(x, [0, 0, 0, 1], 2)), {"x": x})
    expect = np.array([[0, 1], [1, 0], [0, 0], [1, 1]], float)
    assert np.array_equal(g["x"], expect)


def test_segment_max_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = P(rng.normal(size=(12, 3)))
    seg = rng.permutation(np.arange(12) % 4)
    assert check_grads(lambda: nm.sum(nm.segment_max(x, seg, 4)), {"x": x}, rng) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_segment_max_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n, m = 15, 4
    x = rng.normal(size=(n, 3))
    seg = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    perm = rng.permutation(n)
    a = nm.segment_max(Tensor(x), seg, m).data
    b = nm.segment_max(Tensor(x[perm]), seg[perm], m).data
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_normalized(vals):
    s = nm.softmax(Tensor(np.array([vals, vals[::-1]]))).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- adam


def test_adam_first_step_moves_by_lr():
    p = {"w": P([0.5])}
    nm.adam_step(p, {"w": np.array([1.0])}, st := AdamState(lr=0.001))
    assert p["w"].data[0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-12)
    assert st.step == 1


def test_adam_zero_gradient_is_noop():
    p = {"w": P([0.5, -1.0])}
    st = AdamState()
    nm.adam_step(p, {"w": np.zeros(2)}, st)
    assert np.array_equal(p["w"].data, [0.5, -1.0]) and st.step == 1


def test_adam_matches_scalar_trace():
    p = {"w": P([2.0])}
    st = AdamState(lr=0.01)
    trace = []
    for _ in range(2):
        nm.adam_step(p, {"w": np.array([0.3])}, st)
        trace.append(p["w"].data[0])
    np.testing.assert_allclose(trace, adam_scalar(2.0, [0.3, 0.3], lr=0.01), rtol=0, atol=1e-15)


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(0)
    p = {"w": P(rng.normal(size=(3, 3)))}
    before = p["w"].data.copy()
    st = AdamState(lr=0.0)
    for _ in range(5):
        nm.adam_step(p, {"w": rng.normal(size=(3, 3))}, st)
    assert np.array_equal(p["w"].data, before) and st.step == 5


def test_adam_shape_mismatch():
    with pytest.raises(nm.ShapeError):
        nm.adam_step({"w": P([1.0, 2.0])}, {"w": np.zeros(3)}, AdamState())


# ---------------------------------------------------------------- params


def test_model_params_json_round_trip(tmp_path):
    mp = ModelParams(config={"gcn_layers": 4})
    mp.add("w", np.arange(6.0).reshape(2, 3))
    mp.add_batch_norm("bn", 3)
    mp.buffers["bn"]["running_mean"][:] = [1, 2, 3]
    mp.save(tmp_path / "m.json")
    back = ModelParams.load(tmp_path / "m.json")
    assert back.config == {"gcn_layers": 4}
    assert np.array_equal(back["w"].data, mp["w"].data)
    assert np.array_equal(back.buffers["bn"]["running_mean"], [1, 2, 3])
    assert back["w"].requires_grad


def test_model_params_rejects_bad_documents():
    with pytest.raises(ValueError, match="format_version"):
        ModelParams.from_json({"format_version": 99, "params": {}})
    with pytest.raises(ValueError, match="shape"):
        ModelParams.from_json({"format_version": 1, "params": {"w": {"shape": [2, 2], "data": [1.0]}}})


def test_check_finite_mode_raises():
    x = P([1000.0])
    with Tape(check_finite=True):
        with pytest.raises(nm.NonFiniteError):
            nm.exp(x)
