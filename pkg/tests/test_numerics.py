import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointppo import numerics as nx
from jointppo.numerics import Adam, AdamState, Tape, Tensor, adam_step


def param(data):
    return Tensor(np.array(data, dtype=float), requires_grad=True)


def central_diff(f, x: np.ndarray, h=1e-5):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(fn, *params):
    with Tape() as tape:
        loss = fn()
    tape.backward(loss, params)
    return [p.grad.copy() for p in params]


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# ------------------------------------------------------------------ matmul


def test_matmul_identity_and_hand_arithmetic():
    out = nx.matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(nx.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_sum_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    ga, gb = analytic_grad(lambda: (a @ b).sum(), a, b)
    # d sum(AB) / dA = row-broadcast column sums of B
    np.testing.assert_allclose(ga, np.tile(b.data.sum(axis=1), (3, 1)), rtol=1e-12)
    fd_a = central_diff(lambda: (a.data @ b.data).sum(), a.data)
    fd_b = central_diff(lambda: (a.data @ b.data).sum(), b.data)
    assert rel_err(ga, fd_a) < 1e-6
    assert rel_err(gb, fd_b) < 1e-6


def test_batched_matmul_against_shared_weight_gradient():
    rng = np.random.default_rng(1)
    x, w = param(rng.normal(size=(5, 3, 4))), param(rng.normal(size=(4, 2)))
    target = rng.normal(size=(5, 3, 2))
    gx, gw = analytic_grad(lambda: ((x @ w) * target).sum(), x, w)
    assert rel_err(gw, central_diff(lambda: ((x.data @ w.data) * target).sum(), w.data)) < 1e-6
    assert rel_err(gx, central_diff(lambda: ((x.data @ w.data) * target).sum(), x.data)) < 1e-6


# ------------------------------------------------------------------ softmax


def test_softmax_examples():
    np.testing.assert_array_equal(nx.softmax(np.zeros(2)).data, [0.5, 0.5])
    np.testing.assert_array_equal(nx.softmax(np.array([10.0, 0.0]), np.array([True, False])).data, [1.0, 0.0])


def test_softmax_matches_high_precision_evaluation():
    out = nx.softmax(np.array([1.0, 2.0, 3.0])).data
    with mpmath.workdps(50):
        e = [mpmath.exp(v) for v in (1, 2, 3)]
        ref = [float(v / sum(e)) for v in e]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_softmax_all_masked_row_rejected():
    with pytest.raises(nx.InvalidMaskError):
        nx.softmax(np.zeros((2, 3)), np.array([[True, False, False], [False, False, False]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_softmax_rows_normalised_and_masked_entries_inert(seed, k):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(scale=5, size=(4, k)))
    mask = rng.random((4, k)) < 0.6
    mask[:, 0] |= ~mask.any(axis=1)
    w = rng.normal(size=(4, k))
    with Tape() as tape:
        p = nx.softmax(x, mask)
        loss = (p * w).sum()
    tape.backward(loss)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-9)
    assert (p.data[~mask] == 0.0).all()
    assert (x.grad[~mask] == 0.0).all()


def test_log_softmax_gradient():
    rng = np.random.default_rng(3)
    x = param(rng.normal(size=(3, 4)))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    w = rng.normal(size=(3, 4))
    (g,) = analytic_grad(lambda: (nx.log_softmax(x, mask) * w).sum(), x)
    fd = central_diff(lambda: (nx.log_softmax(x.data, mask).data * w).sum(), x.data)
    assert rel_err(g, fd) < 1e-6
    assert (g[~mask] == 0).all()


# ------------------------------------------------------------------ layer norm


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(nx.layer_norm(np.array([5.0, 5.0, 5.0]), one, zero).data, [0, 0, 0])
    np.testing.assert_array_equal(nx.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)).data, [1, -1])


def test_layer_norm_statistics():
    rng = np.random.default_rng(4)
    out = nx.layer_norm(rng.normal(size=4), np.ones(4), np.zeros(4)).data
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    x, g, b = param(rng.normal(size=(3, 5))), param(rng.normal(size=5)), param(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    grads = analytic_grad(lambda: (nx.layer_norm(x, g, b) * w).sum(), x, g, b)
    f = lambda: (nx.layer_norm(x.data, g.data, b.data).data * w).sum()  # noqa: E731
    for an, arr in zip(grads, (x.data, g.data, b.data)):
        assert rel_err(an, central_diff(f, arr)) < 1e-6


@pytest.mark.parametrize("op", ["gelu", "tanh", "exp", "square"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(6)
    x = param(rng.normal(size=(4, 3)))
    fn = getattr(nx, op)
    (g,) = analytic_grad(lambda: fn(x).sum(), x)
    assert rel_err(g, central_diff(lambda: fn(x.data).data.sum(), x.data)) < 1e-6


def test_gather_and_transpose_gradients():
    rng = np.random.default_rng(7)
    x = param(rng.normal(size=(2, 3, 4)))
    idx = np.array([[[1], [1], [3]], [[0], [2], [2]]])
    w = rng.normal(size=(3, 2, 1))
    f = lambda t: (nx.take(t, idx, axis=2).transpose(1, 0, 2) * w).sum()  # noqa: E731
    (g,) = analytic_grad(lambda: f(x), x)
    assert rel_err(g, central_diff(lambda: f(Tensor(x.data)).item(), x.data)) < 1e-6


# ------------------------------------------------------------------ backward


def test_backward_examples():
    p = param(np.arange(4.0))
    (g,) = analytic_grad(lambda: p.sum(), p)
    np.testing.assert_array_equal(g, np.ones(4))
    (g,) = analytic_grad(lambda: (p * p).sum(), p)
    np.testing.assert_array_equal(g, 2 * p.data)


def test_backward_rejects_non_scalar_and_zeros_unreached():
    p, q = param(np.ones(3)), param(np.ones(2))
    with Tape() as tape:
        out = p * 2.0
    with pytest.raises(nx.ContractError):
        tape.backward(out)
    with Tape() as tape:
        loss = (p * 2.0).sum()
    tape.backward(loss, [p, q])
    np.testing.assert_array_equal(q.grad, np.zeros(2))


def test_tape_records_in_topological_order():
    p = param(np.ones(3))
    with Tape() as tape:
        a = p * 2.0
        b = nx.exp(a)
        (a + b).sum()
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    assert p.node_id in tape.parameter_ids


def test_no_tape_means_no_graph():
    p = param(np.ones(2))
    out = p * 3.0
    assert not out.requires_grad and out._backward is None


def test_forward_and_backward_deterministic():
    rng = np.random.default_rng(8)
    x, w = rng.normal(size=(4, 3)), param(rng.normal(size=(3, 3)))
    results = []
    for _ in range(2):
        with Tape() as tape:
            loss = nx.gelu(nx.layer_norm(x @ w, np.ones(3), np.zeros(3))).sum()
        tape.backward(loss, [w])
        results.append((loss.data.tobytes(), w.grad.tobytes()))
    assert results[0] == results[1]


# ------------------------------------------------------------------ adam


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = param(np.array([1.0, -2.0]))
    state = AdamState.for_params([p], lr=0.1)
    state.first_moment[0][:] = 1.0
    state.second_moment[0][:] = 1.0
    adam_step([p], [np.zeros(2)], state)
    # a nonzero first moment still moves the parameter; check moments decay
    np.testing.assert_allclose(state.first_moment[0], 0.9)
    np.testing.assert_allclose(state.second_moment[0], 0.999)
    fresh = param(np.array([1.0, -2.0]))
    st2 = AdamState.for_params([fresh], lr=0.1)
    adam_step([fresh], [np.zeros(2)], st2)
    np.testing.assert_array_equal(fresh.data, [1.0, -2.0])
    assert st2.step_count == 1


def test_adam_scalar_reference_trace():
    p = param(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    # reference computed by hand: m=0.1, v=0.001, m_hat=1, v_hat=1
    m, v = 0.1 * 1.0, 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)
    assert opt.state.step_count == 1


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    total = nx.clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert np.sqrt(sum((g**2).sum() for g in grads)) == pytest.approx(1.0)


# ------------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(9)
    params = {"a.w": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    nx.save_params(tmp_path / "p.json", params, {"k": 1})
    loaded, meta = nx.load_params(tmp_path / "p.json")
    assert meta == {"k": 1}
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(nx.CheckpointError):
        nx.load_params(tmp_path / "x.json")
