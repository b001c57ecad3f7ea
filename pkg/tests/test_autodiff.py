"""Tensor engine: forward values, gradients vs finite differences, Adam."""

import numpy as np
import pytest

from agecache.autodiff import (Adam, AllMaskedError, MissingGradientError,
                               NonScalarRootError, ParameterSet,
                               ShapeMismatchError, Tensor, concat, mask,
                               masked_softmax, matmul, select_rows,
                               softmax_rows, no_grad)

from conftest import away_from_zero, fd_grad, grad_error

FD_TOL = 1e-4
TRIALS = 100


# ---- forward hand cases -------------------------------------------------------


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_softmax_symmetry():
    out = softmax_rows(Tensor([[0.0, 0.0]]))
    assert out.data.tolist() == [[0.5, 0.5]]


def test_relu_definition():
    assert Tensor([-1.0, 2.0]).relu().data.tolist() == [0.0, 2.0]


def test_matmul_shape_error_names_op():
    with pytest.raises(ShapeMismatchError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_requires_scalar_root():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NonScalarRootError):
        (t * 2.0).backward()


def test_scale_gradient_is_linear():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    (x * 3.0).sum().backward()
    assert np.array_equal(x.grad, np.full((2, 3), 3.0))


def test_sigmoid_gradient_at_zero():
    w = Tensor(0.0, requires_grad=True)
    w.sigmoid().sum().backward()
    assert abs(w.grad - 0.25) < 1e-15


# ---- finite-difference sweep over every op ------------------------------------

def _check(op_builder, x0: np.ndarray):
    """Analytic grad of sum(op(x)) vs central differences."""
    def value(arr):
        return float(op_builder(Tensor(arr)).sum().data)

    x = Tensor(x0.copy(), requires_grad=True)
    op_builder(x).sum().backward()
    numeric = fd_grad(value, x0.copy())
    assert grad_error(x.grad, numeric) < FD_TOL


OP_CASES = {
    "add": lambda t: t + Tensor(np.linspace(-1, 1, t.size).reshape(t.shape)),
    "add_bias_broadcast": lambda t: t + Tensor(np.linspace(-1, 1, t.shape[-1])),
    "sub": lambda t: t - Tensor(np.linspace(1, 2, t.size).reshape(t.shape)),
    "mul": lambda t: t * Tensor(np.linspace(0.5, 1.5, t.size).reshape(t.shape)),
    "scale": lambda t: t * -1.7,
    "neg": lambda t: -t,
    "relu": lambda t: t.relu(),
    "tanh": lambda t: t.tanh(),
    "sigmoid": lambda t: t.sigmoid(),
    "cos": lambda t: t.cos(),
    "clip": lambda t: t.clip(-0.5, 0.5),
    "sum_axis": lambda t: t.sum(axis=1) * 2.0,
    "mean": lambda t: t.mean(),
    "reshape": lambda t: t.reshape((t.size,)) * 1.3,
    "transpose": lambda t: t.mT * 0.7,
    "softmax": lambda t: softmax_rows(t) * Tensor(np.linspace(0, 1, t.size).reshape(t.shape)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    builder = OP_CASES[name]
    for _ in range(TRIALS):
        x0 = away_from_zero(rng, (3, 4))
        _check(builder, x0)


def test_matmul_gradients_both_sides(rng):
    for _ in range(TRIALS):
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4, 2))

        a = Tensor(a0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        (a @ b).sum().backward()
        na = fd_grad(lambda arr: float((Tensor(arr) @ Tensor(b0)).sum().data), a0.copy())
        nb = fd_grad(lambda arr: float((Tensor(a0) @ Tensor(arr)).sum().data), b0.copy())
        assert grad_error(a.grad, na) < FD_TOL
        assert grad_error(b.grad, nb) < FD_TOL


def test_batched_matmul_shared_weight_gradient(rng):
    for _ in range(20):
        a0 = rng.normal(size=(5, 3, 4))
        w0 = rng.normal(size=(4, 2))
        w = Tensor(w0.copy(), requires_grad=True)
        (Tensor(a0) @ w).sum().backward()
        nw = fd_grad(lambda arr: float((Tensor(a0) @ Tensor(arr)).sum().data), w0.copy())
        assert grad_error(w.grad, nw) < FD_TOL


def test_log_gradient(rng):
    for _ in range(TRIALS):
        x0 = 0.1 + rng.random((3, 4))
        x = Tensor(x0.copy(), requires_grad=True)
        x.log().sum().backward()
        numeric = fd_grad(lambda arr: float(Tensor(arr).log().sum().data), x0.copy())
        assert grad_error(x.grad, numeric) < FD_TOL


def test_concat_gradient(rng):
    a0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=(2, 2))
    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    scale = Tensor(np.linspace(0, 1, 10).reshape(2, 5))
    (concat([a, b], axis=1) * scale).sum().backward()
    na = fd_grad(lambda arr: float((concat([Tensor(arr), Tensor(b0)], axis=1) * scale).sum().data), a0.copy())
    nb = fd_grad(lambda arr: float((concat([Tensor(a0), Tensor(arr)], axis=1) * scale).sum().data), b0.copy())
    assert grad_error(a.grad, na) < FD_TOL
    assert grad_error(b.grad, nb) < FD_TOL


def test_select_rows_accumulates_duplicates():
    x = Tensor(np.arange(6, dtype=float).reshape(3, 2), requires_grad=True)
    select_rows(x, np.array([0, 0, 2])).sum().backward()
    assert x.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]


# ---- softmax and mask invariants ------------------------------------------------


def test_softmax_rows_sum_to_one(rng):
    for _ in range(TRIALS):
        x = rng.normal(scale=5.0, size=(4, 7))
        out = softmax_rows(Tensor(x)).data
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)
        assert np.all(out > 0.0) and np.all(out <= 1.0)


def test_masked_softmax_rows_sum_to_one_over_kept(rng):
    for _ in range(TRIALS):
        x = rng.normal(scale=4.0, size=(3, 6))
        keep = rng.random((3, 6)) < 0.6
        keep[:, 0] = True
        out = masked_softmax(Tensor(x), keep).data
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)
        assert np.all(out[~keep] == 0.0)


def test_masked_softmax_masked_positions_get_zero_gradient(rng):
    x0 = rng.normal(size=(2, 5))
    keep = np.array([[True, False, True, True, False],
                     [True, True, False, False, False]])
    x = Tensor(x0, requires_grad=True)
    (masked_softmax(x, keep) * Tensor(rng.normal(size=(2, 5)))).sum().backward()
    assert np.all(x.grad[~keep] == 0.0)


def test_masked_softmax_all_masked_raises():
    with pytest.raises(AllMaskedError):
        masked_softmax(Tensor(np.zeros((2, 3))), np.zeros((2, 3), dtype=bool))


def test_mask_zero_gradient_at_masked_positions(rng):
    x0 = rng.normal(size=(3, 4))
    keep = (rng.random((3, 4)) < 0.5).astype(float)
    x = Tensor(x0, requires_grad=True)
    (mask(x, keep) * Tensor(rng.normal(size=(3, 4)))).sum().backward()
    assert np.all(x.grad[keep == 0.0] == 0.0)


def test_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        mask(Tensor(np.ones((2, 2))), np.full((2, 2), 0.5))


# ---- three-layer MLP end-to-end gradient ----------------------------------------


def test_random_mlp_matches_finite_differences(rng):
    def forward(w1, w2, w3, x):
        h1 = (Tensor(x) @ w1).tanh()
        h2 = (h1 @ w2).sigmoid()
        return (h2 @ w3).sum()

    for _ in range(10):
        x = rng.normal(size=(4, 5))
        mats = [rng.normal(size=s) for s in ((5, 6), (6, 4), (4, 2))]
        tensors = [Tensor(m.copy(), requires_grad=True) for m in mats]
        forward(*tensors, x).backward()
        for i in range(3):
            def value(arr, i=i):
                args = [Tensor(m) for m in mats]
                args[i] = Tensor(arr)
                return float(forward(*args, x).data)
            numeric = fd_grad(value, mats[i].copy())
            assert grad_error(tensors[i].grad, numeric) < FD_TOL


def test_backward_determinism_bit_identical(rng):
    x0 = rng.normal(size=(6, 5))
    w0 = rng.normal(size=(5, 3))

    def run():
        w = Tensor(w0.copy(), requires_grad=True)
        loss = ((Tensor(x0) @ w).tanh().sigmoid()).sum()
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_no_grad_blocks_graph():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        out = (w * 2.0).sum()
    assert out._backward is None and not out.requires_grad


# ---- Adam -----------------------------------------------------------------------


def _single_param(value):
    params = ParameterSet()
    p = params.add("p", np.array(value))
    return params, p


def test_adam_first_step_matches_formula():
    # one step with g=1: m_hat=1, v_hat=1 -> delta = -lr / (1 + eps)
    params, p = _single_param([1.0])
    opt = Adam(params, learning_rate=1e-4)
    p.grad = np.array([1.0])
    opt.step()
    expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8))
    assert abs(p.data[0] - expected) < 1e-18
    assert p.grad is None
    assert opt.step_count == 1


def test_adam_zero_gradient_keeps_param_and_moments():
    params, p = _single_param([2.5])
    opt = Adam(params)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 2.5
    assert opt.first_moment["p"][0] == 0.0
    assert opt.second_moment["p"][0] == 0.0
    assert opt.step_count == 1


def test_adam_two_steps_exponential_averages():
    # g then -g: m2 = b1*(1-b1)*g + (1-b1)*(-g); v2 = (b2*(1-b2) + (1-b2))*g^2
    g = 0.7
    params, p = _single_param([0.0])
    opt = Adam(params, learning_rate=1e-4)
    p.grad = np.array([g])
    opt.step()
    p.grad = np.array([-g])
    opt.step()
    b1, b2 = 0.9, 0.999
    m2 = b1 * (1 - b1) * g + (1 - b1) * (-g)
    v2 = b2 * (1 - b2) * g * g + (1 - b2) * g * g
    assert abs(opt.first_moment["p"][0] - m2) < 1e-15
    assert abs(opt.second_moment["p"][0] - v2) < 1e-15
    assert opt.step_count == 2


def test_adam_missing_gradient_lists_names():
    params = ParameterSet()
    params.add("alpha", np.zeros(2))
    beta = params.add("beta", np.zeros(2))
    opt = Adam(params)
    beta.grad = np.zeros(2)
    with pytest.raises(MissingGradientError) as err:
        opt.step()
    assert err.value.names == ["alpha"]


def test_adam_step_descends_on_quadratic(rng):
    params = ParameterSet()
    w = params.uniform("w", (4,), rng)
    opt = Adam(params, learning_rate=0.05)
    target = np.array([1.0, -2.0, 0.5, 3.0])
    for _ in range(400):
        diff = w - Tensor(target)
        loss = (diff * diff).sum()
        loss.backward()
        opt.step()
    assert np.max(np.abs(w.data - target)) < 0.05


# ---- checkpoint round-trip -------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    params = ParameterSet()
    params.uniform("a", (3, 2), rng)
    params.uniform("b", (4,), rng)
    path = str(tmp_path / "ckpt.json")
    params.save(path, meta={"note": 1})
    before = params.state_arrays()

    fresh = ParameterSet()
    fresh.add("a", np.zeros((3, 2)))
    fresh.add("b", np.zeros(4))
    meta = fresh.load(path)
    assert meta == {"note": 1}
    for name, arr in before.items():
        assert np.array_equal(fresh[name].data, arr)


def test_checkpoint_shape_mismatch_rejected(tmp_path, rng):
    params = ParameterSet()
    params.uniform("a", (3, 2), rng)
    path = str(tmp_path / "ckpt.json")
    params.save(path)
    other = ParameterSet()
    other.add("a", np.zeros((2, 3)))
    with pytest.raises(ShapeMismatchError):
        other.load(path)
