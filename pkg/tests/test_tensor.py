import io
import struct

import numpy as np
import pytest

from ppibench import tensor as T
from ppibench.gradcheck import finite_difference_grads, max_relative_error
from ppibench.optim import (
    AdamState,
    CheckpointError,
    adam_step,
    read_checkpoint,
    write_checkpoint,
)
from ppibench.tensor import ShapeError, Tape, Tensor

from oracles import loop_matmul, loop_softmax


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# --- forward semantics


def test_matmul_identity_and_zero_add():
    a = Tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal((Tensor(np.eye(3)) @ a).data, a.data)
    assert np.array_equal((a + 0).data, a.data)


def test_matmul_matches_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    got = (Tensor(a.astype(np.float32)) @ Tensor(b.astype(np.float32))).data
    assert np.max(np.abs(got - loop_matmul(a, b))) < 1e-6


def test_batched_matmul():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    got = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        assert np.allclose(got[i], loop_matmul(a[i], b[i]), atol=1e-12)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 4\)"):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_broadcast_add_gradient_unbroadcasts():
    a, b = param(np.ones((3, 4))), param(np.ones(4))
    with Tape() as tape:
        loss = T.sum(a + b)
    grads = T.backward(tape, loss, {"a": a, "b": b})
    assert np.array_equal(grads["b"], np.full(4, 3.0))
    assert np.array_equal(grads["a"], np.ones((3, 4)))


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor(np.zeros(5))).data, 0.2)
    assert np.allclose(T.softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75], atol=1e-12)
    x = np.random.default_rng(2).normal(size=7)
    assert np.allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + 123.0)).data, atol=1e-6)
    assert np.allclose(T.softmax(Tensor(x)).data, loop_softmax(x), atol=1e-12)


def test_softmax_rows_normalized():
    x = Tensor(np.random.default_rng(3).normal(scale=5, size=(50, 9)).astype(np.float32))
    y = T.softmax(x, axis=1).data
    assert np.all(y > 0) and np.all(y < 1)
    assert np.max(np.abs(y.sum(axis=1) - 1)) < 1e-6


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert (Tensor(np.ones(2)) * 2).dtype == np.float64


def test_no_tape_no_record():
    p = param([1.0, 2.0])
    with Tape() as tape:
        T.sum(Tensor(np.ones(2)) * 3)
        assert len(tape) == 0
        T.sum(p * 3)
        assert len(tape) == 2


def test_tape_topological_order():
    p = param(np.ones(3))
    with Tape() as tape:
        T.sum(T.relu(p * 2 + 1))
    produced = set()
    for out, inputs, _ in tape.nodes:
        for i in inputs:
            assert i.requires_grad is False or i is p or id(i) in produced
        produced.add(id(out))


# --- backward


def test_backward_examples():
    p = param(np.array([1.0, -2.0, 3.0]))
    with Tape() as tape:
        loss = T.sum(p)
    assert np.array_equal(T.backward(tape, loss, {"p": p})["p"], np.ones(3))
    with Tape() as tape:
        loss = T.sum(p * p)
    assert np.array_equal(T.backward(tape, loss, {"p": p})["p"], 2 * p.data)


def test_backward_unused_param_gets_zero():
    p, q = param(np.ones(2)), param(np.ones(3))
    with Tape() as tape:
        loss = T.sum(p)
    assert np.array_equal(T.backward(tape, loss, {"p": p, "q": q})["q"], np.zeros(3))


def test_backward_requires_scalar():
    p = param(np.ones(2))
    with Tape() as tape:
        out = p * 2
    with pytest.raises(ShapeError):
        T.backward(tape, out)


def test_backward_sets_leaf_grad_without_params():
    p = param(np.array([3.0]))
    with Tape() as tape:
        loss = T.sum(p * p * p)
    T.backward(tape, loss)
    assert p.grad[0] == pytest.approx(27.0)


def _ops(rng):
    """(name, build(params) -> scalar loss, params) for every primitive."""
    a = lambda *s: param(rng.normal(size=s))  # noqa: E731
    pos = lambda *s: param(rng.uniform(0.5, 2.0, size=s))  # noqa: E731
    w = rng.normal(size=(3, 4))
    idx = rng.integers(0, 5, size=7)
    c = {k: Tensor(rng.normal(size=k)) for k in [(3, 2, 4), (6, 2), (2, 5), (2, 3), (7, 3)]}
    return [
        ("add", lambda x, y: T.sum((x + y) * (x + y)), [a(3, 4), a(4)]),
        ("sub", lambda x, y: T.sum((x - y) * (x - y)), [a(3, 4), a(3, 1)]),
        ("mul", lambda x, y: T.sum(x * y * x), [a(2, 3), a(2, 3)]),
        ("div", lambda x, y: T.sum(x / y), [a(2, 3), pos(2, 3)]),
        ("matmul", lambda x, y: T.sum(T.matmul(x, y) * T.matmul(x, y)), [a(3, 4), a(4, 2)]),
        ("bmm", lambda x, y: T.sum(T.matmul(x, y) * T.matmul(x, y) * 0.5), [a(2, 3, 4), a(2, 4, 2)]),
        ("transpose", lambda x: T.sum(T.transpose(x, (1, 0, 2)) * c[(3, 2, 4)]), [a(2, 3, 4)]),
        ("reshape", lambda x: T.sum(T.reshape(x, (6, 2)) * c[(6, 2)]), [a(3, 4)]),
        ("sum_axis", lambda x: T.sum(T.sum(x, axis=1) * T.sum(x, axis=1)), [a(3, 4)]),
        ("mean", lambda x: T.mean(x * x, axis=0, keepdims=True) @ Tensor(np.ones((4, 1))), [a(3, 4)]),
        ("relu", lambda x: T.sum(T.relu(x) * Tensor(w)), [param(np.sign(w) * rng.uniform(0.1, 1, (3, 4)))]),
        ("sqrt", lambda x: T.sum(T.sqrt(x)), [pos(3, 2)]),
        ("softmax", lambda x: T.sum(T.softmax(x, axis=0) * Tensor(w)), [a(3, 4)]),
        ("concat", lambda x, y: T.sum(T.concat([x, y], axis=1) * c[(2, 5)]), [a(2, 2), a(2, 3)]),
        ("stack", lambda x, y: T.sum(T.stack([x, y]) * c[(2, 3)]), [a(3), a(3)]),
        ("take_rows", lambda x: T.sum(T.take_rows(x, idx) * c[(7, 3)]), [a(5, 3)]),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, fn, ps in _ops(rng):
        named = {f"p{i}": p for i, p in enumerate(ps)}
        with Tape() as tape:
            loss = T.reshape(fn(*ps), ())
        analytic = T.backward(tape, loss, named)
        numeric = finite_difference_grads(lambda: T.reshape(fn(*ps), ()), named)
        assert max_relative_error(analytic, numeric) < 1e-4, name


def test_finite_difference_plain_two_point():
    p = param(np.array([0.7]))
    g = finite_difference_grads(lambda: T.sum(p * p * p), {"p": p}, extrapolate=False)
    assert g["p"][0] == pytest.approx(3 * 0.49 + 1e-6, abs=1e-9)


# --- Adam and schedule


def test_warmup_schedule():
    s = AdamState(base_lr=5e-4, warmup_steps=1000)
    assert s.lr_at(500) == pytest.approx(2.5e-4)
    assert s.lr_at(1000) == pytest.approx(5e-4)
    assert s.lr_at(5000) == pytest.approx(5e-4)


def test_linear_decay_to_zero():
    s = AdamState(base_lr=1.0, warmup_steps=10, total_steps=110)
    assert s.lr_at(10) == 1.0
    assert s.lr_at(60) == pytest.approx(0.5)
    assert s.lr_at(110) == 0.0 and s.lr_at(200) == 0.0


def test_adam_one_step_by_hand():
    p = Tensor(np.array([1.0]), requires_grad=True)
    s = AdamState(base_lr=1e-3, warmup_steps=0)
    adam_step(s, {"p": p}, {"p": np.array([1.0])})
    # m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_accumulation_averages():
    p1 = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p2 = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    s1, s2 = AdamState(warmup_steps=0), AdamState(warmup_steps=0)
    adam_step(s1, {"p": p1}, {"p": np.array([0.3, -0.8])})
    adam_step(s2, {"p": p2}, {"p": np.array([0.3, -0.8]) * 4}, accum_count=4)
    assert np.array_equal(p1.data, p2.data)
    assert np.allclose(s1.first_moment["p"], s2.first_moment["p"])


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    s = AdamState(warmup_steps=0)
    adam_step(s, {"p": p}, {"p": np.array([1.0, 1.0])})
    before = p.data.copy()
    m_before = s.first_moment["p"].copy()
    adam_step(s, {"p": p}, {"p": np.zeros(2)})
    assert np.allclose(s.first_moment["p"], 0.9 * m_before)
    # the decayed first moment still moves p; with a fresh state nothing moves
    fresh = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    adam_step(AdamState(warmup_steps=0), {"p": fresh}, {"p": np.zeros(2)})
    assert np.array_equal(fresh.data, [2.0, 3.0])
    assert not np.array_equal(before, p.data)


def test_adam_errors():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"p": p}, {"p": np.ones(3)})
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"p": p}, {"p": np.ones(2)}, accum_count=0)


def test_adam_moments_shaped_like_params():
    ps = {"a": Tensor(np.ones((2, 3)), requires_grad=True), "b": Tensor(np.ones(4), requires_grad=True)}
    s = AdamState()
    adam_step(s, ps, {k: np.ones_like(v.data) for k, v in ps.items()})
    assert all(s.first_moment[k].shape == ps[k].shape == s.second_moment[k].shape for k in ps)


# --- checkpoint format


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    params = {"a.w": rng.normal(size=(3, 2)).astype(np.float32), "b": np.float32(rng.normal(size=5)),
              "scalar": np.array(1.5, dtype=np.float32)}
    write_checkpoint(tmp_path / "c.ppib", params)
    back = read_checkpoint(tmp_path / "c.ppib")
    assert list(back) == list(params)
    for k in params:
        assert back[k].dtype == np.float32 and np.array_equal(back[k], params[k])


def test_checkpoint_layout():
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = buf.getvalue()
    expected = b"PPIB" + struct.pack("<II", 1, 1) + b"w" + struct.pack("<III", 2, 1, 2) + struct.pack("<2f", 1, 2)
    assert raw == expected


def test_checkpoint_errors():
    good = io.BytesIO()
    write_checkpoint(good, {"w": np.ones((2, 2), dtype=np.float32)})
    raw = good.getvalue()
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(raw[:10])
    assert read_checkpoint(raw[:8]) == {}
