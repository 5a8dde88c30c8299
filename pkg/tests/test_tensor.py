import io
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caga import tensor as T
from caga.errors import ContractError, NumericError, ParseError, ShapeError

from conftest import leaf, weighted_sum

TOL = 1e-4


def test_forward_values_match_numpy(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta, tb = T.Tensor(a), T.Tensor(b)
    np.testing.assert_allclose((ta @ tb).data, a @ b)
    np.testing.assert_allclose((ta + 1.5).data, a + 1.5)
    np.testing.assert_allclose((2.0 - ta).data, 2.0 - a)
    np.testing.assert_allclose((ta * ta).data, a * a)
    np.testing.assert_allclose((-ta).data, -a)
    np.testing.assert_allclose(T.relu(ta).data, np.maximum(a, 0))
    np.testing.assert_allclose(ta.sum(axis=1).data, a.sum(axis=1))
    np.testing.assert_allclose(ta.mean().data, a.mean())


UNARY = {
    "exp": (T.exp, None),
    "log": (T.log, (0.5, 2.0)),
    "relu": (T.relu, None),
    "power": (lambda x: T.power(x, 1.7), (0.5, 2.0)),
    "softmax_rows": (T.softmax_rows, None),
    "transpose": (T.transpose, None),
    "sum": (lambda x: T.sum_(x, axis=-1, keepdims=True), None),
    "mean": (lambda x: T.mean(x, axis=0), None),
    "scale": (lambda x: T.scale(x, -0.3), None),
    "reshape": (lambda x: T.reshape(x, (-1,)), None),
    "slice": (lambda x: x[..., :1], None),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(rows=st.integers(1, 5), cols=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_unary_gradients(name, rows, cols, seed):
    fn, bounds = UNARY[name]
    r = np.random.default_rng(seed)
    x = leaf(r, rows, cols) if bounds is None else leaf(r, rows, cols, low=bounds[0], high=bounds[1])
    if name == "relu":
        x.data += np.where(x.data >= 0, 0.05, -0.05)
    assert T.gradcheck(weighted_sum(lambda t: fn(t[0]), [x]), [x]) < TOL


@given(shape=st.sampled_from([((2, 3), (1, 3)), ((2, 3), (2, 1)), ((4,), (3, 4)), ((2, 1, 3), (1, 4, 1))]),
       op=st.sampled_from(["add", "sub", "mul"]), seed=st.integers(0, 1000))
def test_broadcast_binary_gradients(shape, op, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r, *shape[0]), leaf(r, *shape[1])
    fn = getattr(T, op)
    assert T.gradcheck(weighted_sum(lambda t: fn(t[0], t[1]), [a, b]), [a, b]) < TOL


def test_matmul_batched_gradient(rng):
    a, b = leaf(rng, 3, 2, 4), leaf(rng, 3, 4, 5)
    assert T.gradcheck(weighted_sum(lambda t: T.matmul(t[0], t[1]), [a, b]), [a, b]) < TOL


def test_concat_permute_slice_axis_gradients(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 1, 4)

    def build(t):
        joined = T.concat([t[0], t[1]], axis=1)
        return T.slice_axis(T.permute(joined, (2, 0, 1)), 2, 1, 4)

    assert T.gradcheck(weighted_sum(build, [a, b]), [a, b]) < TOL


def test_division_gradient(rng):
    a, b = leaf(rng, 3, 3), leaf(rng, 3, 3, low=0.5, high=2.0)
    assert T.gradcheck(weighted_sum(lambda t: t[0] / t[1], [a, b]), [a, b]) < TOL


def test_reused_input_accumulates(rng):
    x = leaf(rng, 4)
    with T.ComputationTape():
        y = T.sum_(T.mul(x, x))
        T.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_twice_accumulates(rng):
    x = leaf(rng, 3)
    for _ in range(2):
        with T.ComputationTape():
            T.backward(T.sum_(x))
    np.testing.assert_allclose(x.grad, 2 * np.ones(3))


def test_intermediate_gradients_are_available(rng):
    x = leaf(rng, 3)
    with T.ComputationTape():
        h = T.exp(x)
        T.backward(T.sum_(h))
    np.testing.assert_allclose(h.grad, np.ones(3))


def test_backward_requires_scalar(rng):
    x = leaf(rng, 3)
    with T.ComputationTape():
        with pytest.raises(ContractError):
            T.backward(T.exp(x))


def test_backward_without_tape_record_fails():
    with pytest.raises(ContractError):
        T.backward(T.Tensor(1.0))


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with T.ComputationTape() as tape:
        with T.no_grad():
            y = T.exp(x)
        assert len(tape) == 0
        assert not y.requires_grad


def test_tape_reset_and_ops(rng):
    x = leaf(rng, 2)
    with T.ComputationTape() as tape:
        T.sum_(T.exp(x))
        assert tape.ops() == ["exp", "sum"]
        tape.reset()
        assert len(tape) == 0


def test_tape_is_thread_confined(rng):
    x = leaf(rng, 2)
    tape = T.ComputationTape()
    errors = []

    def worker():
        try:
            with tape:
                T.exp(x)
        except ContractError as exc:
            errors.append(exc)

    th = threading.Thread(target=worker)
    th.start()
    th.join()
    assert errors


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        T.Tensor([1.0, 2.0]).item()


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        T.softmax_rows(T.Tensor([[0.0, np.inf]]))


def test_softmax_rows_sum_to_one_and_are_shift_invariant(rng):
    x = rng.normal(size=(4, 6)) * 50
    p = T.softmax_rows(T.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(T.softmax_rows(T.Tensor(x + 1000.0)).data, p, atol=1e-12)


def test_log_domain_error():
    with pytest.raises(NumericError):
        T.log(T.Tensor([1.0, 0.0]))


@given(shape=st.lists(st.integers(0, 4), min_size=0, max_size=4), f32=st.booleans(), seed=st.integers(0, 99))
def test_tnsr_round_trip(shape, f32, seed):
    arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32 if f32 else np.float64)
    buf = io.BytesIO()
    T.write_tnsr(buf, arr)
    raw = buf.getvalue()
    assert raw[:4] == b"TNSR" and raw[4] == 1 and raw[5] == (0 if f32 else 1) and raw[6] == len(shape)
    back = T.read_tnsr(io.BytesIO(raw))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_tnsr_layout_is_little_endian_row_major():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = io.BytesIO()
    T.write_tnsr(buf, arr)
    raw = buf.getvalue()
    assert raw[7:15] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[15:] == arr.astype("<f4").tobytes()


@pytest.mark.parametrize("raw, message", [
    (b"TNSX\x01\x01\x00", "magic"),
    (b"TNSR\x02\x01\x00", "version"),
    (b"TNSR\x01\x07\x00", "dtype"),
    (b"TNSR\x01\x01\x01\x02\x00", "shape"),
    (b"TNSR\x01\x01\x01\x02\x00\x00\x00" + b"\x00" * 8, "payload"),
])
def test_tnsr_errors(raw, message):
    with pytest.raises(ParseError, match=message):
        T.read_tnsr(io.BytesIO(raw), "x.tnsr")


def test_gradcheck_rejects_single_precision():
    x = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        T.gradcheck(lambda: T.sum_(x), [x])


def test_gradcheck_detects_wrong_rule(rng):
    x = leaf(rng, 3)

    def bad_square(t):
        return T.make_result(t.data ** 2, [t], lambda g: (g * t.data,), "bad_square")

    assert T.gradcheck(lambda: T.sum_(bad_square(x)), [x]) > 0.1


def test_precision_env(monkeypatch):
    monkeypatch.setenv("CAGA_PRECISION", "f32")
    assert T._dtype_from_env() == np.float32
    monkeypatch.setenv("CAGA_PRECISION", "f16")
    with pytest.raises(ContractError):
        T._dtype_from_env()
