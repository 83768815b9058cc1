import numpy as np
import pytest

from sparsewm import diffkernel as dk
from sparsewm.errors import DegenerateInputError, DimensionError, FormatError, MaskError, TrainingAborted

EPS = 1e-3
TOL = 1e-4


def random_shape(rng, ndim):
    return tuple(int(v) for v in rng.integers(2, 5, size=ndim))


def grad_check(fn, arrays, seed=0):
    '''compares backward() against central differences of sum(fn(...) * R)'''
    tensors = [dk.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with dk.Graph() as g:
        out = fn(*tensors)
        R = np.random.default_rng(seed).standard_normal(out.shape)
        loss = dk.sum(dk.mul(out, R))
        g.backward(loss)

    def value(vals):
        return float((fn(*[dk.Tensor(v) for v in vals]).data * R).sum())

    for i, t in enumerate(tensors):
        num = np.zeros_like(arrays[i], dtype=np.float64)
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.astype(np.float64).copy() for a in arrays]
            minus = [a.astype(np.float64).copy() for a in arrays]
            plus[i][idx] += EPS
            minus[i][idx] -= EPS
            num[idx] = (value(plus) - value(minus)) / (2 * EPS)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
        assert err <= TOL, "input %d: relative error %g" % (i, err)


@pytest.mark.parametrize('seed', range(20))
def test_grad_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = random_shape(rng, 2)
    a, b = rng.standard_normal(shape), rng.standard_normal(shape[-1:])
    grad_check(lambda x, y: dk.add(x, y), [a, b])
    grad_check(lambda x, y: dk.sub(x, y), [a, b])
    grad_check(lambda x, y: dk.mul(x, y), [a, b])


@pytest.mark.parametrize('seed', range(20))
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    n, k, m = (int(v) for v in rng.integers(2, 5, size=3))
    grad_check(dk.matmul, [rng.standard_normal((2, n, k)), rng.standard_normal((k, m))])


@pytest.mark.parametrize('seed', range(20))
def test_grad_shape_ops(seed):
    rng = np.random.default_rng(seed)
    shape = random_shape(rng, 3)
    x = rng.standard_normal(shape)
    grad_check(lambda a: dk.reshape(a, (shape[0], -1)), [x])
    grad_check(lambda a: dk.transpose(a, (2, 0, 1)), [x])
    grad_check(lambda a, b: dk.concat([a, b], axis=1), [x, rng.standard_normal(shape)])
    idx = rng.integers(0, shape[1], size=5)
    grad_check(lambda a: dk.take(a, idx, axis=1), [x])
    grad_check(lambda a: dk.mean(a, axis=-1, keepdims=True), [x])


@pytest.mark.parametrize('seed', range(20))
def test_grad_layernorm_gelu(seed):
    rng = np.random.default_rng(seed)
    shape = random_shape(rng, 2)
    x = rng.standard_normal(shape)
    g = rng.standard_normal(shape[-1])
    b = rng.standard_normal(shape[-1])
    grad_check(dk.layernorm, [x, g, b])
    grad_check(dk.gelu, [x * 2])


@pytest.mark.parametrize('seed', range(20))
def test_grad_masked_attention(seed):
    rng = np.random.default_rng(seed)
    L, d = (int(v) for v in rng.integers(2, 5, size=2))
    mask = rng.random((L, L)) < 0.6
    np.fill_diagonal(mask, True)
    q, k, v = (rng.standard_normal((2, L, d)) for _ in range(3))
    grad_check(lambda a, b, c: dk.masked_attention(a, b, c, mask), [q, k, v])


@pytest.mark.parametrize('seed', range(20))
def test_grad_dropout_and_token_mse(seed):
    rng = np.random.default_rng(seed)
    shape = random_shape(rng, 3)
    x = rng.standard_normal(shape)
    grad_check(lambda a: dk.dropout(a, 0.3, np.random.default_rng(seed)), [x])
    grad_check(lambda a, b: dk.token_mse(a, b), [x, rng.standard_normal(shape)])


def test_masked_attention_forbidden_weights_vanish():
    rng = np.random.default_rng(1)
    mask = np.tril(np.ones((5, 5), dtype=bool))
    record = []
    dk.masked_attention(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)),
                        rng.standard_normal((5, 3)), mask, record=record)
    w = record[0]
    assert np.all(w[~mask] <= 1e-12)
    assert np.allclose(w.sum(axis=-1), 1.0)


def test_masked_attention_all_masked_row():
    mask = np.ones((3, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(MaskError):
        dk.masked_attention(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), mask)


def test_layernorm_needs_two_features():
    with pytest.raises(DegenerateInputError):
        dk.layernorm(np.ones((3, 1)), np.ones(1), np.zeros(1))


def test_matmul_reports_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\) x \(4, 2\)"):
        dk.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_backward_needs_scalar():
    x = dk.Tensor(np.ones(3), requires_grad=True)
    with dk.Graph() as g:
        y = dk.mul(x, 2.0)
        with pytest.raises(DimensionError):
            g.backward(y)


def test_no_recording_outside_graph():
    x = dk.Tensor(np.ones(3), requires_grad=True)
    y = dk.mul(x, 2.0)
    assert not y.requires_grad
    assert y._backward is None


def test_adam_first_step_moves_by_lr():
    p = {'w': dk.Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    st = dk.AdamState(lr=0.1)
    dk.adam_step(p, {'w': np.array([3.0, -0.5])}, st)
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(p['w'].data, [0.9, -0.9], atol=1e-6)
    assert st.step == 1


def test_adam_rejects_nan_and_bad_shapes():
    p = {'w': dk.Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(TrainingAborted, match="w"):
        dk.adam_step(p, {'w': np.array([np.nan, 0.0])}, dk.AdamState())
    with pytest.raises(DimensionError):
        dk.adam_step(p, {'w': np.zeros(3)}, dk.AdamState())


def test_container_keeps_dtype_and_meta(tmp_path):
    tensors = {'a': np.arange(6, dtype=np.float32).reshape(2, 3), 'b': np.array([1.5, -2.0])}
    path = str(tmp_path / "t.spwm")
    dk.save_tensors(path, tensors, {'kind': 'test'})
    loaded, meta = dk.load_tensors(path)
    assert list(loaded) == ['a', 'b']
    assert loaded['a'].dtype == np.float32
    assert np.array_equal(loaded['a'], tensors['a'])
    assert meta == {'kind': 'test'}


def test_container_rejects_garbage():
    with pytest.raises(FormatError):
        dk.parse_tensors(b'not a container at all')
    blob = dk.dump_tensors({'a': np.zeros(10)})
    with pytest.raises(FormatError):
        dk.parse_tensors(blob[:-8])


def test_adam_zero_gradient_keeps_params():
    w0 = np.array([[0.5, -2.0], [3.0, 0.0]])
    p = {'w': dk.Tensor(w0.copy(), requires_grad=True)}
    st = dk.AdamState(lr=0.1)
    for _ in range(5):
        dk.adam_step(p, {'w': np.zeros_like(w0)}, st)
    assert np.array_equal(p['w'].data, w0)


def test_adam_descends_quadratic_bowl():
    w = dk.Tensor(np.array([2.0, -3.0]), requires_grad=True)
    st = dk.AdamState(lr=1e-2)
    losses = []
    for _ in range(100):
        w.grad = None
        with dk.Graph() as g:
            loss = dk.sum(dk.mul(w, w))
            g.backward(loss)
        losses.append(float(loss.data))
        dk.adam_step({'w': w}, {'w': w.grad}, st)
    assert np.all(np.diff(losses) < 0)


def test_layernorm_constant_row_is_zero():
    x = np.full((2, 5), 3.7)
    out = dk.layernorm(x, np.ones(5), np.zeros(5))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_attention_over_one_key_returns_its_value():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((1, 4))
    out = dk.masked_attention(rng.standard_normal((3, 2)), rng.standard_normal((1, 2)), v,
                              np.ones((3, 1), dtype=bool))
    assert np.array_equal(out.data, np.repeat(v, 3, axis=0))
