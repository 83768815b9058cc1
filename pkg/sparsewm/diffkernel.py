# diffkernel.py -
#   a small reverse-mode differentiation kernel over numpy arrays.
#   it covers exactly the operations the world model, the planning
#   objective and the attentive probe are built from, plus Adam and
#   the tensor container used for checkpoints and datasets.
#

import io
import json
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from sparsewm.errors import DimensionError, DegenerateInputError, MaskError, \
    TrainingAborted, FormatError

# forbidden attention logits; -inf would give inf-inf=nan in the backward pass
MASK_VALUE = -1e9
LN_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)

_local = threading.local()


def active_graph():
    return getattr(_local, 'graph', None)


class Graph(object):
    '''records differentiable operations while active.

    nodes are appended as they are created, so the list is already in
    topological order and backward() walks it once in reverse. outside of
    a graph context no closures are recorded, which is the inference path.
    '''

    def __init__(self):
        self.nodes = []
        self._outer = None

    def __enter__(self):
        self._outer = active_graph()
        _local.graph = self
        return self

    def __exit__(self, *exc):
        _local.graph = self._outer
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss):
        if loss.data.size != 1:
            raise DimensionError("backward needs a scalar loss, got shape " + str(loss.shape))
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward()


class Tensor(object):
    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype.kind != 'f':
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = 'leaf'
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(op=%s, shape=%s, dtype=%s)" % (self.op, self.shape, self.data.dtype)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, inputs, op):
    out = Tensor(data)
    out.op = op
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(out)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(x):
    return np.swapaxes(x, -1, -2)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b), 'add')
    if out.requires_grad:
        def backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward = backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data - b.data, (a, b), 'sub')
    if out.requires_grad:
        def backward():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))
        out._backward = backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b), 'mul')
    if out.requires_grad:
        def backward():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = backward
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: inner dimensions differ, %s x %s" % (a.shape, b.shape))
    out = _node(np.matmul(a.data, b.data), (a, b), 'matmul')
    if out.requires_grad:
        def backward():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(np.matmul(g, _swap(b.data)), a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(np.matmul(_swap(a.data), g), b.shape))
        out._backward = backward
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = _node(a.data.reshape(shape), (a,), 'reshape')
    if out.requires_grad:
        def backward():
            _accum(a, out.grad.reshape(a.shape))
        out._backward = backward
    return out


def transpose(a, axes):
    a = as_tensor(a)
    out = _node(np.transpose(a.data, axes), (a,), 'transpose')
    if out.requires_grad:
        inverse = np.argsort(axes)

        def backward():
            _accum(a, np.transpose(out.grad, inverse))
        out._backward = backward
    return out


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat')
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def backward():
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(lo, hi)
                    _accum(t, out.grad[tuple(index)])
        out._backward = backward
    return out


def take(a, indices, axis):
    '''gathers entries of a along axis; repeated indices accumulate in backward'''
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = _node(np.take(a.data, indices, axis=axis), (a,), 'take')
    if out.requires_grad:
        def backward():
            g = np.zeros_like(a.data)
            moved = np.moveaxis(g, axis, 0)
            np.add.at(moved, indices, np.moveaxis(out.grad, axis, 0))
            _accum(a, g)
        out._backward = backward
    return out


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), 'sum')
    if out.requires_grad:
        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))
        out._backward = backward
    return out


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def layernorm(x, gain, bias):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise DegenerateInputError("layernorm needs at least 2 features, got %d" % n)
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layernorm: gain/bias %s/%s do not match last axis %d"
                             % (gain.shape, bias.shape, n))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias), 'layernorm')
    if out.requires_grad:
        def backward():
            dy = out.grad
            lead = tuple(range(dy.ndim - 1))
            _accum(gain, (dy * xhat).sum(axis=lead))
            _accum(bias, dy.sum(axis=lead))
            if x.requires_grad:
                dxhat = dy * gain.data
                dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
                _accum(x, dx)
        out._backward = backward
    return out


def gelu(x):
    '''GeLU, tanh approximation'''
    x = as_tensor(x)
    u = GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = _node(0.5 * x.data * (1.0 + t), (x,), 'gelu')
    if out.requires_grad:
        def backward():
            du = GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            _accum(x, out.grad * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))
        out._backward = backward
    return out


def dropout(x, p, rng):
    '''inverted dropout; identity when p is 0 or rng is None'''
    x = as_tensor(x)
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, keep)


def masked_attention(q, k, v, mask, record=None):
    '''softmax(q k^T / sqrt(d) + bias) v, bias 0 where mask allows and MASK_VALUE elsewhere.

    mask is a boolean array (or an object with an `allowed` array) broadcastable
    to (..., queries, keys). when record is a list the post-softmax weights are
    appended to it.
    '''
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention: q %s, k %s, v %s do not line up" % (q.shape, k.shape, v.shape))
    allowed = np.asarray(getattr(mask, 'allowed', mask), dtype=bool)
    if allowed.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise DimensionError("attention: mask %s does not match %d queries x %d keys"
                             % (allowed.shape, q.shape[-2], k.shape[-2]))
    if not allowed.any(axis=-1).all():
        raise MaskError("attention row with every key forbidden")
    scale = 1.0 / np.sqrt(d)
    logits = np.matmul(q.data, _swap(k.data)) * scale
    logits = logits + np.where(allowed, 0.0, MASK_VALUE).astype(logits.dtype)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    if record is not None:
        record.append(w)
    out = _node(np.matmul(w, v.data), (q, k, v), 'masked_attention')
    if out.requires_grad:
        def backward():
            g = out.grad
            if v.requires_grad:
                _accum(v, _unbroadcast(np.matmul(_swap(w), g), v.shape))
            dw = np.matmul(g, _swap(v.data))
            dl = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                _accum(q, _unbroadcast(np.matmul(dl, k.data), q.shape))
            if k.requires_grad:
                _accum(k, _unbroadcast(np.matmul(_swap(dl), q.data), k.shape))
        out._backward = backward
    return out


def token_mse(pred, target):
    '''mean over tokens (and batch) of the squared L2 distance over features'''
    diff = sub(pred, target)
    return mean(sum(mul(diff, diff), axis=-1))


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, st, lr=None):
    '''one Adam update with bias correction, in place. returns params.

    params is a mapping of name -> Tensor (or anything with a `tensors`
    mapping); grads maps the same names to arrays. missing gradients count
    as zero.
    '''
    tensors = getattr(params, 'tensors', params)
    for name, g in grads.items():
        if name not in tensors:
            raise DimensionError("gradient for unknown parameter " + name)
        if np.shape(g) != tensors[name].shape:
            raise DimensionError("gradient for %s has shape %s, parameter has %s"
                                 % (name, np.shape(g), tensors[name].shape))
        if not np.all(np.isfinite(g)):
            raise TrainingAborted("non-finite gradient in parameter " + name)
    lr = st.lr if lr is None else lr
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    for name, p in tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        st.m[name] = m
        st.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return params


# tensor container:
#   8 bytes magic | uint64 little-endian header length | JSON header | payloads
# the header lists every tensor with its dtype, shape, offset and size;
# payloads are raw little-endian arrays laid out back to back.
CONTAINER_MAGIC = b'SPWMTNSR'
CONTAINER_VERSION = 1


def dump_tensors(tensors, meta=None):
    '''serializes a name -> array mapping (insertion order kept) to bytes'''
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder('<'))
        raw = arr.tobytes()
        entries.append({'name': name, 'dtype': arr.dtype.str, 'shape': list(arr.shape),
                        'offset': offset, 'nbytes': len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {'format': 'sparsewm-tensors', 'version': CONTAINER_VERSION,
              'meta': meta or {}, 'tensors': entries}
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack('<Q', len(blob)))
    buf.write(blob)
    for raw in payloads:
        buf.write(raw)
    return buf.getvalue()


def parse_tensors(data):
    if data[:8] != CONTAINER_MAGIC:
        raise FormatError("not a sparsewm tensor container")
    try:
        (hlen,) = struct.unpack('<Q', data[8:16])
        header = json.loads(data[16:16 + hlen].decode('utf-8'))
    except (struct.error, ValueError) as e:
        raise FormatError("corrupt container header: " + str(e))
    if header.get('version') != CONTAINER_VERSION:
        raise FormatError("unsupported container version " + str(header.get('version')))
    base = 16 + hlen
    tensors = {}
    for e in header['tensors']:
        start = base + e['offset']
        raw = data[start:start + e['nbytes']]
        if len(raw) != e['nbytes']:
            raise FormatError("truncated payload for tensor " + e['name'])
        arr = np.frombuffer(raw, dtype=np.dtype(e['dtype'])).reshape(e['shape'])
        tensors[e['name']] = arr.astype(arr.dtype.newbyteorder('='))
    return tensors, header['meta']


def save_tensors(path, tensors, meta=None):
    data = dump_tensors(tensors, meta)
    with open(path + ".tmp", 'wb') as f:
        f.write(data)
    os.replace(path + ".tmp", path)


def load_tensors(path):
    with open(path, 'rb') as f:
        return parse_tensors(f.read())
