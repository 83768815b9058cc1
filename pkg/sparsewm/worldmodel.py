# worldmodel.py -
#   causal transformer decoder predicting next-frame patch tokens from a
#   window of past tokens and actions, trained with randomized grouped
#   attention so it can later run on arbitrary token subsets.
#

import json
import os
import threading
from dataclasses import dataclass, asdict

import numpy as np

from sparsewm import diffkernel as dk
from sparsewm.errors import ConfigError, DegenerateInputError, DimensionError, \
    FormatError, TrainingAborted
from sparsewm.logger import log, debug

MASK_POLICIES = ('grouped', 'full')


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int = 16
    token_dim: int = 16
    action_dim: int = 2
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    action_proj_dim: int = 8
    history_len: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim %d is not divisible by n_heads %d" % (self.embed_dim, self.n_heads))
        if self.action_proj_dim <= 0:
            raise ConfigError("action_proj_dim must be positive")
        if self.n_tokens < 1 or self.history_len < 0:
            raise ConfigError("need at least one token and a non-negative history length")

    @property
    def window(self):
        '''frames of context, h + 1'''
        return self.history_len + 1


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray  # (N, D)
    t: int = 0


@dataclass(frozen=True)
class GroupAssignment:
    groups: np.ndarray  # group id (0 or 1) per token position
    size0: int


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # (L, L) or (B, 1, L, L) boolean over flattened (frame, token) positions


def sample_group_assignment(rng, n_tokens):
    '''splits token positions into two non-empty groups; group 0 has a size
    drawn uniformly from 1..N-1 and a uniformly random membership'''
    if n_tokens < 2:
        raise DegenerateInputError("grouping needs at least 2 tokens, got %d" % n_tokens)
    size0 = int(rng.integers(1, n_tokens))
    groups = np.ones(n_tokens, dtype=np.int8)
    groups[rng.permutation(n_tokens)[:size0]] = 0
    return GroupAssignment(groups=groups, size0=size0)


def build_mask(cfg, grp=None, n_frames=None, n_tokens=None):
    '''allowed(i, j) iff frame(j) <= frame(i) and, when grouped, group(i) == group(j).
    the grouping is reused for every frame of the window.'''
    T = cfg.window if n_frames is None else n_frames
    n = cfg.n_tokens if n_tokens is None else n_tokens
    frame = np.repeat(np.arange(T), n)
    allowed = frame[None, :] <= frame[:, None]
    if grp is not None:
        if len(grp.groups) != n:
            raise DimensionError("group assignment covers %d tokens, mask has %d" % (len(grp.groups), n))
        g = np.tile(grp.groups, T)
        allowed &= g[None, :] == g[:, None]
    np.fill_diagonal(allowed, True)
    return AttentionMask(allowed=allowed)


def stack_masks(masks):
    '''per-sequence masks -> one (B, 1, L, L) mask broadcast over heads'''
    return AttentionMask(allowed=np.stack([m.allowed for m in masks])[:, None])


class ModelParams(object):
    '''all trainable weights of the world model, keyed by name'''

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype):
        return ModelParams(self.cfg, {k: dk.Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                      for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    @classmethod
    def init(cls, cfg, rng, dtype=np.float64):
        E, D, A, Pa = cfg.embed_dim, cfg.token_dim, cfg.action_dim, cfg.action_proj_dim

        def normal(*shape, scale=0.02):
            return rng.standard_normal(shape) * scale

        w = {
            'act_w': normal(A, Pa, scale=1.0 / np.sqrt(A)),
            'act_b': np.zeros(Pa),
            'in_w': normal(D + Pa, E, scale=1.0 / np.sqrt(D + Pa)),
            'in_b': np.zeros(E),
            'pos': normal(cfg.n_tokens, E),
            'frame': normal(cfg.window, E),
        }
        for l in range(cfg.n_layers):
            p = "l%d." % l
            w[p + 'ln1_g'] = np.ones(E)
            w[p + 'ln1_b'] = np.zeros(E)
            w[p + 'qkv_w'] = normal(E, 3 * E)
            w[p + 'qkv_b'] = np.zeros(3 * E)
            w[p + 'o_w'] = normal(E, E, scale=0.02 / np.sqrt(2 * cfg.n_layers))
            w[p + 'o_b'] = np.zeros(E)
            w[p + 'ln2_g'] = np.ones(E)
            w[p + 'ln2_b'] = np.zeros(E)
            w[p + 'fc1_w'] = normal(E, 4 * E)
            w[p + 'fc1_b'] = np.zeros(4 * E)
            w[p + 'fc2_w'] = normal(4 * E, E, scale=0.02 / np.sqrt(2 * cfg.n_layers))
            w[p + 'fc2_b'] = np.zeros(E)
        w['lnf_g'] = np.ones(E)
        w['lnf_b'] = np.zeros(E)
        w['head_w'] = normal(E, D)
        w['head_b'] = np.zeros(D)
        return cls(cfg, {k: dk.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k)
                         for k, v in w.items()})

    def save(self, path, mask_policy):
        '''writes the tensor container plus a JSON sidecar with the config and mask policy'''
        if mask_policy not in MASK_POLICIES:
            raise ConfigError("unknown mask policy " + str(mask_policy))
        meta = {'kind': 'worldmodel', 'config': asdict(self.cfg), 'mask_policy': mask_policy}
        dk.save_tensors(path, {k: v.data for k, v in self.tensors.items()}, meta)
        with open(path + ".json.tmp", 'w') as f:
            json.dump(meta, f, indent=4, sort_keys=True)
        os.replace(path + ".json.tmp", path + ".json")

    @classmethod
    def load(cls, path):
        '''returns (params, mask_policy)'''
        tensors, meta = dk.load_tensors(path)
        if meta.get('kind') != 'worldmodel':
            raise FormatError(path + " is not a world model checkpoint")
        cfg = ModelConfig(**meta['config'])
        params = cls(cfg, {k: dk.Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()})
        return params, meta['mask_policy']


class ForwardCounter(object):
    '''counts world model forward calls, one per sequence per step.
    each thread adds to its own shard; the total is the sum of the shards.'''

    def __init__(self):
        self._lock = threading.Lock()
        self._shards = {}

    def add(self, n):
        key = threading.get_ident()
        with self._lock:
            self._shards[key] = self._shards.get(key, 0) + int(n)

    @property
    def total(self):
        with self._lock:
            return sum(self._shards.values())

    def shard(self):
        with self._lock:
            return self._shards.get(threading.get_ident(), 0)

    def reset(self):
        with self._lock:
            self._shards.clear()


forward_calls = ForwardCounter()


def _as_batch(history, actions):
    '''accepts (T, N, D) / sequences of TokenGrid and (T, A), or batched (B, T, N, D) and (B, T, A)'''
    if len(history) == 0:
        raise DegenerateInputError("history is empty")
    if isinstance(history[0], TokenGrid):
        history = np.stack([g.tokens for g in history])
    history = np.asarray(history)
    actions = np.asarray(actions, dtype=history.dtype)
    single = history.ndim == 3
    if single:
        history = history[None]
        actions = actions[None]
    return history, actions, single


def _select(params, z, keep, pool):
    '''reduces (B, T, N, D) tokens to the kept (or pooled) positions.
    returns (tokens (B, T, n, D), positional embeddings Tensor (n, E))'''
    if pool is not None:
        pool = np.asarray(pool, dtype=z.dtype)
        if pool.ndim != 2 or pool.shape[1] != z.shape[2]:
            raise DimensionError("pool of shape %s does not apply to %d tokens" % (pool.shape, z.shape[2]))
        return pool @ z, dk.matmul(pool, params['pos'])
    if keep is None:
        return z, params['pos']
    idx = np.asarray(getattr(keep, 'kept', keep), dtype=np.int64)
    if len(idx) == 0:
        raise DegenerateInputError("keep mask selects no tokens")
    if idx.min() < 0 or idx.max() >= z.shape[2]:
        raise DimensionError("keep index out of range for %d tokens" % z.shape[2])
    return z[:, :, idx, :], dk.take(params['pos'], idx, axis=0)


def _core(params, zs, a, pos, mask, rng=None, attn_record=None):
    '''the transformer on already selected tokens: (B, T, n, D) -> Tensor (B, T, n, D)'''
    cfg = params.cfg
    B, T, n, D = zs.shape
    E, H = cfg.embed_dim, cfg.n_heads
    dh = E // H
    L = T * n
    if mask is None:
        mask = build_mask(cfg, None, n_frames=T, n_tokens=n)
    act = dk.matmul(a, params['act_w']) + params['act_b']                  # (B, T, Pa)
    act = dk.mul(dk.reshape(act, (B, T, 1, cfg.action_proj_dim)), np.ones((1, 1, n, 1), dtype=zs.dtype))
    x = dk.concat([dk.Tensor(zs), act], axis=-1)                            # (B, T, n, D+Pa)
    x = dk.matmul(x, params['in_w']) + params['in_b']
    x = x + dk.reshape(pos, (1, 1, n, E))
    frame_emb = dk.take(params['frame'], np.arange(cfg.window - T, cfg.window), axis=0)
    x = x + dk.reshape(frame_emb, (1, T, 1, E))
    x = dk.reshape(x, (B, L, E))
    p = cfg.dropout if rng is not None else 0.0
    for l in range(cfg.n_layers):
        pre = "l%d." % l
        h = dk.layernorm(x, params[pre + 'ln1_g'], params[pre + 'ln1_b'])
        qkv = dk.matmul(h, params[pre + 'qkv_w']) + params[pre + 'qkv_b']
        qkv = dk.transpose(dk.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))  # (3, B, H, L, dh)
        q = dk.take(qkv, 0, axis=0)
        k = dk.take(qkv, 1, axis=0)
        v = dk.take(qkv, 2, axis=0)
        att = dk.masked_attention(q, k, v, mask, record=attn_record)
        att = dk.reshape(dk.transpose(att, (0, 2, 1, 3)), (B, L, E))
        att = dk.matmul(att, params[pre + 'o_w']) + params[pre + 'o_b']
        x = x + dk.dropout(att, p, rng)
        h = dk.layernorm(x, params[pre + 'ln2_g'], params[pre + 'ln2_b'])
        h = dk.gelu(dk.matmul(h, params[pre + 'fc1_w']) + params[pre + 'fc1_b'])
        h = dk.matmul(h, params[pre + 'fc2_w']) + params[pre + 'fc2_b']
        x = x + dk.dropout(h, p, rng)
    x = dk.layernorm(x, params['lnf_g'], params['lnf_b'])
    out = dk.matmul(x, params['head_w']) + params['head_b']                 # (B, L, D)
    return dk.reshape(out, (B, T, n, D))


def _check_window(cfg, z, a):
    B, T, N, D = z.shape
    if T > cfg.window:
        raise DimensionError("history of %d frames exceeds the model window %d" % (T, cfg.window))
    if N != cfg.n_tokens or D != cfg.token_dim:
        raise DimensionError("tokens %s do not match the model (%d x %d)"
                             % (z.shape[2:], cfg.n_tokens, cfg.token_dim))
    if a.shape[:2] != (B, T) or a.shape[2] != cfg.action_dim:
        raise DimensionError("need one %d-dim action per frame, got %s for %d frames"
                             % (cfg.action_dim, a.shape, T))


def forward(params, history, actions, mask=None, keep=None, pool=None, rng=None,
            attn_record=None, all_frames=False):
    '''predicts next-frame tokens.

    history: (T, N, D) tokens, a sequence of TokenGrid, or batched (B, T, N, D);
    actions: one per frame. keep: kept token indices (or a DropMask); only
    those positions are embedded, attended and predicted, in that order.
    pool: (n, N) weights pooling tokens and positional embeddings, used
    instead of keep. mask: AttentionMask over the T*n positions, causal and
    ungrouped when None. rng: enables residual dropout (training).
    attn_record: list receiving the attention weights of every layer.

    returns a Tensor (n, D), or (B, n, D) for batched input; with all_frames
    the prediction made at every frame, (..., T, n, D).
    '''
    z, a, single = _as_batch(history, actions)
    _check_window(params.cfg, z, a)
    zs, pos = _select(params, z, keep, pool)
    out = _core(params, zs, a, pos, mask, rng=rng, attn_record=attn_record)
    if not all_frames:
        out = dk.take(out, zs.shape[1] - 1, axis=1)
    if single:
        out = dk.take(out, 0, axis=0)
    return out


def train_step(params, st, batch, rng, mask_policy='grouped'):
    '''one Adam step on a batch of (history, actions, target) windows.

    history (B, T, N, D), actions (B, T, A), target (B, N, D). with the grouped
    policy every sequence gets its own fresh group assignment. the loss is the
    mean over all tokens of both groups of the squared L2 error.
    returns (params, loss).
    '''
    if mask_policy not in MASK_POLICIES:
        raise ConfigError("unknown mask policy " + str(mask_policy))
    history, actions, target = batch
    cfg = params.cfg
    B, T = history.shape[:2]
    if mask_policy == 'grouped':
        mask = stack_masks([build_mask(cfg, sample_group_assignment(rng, cfg.n_tokens), n_frames=T)
                            for _ in range(B)])
    else:
        mask = build_mask(cfg, None, n_frames=T)
    dtype = params.dtype
    params.zero_grad()
    with dk.Graph() as g:
        pred = forward(params, history.astype(dtype), actions.astype(dtype), mask=mask, rng=rng)
        loss = dk.token_mse(pred, target.astype(dtype))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingAborted("non-finite loss in batch %d" % st.step)
        g.backward(loss)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    dk.adam_step(params, grads, st)
    return params, value


def fit(params, windows, steps, batch_size, rng, mask_policy='grouped', lr=5e-4, log_every=100):
    '''trains on (tokens, actions, targets) windows; returns the loss per step'''
    tokens, actions, targets = windows[:3]
    st = dk.AdamState(lr=lr)
    losses = []
    log("Training %d steps, batch %d, mask policy %s, %d windows."
        % (steps, batch_size, mask_policy, len(tokens)))
    for i in range(steps):
        idx = rng.integers(0, len(tokens), size=batch_size)
        _, loss = train_step(params, st, (tokens[idx], actions[idx], targets[idx]), rng, mask_policy)
        losses.append(loss)
        if log_every and (i + 1) % log_every == 0:
            log("step %d: loss %.5f" % (i + 1, float(np.mean(losses[-log_every:]))))
    return losses


def rollout(params, history, past_actions, plan, keep=None, pool=None, corrupt=None):
    '''autoregressive imagination of planned action sequences.

    history: (T, N, D) or (B, T, N, D) observed tokens; past_actions: the
    T-1 actions executed between those frames; plan: (H, A) or (B, H, A).
    the keep mask (or pool) reduces the history once and holds for every
    step; each prediction is appended and frames older than h+1 are evicted.
    corrupt, if given, maps each raw prediction to the array fed back.

    returns the final prediction as an array, (n, D) or (B, n, D), and adds
    B * H to forward_calls.
    '''
    cfg = params.cfg
    z, past, single = _as_batch(history, past_actions)
    plan = np.asarray(plan, dtype=z.dtype)
    if single:
        plan = plan[None]
    B, T = z.shape[:2]
    H = plan.shape[1]
    if H == 0:
        raise DegenerateInputError("rollout horizon must be at least 1")
    if past.shape[1] != T - 1:
        raise DimensionError("need %d past actions for %d frames, got %d" % (T - 1, T, past.shape[1]))
    _check_window(cfg, z, np.zeros((B, T, plan.shape[2])))
    zs, pos = _select(params, z, keep, pool)
    frames = [zs[:, i] for i in range(T)]
    acts = [past[:, i] for i in range(T - 1)]
    masks = {}
    pred = None
    for step in range(H):
        acts.append(plan[:, step])
        window = np.stack(frames[-cfg.window:], axis=1)
        act_window = np.stack(acts[-window.shape[1]:], axis=1)
        w = window.shape[1]
        if w not in masks:
            masks[w] = build_mask(cfg, None, n_frames=w, n_tokens=window.shape[2])
        out = _core(params, window, act_window, pos, masks[w])
        forward_calls.add(B)
        pred = out.data[:, -1]
        if corrupt is not None:
            pred = corrupt(pred)
        frames.append(pred)
    return pred[0] if single else pred
