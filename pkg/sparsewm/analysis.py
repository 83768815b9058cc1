# analysis.py -
#   instruments for studying sparse token sets: kernel dependence (HSIC)
#   between kept tokens and the true state, attentive probing, subset
#   prediction error, and the noise-injection planning harness.
#

from dataclasses import dataclass, replace

import numpy as np

from sparsewm import diffkernel as dk
from sparsewm import envsim, planner, tokensel, worldmodel
from sparsewm.errors import DegenerateInputError, DimensionError, TrainingAborted
from sparsewm.logger import log, debug

KERNELS = ('linear', 'rbf')


@dataclass(frozen=True)
class KernelSpec:
    kind: str = 'linear'
    bandwidth: float = None  # rbf only; None means the median heuristic

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise DimensionError("unknown kernel " + str(self.kind))
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise DegenerateInputError("rbf bandwidth must be positive")


LINEAR = KernelSpec('linear')
RBF = KernelSpec('rbf')


def _pairwise_sq(X):
    sq = (X * X).sum(axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)


def median_bandwidth(X):
    '''median pairwise distance over distinct pairs; 1.0 when that median is 0'''
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    iu = np.triu_indices(len(X), k=1)
    med = float(np.median(np.sqrt(_pairwise_sq(X)[iu])))
    return med if med > 0 else 1.0


def gram(X, spec):
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    if spec.kind == 'linear':
        return X @ X.T
    bw = spec.bandwidth if spec.bandwidth is not None else median_bandwidth(X)
    return np.exp(-_pairwise_sq(X) / (2.0 * bw * bw))


def hsic(X, Y, kx=LINEAR, ky=LINEAR):
    '''empirical HSIC, tr(K H L H) / (n-1)^2, floored at 0'''
    n = len(X)
    if n < 4:
        raise DegenerateInputError("hsic needs at least 4 samples, got %d" % n)
    if len(Y) != n:
        raise DimensionError("hsic: %d samples in X, %d in Y" % (n, len(Y)))
    K = gram(X, kx)
    L = gram(Y, ky)
    Kc = K - K.mean(axis=0, keepdims=True)
    Kc = Kc - Kc.mean(axis=1, keepdims=True)
    return max(float((Kc * L).sum()) / (n - 1) ** 2, 0.0)


def nhsic(X, Y, kx=LINEAR, ky=LINEAR):
    '''normalized HSIC in [0, 1]; 0 when either self-dependence vanishes'''
    denom = np.sqrt(hsic(X, X, kx, kx) * hsic(Y, Y, ky, ky))
    if denom <= 0:
        return 0.0
    return float(min(max(hsic(X, Y, kx, ky) / denom, 0.0), 1.0))


def hsic_sweep(tokens, states, ratios, masks, batch, rng):
    '''mean/std of nHSIC(kept tokens, state) per drop ratio.

    each repeat draws one batch of observations and one dropout mask shared
    by the whole batch; kept tokens are concatenated into one vector per
    sample (linear kernel), states use an rbf kernel. ratio 0 is evaluated
    once since every mask is the full set.
    '''
    tokens = np.asarray(tokens)
    n_obs, N = tokens.shape[:2]
    batch = min(batch, n_obs)
    rows = []
    for p in ratios:
        repeats = 1 if tokensel.keep_count(N, p) == N else masks
        values = []
        for _ in range(repeats):
            idx = rng.choice(n_obs, size=batch, replace=False)
            mask = tokensel.sample_mask_random(rng, N, p)
            X = tokens[idx][:, mask.kept].reshape(batch, -1)
            values.append(nhsic(X, states[idx], LINEAR, RBF))
        rows.append({'ratio': float(p), 'mean': float(np.mean(values)),
                     'std': float(np.std(values)), 'values': values})
        debug("nhsic at p=%.2f: %.4f" % (p, rows[-1]['mean']))
    return rows


class ProbeParams(object):
    '''attentive probe: a learnable query pools the projected tokens through
    one cross-attention layer, followed by a LayerNorm/GeLU MLP block and a
    linear head'''

    def __init__(self, tensors, heads):
        self.tensors = tensors
        self.heads = heads

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    @classmethod
    def init(cls, token_dim, out_dim, rng, dim=32, heads=4):
        if dim % heads:
            raise DimensionError("probe width %d is not divisible by %d heads" % (dim, heads))

        def normal(*shape, scale):
            return rng.standard_normal(shape) * scale

        w = {
            'in_w': normal(token_dim, dim, scale=1.0 / np.sqrt(token_dim)),
            'in_b': np.zeros(dim),
            'query': normal(1, dim, scale=0.02),
            'q_w': normal(dim, dim, scale=1.0 / np.sqrt(dim)),
            'k_w': normal(dim, dim, scale=1.0 / np.sqrt(dim)),
            'v_w': normal(dim, dim, scale=1.0 / np.sqrt(dim)),
            'o_w': normal(dim, dim, scale=1.0 / np.sqrt(dim)),
            'ln_g': np.ones(dim),
            'ln_b': np.zeros(dim),
            'fc1_w': normal(dim, 4 * dim, scale=1.0 / np.sqrt(dim)),
            'fc1_b': np.zeros(4 * dim),
            'fc2_w': normal(4 * dim, dim, scale=0.5 / np.sqrt(4 * dim)),
            'fc2_b': np.zeros(dim),
            'head_w': normal(dim, out_dim, scale=1.0 / np.sqrt(dim)),
            'head_b': np.zeros(out_dim),
        }
        return cls({k: dk.Tensor(v, requires_grad=True, name=k) for k, v in w.items()}, heads)

    def __call__(self, tokens):
        '''(B, n, D) tokens -> (B, out) Tensor'''
        B, n, _ = tokens.shape
        E = self['in_w'].shape[1]
        H = self.heads
        dh = E // H
        x = dk.matmul(tokens, self['in_w']) + self['in_b']                          # (B, n, E)
        q = dk.transpose(dk.reshape(dk.matmul(self['query'], self['q_w']), (1, 1, H, dh)), (0, 2, 1, 3))
        k = dk.transpose(dk.reshape(dk.matmul(x, self['k_w']), (B, n, H, dh)), (0, 2, 1, 3))
        v = dk.transpose(dk.reshape(dk.matmul(x, self['v_w']), (B, n, H, dh)), (0, 2, 1, 3))
        att = dk.masked_attention(q, k, v, np.ones((1, n), dtype=bool))          # (B, H, 1, dh)
        att = dk.reshape(dk.transpose(att, (0, 2, 1, 3)), (B, E))
        h = dk.matmul(att, self['o_w']) + self['query']
        m = dk.layernorm(h, self['ln_g'], self['ln_b'])
        m = dk.gelu(dk.matmul(m, self['fc1_w']) + self['fc1_b'])
        h = h + dk.matmul(m, self['fc2_w']) + self['fc2_b']
        return dk.matmul(h, self['head_w']) + self['head_b']


def _mse(pred, target):
    diff = dk.sub(pred, target)
    return dk.mean(dk.mul(diff, diff))


def cosine_lr(lr, step, total):
    return 0.5 * lr * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))


def train_probe(tokens, targets, rng, keep=None, epochs=200, dim=32, heads=4, lr=1e-3,
                batch=128, val_fraction=0.2):
    '''trains a probe from kept tokens (n, N, D) to targets (n, k).

    the keep mask is fixed for the whole run. Adam with a cosine learning
    rate schedule, no warmup. returns (probe, validation MSE per epoch).
    '''
    tokens = np.asarray(tokens, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(tokens), -1)
    if keep is not None:
        tokens = tokens[:, np.asarray(getattr(keep, 'kept', keep))]
    n = len(tokens)
    n_val = max(1, int(round(val_fraction * n)))
    if n - n_val < 1:
        raise DegenerateInputError("not enough samples to train a probe (%d)" % n)
    order = rng.permutation(n)
    val, train = order[:n_val], order[n_val:]
    probe = ProbeParams.init(tokens.shape[2], targets.shape[1], rng, dim=dim, heads=heads)
    st = dk.AdamState(lr=lr)
    per_epoch = -(-len(train) // batch)
    total = epochs * per_epoch
    curve = []
    for epoch in range(epochs):
        shuffled = rng.permutation(train)
        for b in range(per_epoch):
            idx = shuffled[b * batch:(b + 1) * batch]
            probe.zero_grad()
            with dk.Graph() as g:
                loss = _mse(probe(tokens[idx]), targets[idx])
                if not np.isfinite(loss.data):
                    raise TrainingAborted("probe loss diverged in epoch %d" % epoch)
                g.backward(loss)
            grads = {k: t.grad for k, t in probe.items() if t.grad is not None}
            dk.adam_step(probe, grads, st, lr=cosine_lr(lr, st.step, total))
        v = float(_mse(probe(tokens[val]), targets[val]).data)
        if not np.isfinite(v):
            raise TrainingAborted("probe validation loss diverged in epoch %d" % epoch)
        curve.append(v)
    return probe, curve


def probe_sweep(tokens, states, ratios, trials, rng, **kw):
    '''final validation MSE of probes trained on random masks, per drop ratio'''
    N = tokens.shape[1]
    rows = []
    for p in ratios:
        finals = []
        for _ in range(trials):
            mask = tokensel.sample_mask_random(rng, N, p)
            _, curve = train_probe(tokens, states, rng, keep=mask, **kw)
            finals.append(curve[-1])
        rows.append({'ratio': float(p), 'mean': float(np.mean(finals)), 'std': float(np.std(finals))})
        log("probe at p=%.2f: validation mse %.5f" % (p, rows[-1]['mean']))
    return rows


def relative_l2(pred, target):
    '''mean over tokens of |pred - target| / |target|.
    tokens whose target norm is 0 are left out; returns (mean, excluded count)'''
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError("prediction %s and target %s differ in shape" % (pred.shape, target.shape))
    num = np.linalg.norm(pred - target, axis=-1)
    den = np.linalg.norm(target, axis=-1)
    ok = den > 0
    excluded = int((~ok).sum())
    if not ok.any():
        raise DegenerateInputError("every target token has zero norm")
    return float((num[ok] / den[ok]).mean()), excluded


def prediction_error(params, windows, ratios, trials, rng, chunk=256):
    '''relative L2 error of subset predictions on held-out windows.

    windows = (tokens (W, T, N, D), actions (W, T, A), targets (W, N, D)).
    per ratio, `trials` random masks; the model sees only the kept tokens
    and is scored on them. returns rows of ratio, mean, std, excluded.
    '''
    tokens, actions, targets = windows[:3]
    N = params.cfg.n_tokens
    dtype = params.dtype
    rows = []
    for p in ratios:
        errs = []
        excluded = 0
        for _ in range(trials):
            mask = tokensel.sample_mask_random(rng, N, p)
            preds = []
            for s in range(0, len(tokens), chunk):
                out = worldmodel.forward(params, tokens[s:s + chunk].astype(dtype),
                                         actions[s:s + chunk].astype(dtype), keep=mask)
                preds.append(out.data)
            err, skipped = relative_l2(np.concatenate(preds), targets[:, mask.kept])
            errs.append(err)
            excluded += skipped
        rows.append({'ratio': float(p), 'mean': float(np.mean(errs)), 'std': float(np.std(errs)),
                     'excluded': excluded})
        debug("relative l2 at p=%.2f: %.5f" % (p, rows[-1]['mean']))
    return rows


def token_noise(sigma, rng):
    '''corruption adding gaussian noise of stddev sigma * |token| to every
    predicted token, drawn fresh on each call'''
    def corrupt(pred):
        scale = sigma * np.linalg.norm(pred, axis=-1, keepdims=True)
        return pred + scale * rng.standard_normal(pred.shape).astype(pred.dtype)
    return corrupt


def noise_robustness(params, env_cfg, plan_cfg, sigmas, drops, episodes, seed, workers=1):
    '''success rate of MPC-CEM driven by corrupted predictions.

    the model rolls out on all tokens; each prediction gets token-relative
    gaussian noise and the objective only sees a random subset of the
    tokens. sigma 0 adds no noise at all. returns rows of sigma, drop,
    success_rate, episodes.
    '''
    rows = []
    for sigma in sigmas:
        for drop in drops:
            cfg = replace(plan_cfg, strategy='random', drop_ratio=drop)
            kw = {'sparse_rollout': False}
            if sigma > 0:
                kw['make_corrupt'] = lambda i, s=sigma: token_noise(s, np.random.default_rng([seed, i, 7]))
            outcomes = planner.evaluate(params, env_cfg, cfg, episodes, seed, workers=workers, **kw)
            rate = float(np.mean([o.success for o in outcomes]))
            rows.append({'sigma': float(sigma), 'drop': float(drop), 'success_rate': rate,
                         'episodes': episodes})
            log("noise sigma=%.2f drop=%.2f: success %.3f" % (sigma, drop, rate))
    return rows


def random_action_baseline(env_cfg, plan_cfg, episodes, seed):
    '''success rate of uniformly random actions on the evaluation tasks,
    with the same action budget and success checks as MPC'''
    wins = 0
    for i in range(episodes):
        start, goal = planner.episode_task(env_cfg, seed, i)
        rng = np.random.default_rng([seed, i, 9])
        s = start
        done = envsim.is_success(s, goal, env_cfg)
        for _ in range(plan_cfg.max_mpc):
            if done:
                break
            for a in rng.uniform(-env_cfg.a_max, env_cfg.a_max, size=(plan_cfg.horizon, 2)):
                s = envsim.step(s, a, env_cfg.a_max)
            done = envsim.is_success(s, goal, env_cfg)
        wins += done
    return wins / episodes
