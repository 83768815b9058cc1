# planner.py -
#   model predictive control with the cross-entropy method, planning in the
#   world model's latent space on a subset of patch tokens ("sparse
#   imagination"). the token subset comes from one of the strategies in
#   tokensel.
#

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from sparsewm import envsim, tokensel, worldmodel
from sparsewm.errors import ConfigError, DimensionError, PlanningError
from sparsewm.logger import debug


@dataclass(frozen=True)
class PlanConfig:
    samples: int = 100       # K
    elites: int = 10         # E
    iterations: int = 10     # M
    horizon: int = 5         # H
    max_mpc: int = 10
    drop_ratio: float = 0.0
    strategy: str = 'random'
    replan: bool = True
    std_floor: float = 1e-3

    def __post_init__(self):
        if not 1 <= self.elites <= self.samples:
            raise ConfigError("need 1 <= elites <= samples, got %d / %d" % (self.elites, self.samples))
        if self.horizon < 1 or self.iterations < 1 or self.max_mpc < 1:
            raise ConfigError("horizon, iterations and max_mpc must be at least 1")
        if not 0.0 <= self.drop_ratio < 1.0:
            raise ConfigError("drop ratio must be in [0, 1), got %r" % self.drop_ratio)
        if self.strategy not in tokensel.STRATEGIES:
            raise ConfigError("unknown strategy %r, expected one of %s"
                              % (self.strategy, ', '.join(tokensel.STRATEGIES)))

    @property
    def calls_per_plan(self):
        '''world model forward calls made by one cem_plan, K * M * H'''
        return self.samples * self.iterations * self.horizon


@dataclass
class CemState:
    mean: np.ndarray  # (H, A)
    std: np.ndarray   # (H, A), never below the floor


def objective(pred, goal, mask):
    '''squared L2 distance between predicted and goal tokens over the kept
    positions, divided by the kept count. pred is (n, D) or (K, n, D)'''
    goal = np.asarray(getattr(goal, 'tokens', goal))
    kept = np.asarray(getattr(mask, 'kept', mask), dtype=np.int64)
    if kept.size and (kept.min() < 0 or kept.max() >= len(goal)):
        raise DimensionError("mask index out of range for %d goal tokens" % len(goal))
    pred = np.asarray(pred)
    if pred.shape[-2] != len(kept):
        raise DimensionError("prediction has %d tokens, mask keeps %d" % (pred.shape[-2], len(kept)))
    diff = pred - goal[kept]
    return (diff * diff).sum(axis=(-2, -1)) / len(kept)


def cluster_objective(pred, goal, sizes):
    '''hungarian-matched squared centroid distance, weighted by the predicted
    cluster sizes. pred (K, C, D) pooled predictions, goal a ClusterSet'''
    pred = np.asarray(pred)
    single = pred.ndim == 2
    if single:
        pred = pred[None]
    w = np.asarray(sizes, dtype=np.float64)
    costs = np.empty(len(pred))
    for i, p in enumerate(pred):
        d = ((p[:, None, :] - goal.centroids[None, :, :]) ** 2).sum(axis=-1)
        assignment, _ = tokensel.hungarian_match(d)
        costs[i] = (w * d[np.arange(len(w)), assignment]).sum() / w.sum()
    return costs[0] if single else costs


def cem_plan(cost_fn, cfg, action_dim, a_max, seed, mpc_iter=0, init=None):
    '''cross-entropy method over action sequences.

    cost_fn(candidates (K, H, A), cem_iter) -> costs (K,). each iteration
    samples K clipped gaussian sequences, carries the best sequence so far
    in slot 0, and refits mean/std to the E cheapest. sampling for
    iteration m draws from the stream (*seed, mpc_iter, m), so the plan is
    fixed by the seed however the costs are computed.

    returns (plan (H, A), CemState, best cost per iteration).
    '''
    H, K, E = cfg.horizon, cfg.samples, cfg.elites
    st = init or CemState(mean=np.zeros((H, action_dim)),
                          std=np.full((H, action_dim), a_max / 2.0))
    best, best_cost = None, np.inf
    history = []
    for m in range(cfg.iterations):
        rng = np.random.default_rng(list(np.atleast_1d(seed)) + [mpc_iter, m])
        cand = st.mean + st.std * rng.standard_normal((K, H, action_dim))
        cand = np.clip(cand, -a_max, a_max)
        if best is not None:
            cand[0] = best
        costs = np.asarray(cost_fn(cand, m), dtype=np.float64)
        costs = np.where(np.isfinite(costs), costs, np.inf)
        if not np.isfinite(costs).any():
            raise PlanningError("every candidate cost is non-finite (cem iteration %d)" % m)
        order = np.argsort(costs, kind='stable')
        elites = cand[order[:E]]
        if costs[order[0]] <= best_cost:
            best, best_cost = cand[order[0]].copy(), costs[order[0]]
        history.append(float(best_cost))
        st = CemState(mean=elites.mean(axis=0), std=np.maximum(elites.std(axis=0), cfg.std_floor))
    return np.clip(st.mean, -a_max, a_max), st, history


class Planner(object):
    '''plans one episode at a time with a fixed world model and strategy.

    sparse_rollout=False keeps the rollout on all tokens and applies the mask
    to the objective only (the noise-injection harness). corrupt, if given,
    is applied to every prediction fed back during rollouts.
    '''

    def __init__(self, params, cfg, a_max, grid, seed, sparse_rollout=True, corrupt=None):
        self.params = params
        self.cfg = cfg
        self.a_max = a_max
        self.grid = grid
        self.seed = seed
        self.sparse_rollout = sparse_rollout
        self.corrupt = corrupt
        self.n_tokens = params.cfg.n_tokens
        self.episode = 0
        self.goal = None
        self.fixed_mask = None
        self.goal_clusters = None
        self.frame_clusters = None

    def begin_episode(self, goal_tokens, episode):
        self.goal = np.asarray(goal_tokens)
        self.episode = episode
        self.fixed_mask = None
        self.goal_clusters = None
        self.frame_clusters = None
        if self.cfg.strategy == 'fixed':
            self.fixed_mask = tokensel.sample_mask_random(self._mask_rng(-1, 0), self.n_tokens,
                                                          self.cfg.drop_ratio)
        elif self.cfg.strategy == 'atc':
            C = tokensel.keep_count(self.n_tokens, self.cfg.drop_ratio)
            self.goal_clusters = tokensel.atc_cluster(self.goal, C)

    def _mask_rng(self, mpc_iter, cem_iter):
        return np.random.default_rng([self.seed, self.episode, mpc_iter + 1, cem_iter, 1])

    def select(self, history, past, mpc_iter, cem_iter=0):
        '''the DropMask (or ClusterSet for atc) used for this planning step'''
        cfg, n = self.cfg, self.n_tokens
        s = cfg.strategy
        if s == 'full':
            return tokensel.DropMask.all(n)
        if s == 'fixed':
            return self.fixed_mask
        rng = self._mask_rng(mpc_iter, cem_iter)
        if s == 'random':
            return tokensel.sample_mask_random(rng, n, cfg.drop_ratio)
        if s == 'lhs':
            return tokensel.sample_mask_lhs(rng, self.grid, cfg.drop_ratio)
        if s == 'attn-wm':
            acts = np.concatenate([np.reshape(past, (-1, 2)), np.zeros((1, 2))])
            return tokensel.mask_attention_wm(self.params, history, acts, cfg.drop_ratio)
        if s == 'atc':
            return self._frame_clusters(history[-1], mpc_iter)
        raise ConfigError("unknown strategy " + s)

    def _frame_clusters(self, frame, mpc_iter):
        # k-means on the current frame starts from the previous frame's
        # clusters; the goal's agglomerative clusters seed the first step
        if self.frame_clusters is not None and self.frame_clusters[0] == mpc_iter:
            return self.frame_clusters[1]
        anchor = self.goal_clusters if self.frame_clusters is None else self.frame_clusters[1]
        cs = tokensel.atc_cluster(frame, self.goal_clusters.count, anchor=anchor)
        self.frame_clusters = (mpc_iter, cs)
        return cs

    def _cost_fn(self, history, past, mpc_iter):
        K = self.cfg.samples
        hist = np.broadcast_to(history, (K,) + history.shape)
        pst = np.broadcast_to(past, (K,) + past.shape)
        resample = not self.cfg.replan
        current = {}

        def selection(cem_iter):
            key = cem_iter if resample else 0
            if key not in current:
                current[key] = self.select(history, past, mpc_iter, key)
            return current[key]

        def cost(cand, cem_iter):
            sel = selection(cem_iter)
            if isinstance(sel, tokensel.ClusterSet):
                pred = worldmodel.rollout(self.params, hist, pst, cand, pool=sel.pool_matrix(),
                                          corrupt=self.corrupt)
                return cluster_objective(pred, self.goal_clusters, sel.sizes)
            keep = sel if self.sparse_rollout else None
            pred = worldmodel.rollout(self.params, hist, pst, cand, keep=keep, corrupt=self.corrupt)
            if keep is None:
                pred = pred[:, sel.kept]
            return objective(pred, self.goal, sel)
        return cost

    def plan(self, history, past, mpc_iter):
        '''history (T, N, D) tokens, past (T-1, A) executed actions -> (H, A) plan'''
        history = np.asarray(history, dtype=self.params.dtype)
        past = np.asarray(past, dtype=self.params.dtype).reshape(len(history) - 1, 2)
        cost = self._cost_fn(history, past, mpc_iter)
        plan, _, best = cem_plan(cost, self.cfg, action_dim=2, a_max=self.a_max,
                                 seed=(self.seed, self.episode), mpc_iter=mpc_iter)
        debug("mpc iteration %d: best cost %.5f" % (mpc_iter, best[-1]))
        return plan


@dataclass
class EpisodeOutcome:
    success: bool
    mpc_iters: int
    plan_seconds: list = field(default_factory=list)
    forward_calls: int = 0
    final_distance: float = 0.0
    valid: bool = True

    @property
    def plan_seconds_per_iter(self):
        return float(np.mean(self.plan_seconds)) if self.plan_seconds else 0.0


def mpc_run(planner, env_cfg, tokenizer, start, goal, episode=0):
    '''plan -> execute all H actions -> observe, until the agent is within the
    success radius of the goal or max_mpc iterations are spent'''
    cfg = planner.cfg
    window = planner.params.cfg.window
    goal_tokens = envsim.tokenize(tokenizer, envsim.render(goal, env_cfg))
    s = start
    frames = [envsim.tokenize(tokenizer, envsim.render(s, env_cfg))]
    executed = []
    out = EpisodeOutcome(success=envsim.is_success(s, goal, env_cfg), mpc_iters=0)
    if out.success:
        out.final_distance = envsim.distance(s, goal)
        return out
    planner.begin_episode(goal_tokens, episode)
    calls0 = worldmodel.forward_calls.shard()
    for it in range(cfg.max_mpc if cfg.replan else 1):
        hist = np.stack(frames[-window:])
        past = np.array(executed[len(executed) - (len(hist) - 1):] if len(hist) > 1 else [])
        out.mpc_iters = it + 1
        try:
            t0 = time.perf_counter()
            plan = planner.plan(hist, past.reshape(len(hist) - 1, 2), it)
            out.plan_seconds.append(time.perf_counter() - t0)
            for a in plan:
                s = envsim.step(s, a, env_cfg.a_max)
                frames.append(envsim.tokenize(tokenizer, envsim.render(s, env_cfg)))
                executed.append(np.asarray(a, dtype=np.float64))
        except (ValueError, FloatingPointError, PlanningError) as e:
            debug("episode %d aborted: %s" % (episode, e))
            out.valid = False
            break
        if envsim.is_success(s, goal, env_cfg):
            out.success = True
            break
    out.forward_calls = worldmodel.forward_calls.shard() - calls0
    out.final_distance = envsim.distance(s, goal)
    return out


def episode_task(env_cfg, seed, episode):
    '''the (start, goal) pair of one evaluation episode, drawn from the stream (seed, episode)'''
    return envsim.sample_task(np.random.default_rng([seed, episode]), env_cfg)


def evaluate(params, env_cfg, plan_cfg, episodes, seed, workers=1, **planner_kw):
    '''runs `episodes` MPC episodes and returns their EpisodeOutcomes in order.
    each episode gets its own Planner; results do not depend on the worker count.'''
    tok = envsim.Tokenizer.from_config(env_cfg)
    grid = (env_cfg.grid_side, env_cfg.grid_side)

    def one(i):
        kw = dict(planner_kw)
        make_corrupt = kw.pop('make_corrupt', None)
        if make_corrupt is not None:
            kw['corrupt'] = make_corrupt(i)
        planner = Planner(params, plan_cfg, env_cfg.a_max, grid, seed, **kw)
        start, goal = episode_task(env_cfg, seed, i)
        return mpc_run(planner, env_cfg, tok, start, goal, episode=i)

    if workers <= 1:
        return [one(i) for i in range(episodes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(episodes)))
