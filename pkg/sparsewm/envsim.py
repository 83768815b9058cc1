# envsim.py -
#   a two-room navigation environment: an agent in the unit square and a
#   vertical wall with a door. renders grayscale frames, tokenizes them with
#   a frozen random patch projection, and generates/reads trajectory datasets.
#

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image

from sparsewm import diffkernel
from sparsewm.errors import ConfigError, FormatError
from sparsewm.logger import log, debug

CONTACT_EPS = 1e-4


@dataclass(frozen=True)
class EnvConfig:
    grid: int = 16
    patch: int = 4
    token_dim: int = 16
    wall_x: float = 0.5
    gap_lo: float = 0.35
    gap_hi: float = 0.65
    agent_radius_px: float = 1.5
    agent_falloff_px: float = 6.0
    a_max: float = 0.1
    tokenizer_seed: int = 1234
    success_radius: float = 0.1

    def __post_init__(self):
        if self.grid % self.patch != 0:
            raise ConfigError("frame side %d is not divisible by patch size %d" % (self.grid, self.patch))
        if not self.gap_lo < self.gap_hi:
            raise ConfigError("door gap must satisfy gap_lo < gap_hi")

    @property
    def grid_side(self):
        '''patches per frame side, Hp = Wp'''
        return self.grid // self.patch

    @property
    def n_tokens(self):
        return self.grid_side ** 2


@dataclass(frozen=True)
class EnvState:
    x: float
    y: float
    wall_x: float
    gap_lo: float
    gap_hi: float

    @property
    def pos(self):
        return np.array([self.x, self.y])


@dataclass
class Episode:
    frames: np.ndarray   # (T+1, G, G)
    actions: np.ndarray  # (T, 2)
    states: np.ndarray   # (T+1, 2) agent positions; the wall is fixed by the env config
    tokens: np.ndarray   # (T+1, N, D)
    seed: int

    def __post_init__(self):
        if not (len(self.actions) == len(self.frames) - 1 == len(self.states) - 1):
            raise FormatError("episode needs len(actions) = len(frames) - 1 = len(states) - 1")


class Tokenizer(object):
    '''frozen linear patch encoder; W is drawn once from the seed and never trained'''

    def __init__(self, patch, token_dim, seed):
        self.patch = patch
        self.token_dim = token_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.W = rng.standard_normal((patch * patch, token_dim)) / patch
        self.W.setflags(write=False)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.patch, cfg.token_dim, cfg.tokenizer_seed)


def initial_state(cfg, x, y):
    return EnvState(float(x), float(y), cfg.wall_x, cfg.gap_lo, cfg.gap_hi)


def step(s, a, a_max=0.1):
    '''moves the agent by the clipped action. a move that would cross the wall
    line outside the door stops CONTACT_EPS short of the wall, at the height
    where it made contact. a move never ends on the wall line itself: one
    that would is carried CONTACT_EPS past it through the door.'''
    a = np.clip(np.asarray(a, dtype=np.float64), -a_max, a_max)
    x0, y0 = s.x, s.y
    x1 = min(max(x0 + a[0], 0.0), 1.0)
    y1 = min(max(y0 + a[1], 0.0), 1.0)
    wx = s.wall_x
    if x0 == wx and x1 == wx:
        # standing in the doorway; sliding along the line stays inside the gap
        y1 = min(max(y1, s.gap_lo + CONTACT_EPS), s.gap_hi - CONTACT_EPS)
    elif (x0 <= wx <= x1) or (x1 <= wx <= x0):
        t = (wx - x0) / (x1 - x0)
        yc = y0 + t * (y1 - y0)
        ahead = 1.0 if x1 > x0 else -1.0
        if not (s.gap_lo < yc < s.gap_hi):
            x1 = wx - ahead * CONTACT_EPS
            y1 = yc
        elif x1 == wx:
            x1 = wx + ahead * CONTACT_EPS
    return EnvState(x1, y1, s.wall_x, s.gap_lo, s.gap_hi)


def render(s, cfg):
    '''G x G frame in [0,1]: the wall column at intensity 1 with the door cleared,
    the agent as a disc of intensity 1 with a linear halo. row 0 is y near 0.'''
    g = cfg.grid
    centers = (np.arange(g) + 0.5) / g
    frame = np.zeros((g, g))
    col = min(int(s.wall_x * g), g - 1)
    frame[:, col] = np.where((centers > s.gap_lo) & (centers < s.gap_hi), 0.0, 1.0)
    cy, cx = np.meshgrid(centers, centers, indexing='ij')
    d = np.hypot(cx - s.x, cy - s.y) * g
    agent = np.clip(1.0 - np.maximum(d - cfg.agent_radius_px, 0.0) / cfg.agent_falloff_px, 0.0, 1.0)
    return np.maximum(frame, agent)


def patchify(frames, patch):
    '''(..., G, G) frames -> (..., N, P*P) patches, row-major over the patch grid'''
    frames = np.asarray(frames, dtype=np.float64)
    g = frames.shape[-1]
    if frames.shape[-2] != g or g % patch != 0:
        raise ConfigError("frame %s cannot be split into %dx%d patches" % (frames.shape[-2:], patch, patch))
    n = g // patch
    lead = frames.shape[:-2]
    p = frames.reshape(lead + (n, patch, n, patch))
    p = np.moveaxis(p, -3, -2)
    return p.reshape(lead + (n * n, patch * patch))


def tokenize(tok, f):
    '''frame(s) -> tokens of shape (..., N, D)'''
    return patchify(f, tok.patch) @ tok.W


def distance(s, goal):
    return float(np.hypot(s.x - goal.x, s.y - goal.y))


def is_success(s, goal, cfg):
    return distance(s, goal) <= cfg.success_radius


def _uniform_start(rng, cfg):
    # keep clear of the wall line so no episode starts in contact
    while True:
        x, y = rng.uniform(0.0, 1.0, size=2)
        if abs(x - cfg.wall_x) > 2 * CONTACT_EPS:
            return initial_state(cfg, x, y)


def sample_task(rng, cfg, margin=0.1):
    '''start in one room, goal in the other, both away from the borders'''
    left = (margin, cfg.wall_x - margin)
    right = (cfg.wall_x + margin, 1.0 - margin)
    if rng.random() < 0.5:
        left, right = right, left
    band = (margin, 1.0 - margin)
    start = initial_state(cfg, rng.uniform(*left), rng.uniform(*band))
    goal = initial_state(cfg, rng.uniform(*right), rng.uniform(*band))
    return start, goal


def run_episode(cfg, tok, ep_len, seed, index):
    rng = np.random.default_rng([seed, index])
    s = _uniform_start(rng, cfg)
    states = [s]
    actions = rng.uniform(-cfg.a_max, cfg.a_max, size=(ep_len, 2))
    for a in actions:
        s = step(s, a, cfg.a_max)
        states.append(s)
    frames = np.stack([render(st, cfg) for st in states])
    return Episode(frames=frames, actions=actions,
                   states=np.array([[st.x, st.y] for st in states]),
                   tokens=tokenize(tok, frames), seed=seed)


class Dataset(object):
    def __init__(self, cfg, episodes, seed):
        self.cfg = cfg
        self.episodes = episodes
        self.seed = seed
        self.tokenizer = Tokenizer.from_config(cfg)

    def __len__(self):
        return len(self.episodes)

    def windows(self, history):
        '''all (history frames, history actions, next tokens, next state) windows.

        returns tokens (W, T, N, D), actions (W, T, 2), targets (W, N, D),
        states (W, 2) with T = history + 1.'''
        T = history + 1
        toks, acts, tgts, sts = [], [], [], []
        for ep in self.episodes:
            for t in range(T - 1, len(ep.actions)):
                toks.append(ep.tokens[t - T + 1:t + 1])
                acts.append(ep.actions[t - T + 1:t + 1])
                tgts.append(ep.tokens[t + 1])
                sts.append(ep.states[t + 1])
        if not toks:
            raise FormatError("episodes are too short for a history of %d frames" % T)
        return np.stack(toks), np.stack(acts), np.stack(tgts), np.stack(sts)

    def observations(self):
        '''every frame's tokens with its agent position: (n, N, D), (n, 2)'''
        return (np.concatenate([ep.tokens for ep in self.episodes]),
                np.concatenate([ep.states for ep in self.episodes]))


def generate_dataset(cfg, n_episodes, ep_len, seed, workers=1):
    '''episodes with uniform random starts and i.i.d. uniform actions.
    episode i draws from the stream (seed, i), so the result does not depend
    on the worker count.'''
    tok = Tokenizer.from_config(cfg)
    log("Generating %d episodes of length %d (seed %d)." % (n_episodes, ep_len, seed))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        episodes = list(pool.map(lambda i: run_episode(cfg, tok, ep_len, seed, i), range(n_episodes)))
    return Dataset(cfg, episodes, seed)


def write_dataset(path, ds):
    tensors = {}
    index = []
    for i, ep in enumerate(ds.episodes):
        key = "ep%05d" % i
        tensors[key + "/frames"] = ep.frames
        tensors[key + "/tokens"] = ep.tokens
        tensors[key + "/actions"] = ep.actions
        tensors[key + "/states"] = ep.states
        index.append({'key': key, 'length': len(ep.actions), 'seed': ep.seed})
    meta = {'kind': 'dataset', 'env': asdict(ds.cfg), 'tokenizer_seed': ds.cfg.tokenizer_seed,
            'seed': ds.seed, 'episodes': index}
    try:
        diffkernel.save_tensors(path, tensors, meta)
    except OSError as e:
        raise FormatError("Failed to write dataset " + path + ": " + str(e.strerror))
    debug("Wrote %d episodes to %s." % (len(ds.episodes), path))


def read_dataset(path):
    try:
        tensors, meta = diffkernel.load_tensors(path)
    except OSError as e:
        raise FormatError("Failed to read dataset " + path + ": " + str(e.strerror))
    if meta.get('kind') != 'dataset':
        raise FormatError(path + " is not a dataset file")
    cfg = EnvConfig(**meta['env'])
    episodes = []
    for e in meta['episodes']:
        k = e['key']
        episodes.append(Episode(frames=tensors[k + "/frames"], actions=tensors[k + "/actions"],
                                states=tensors[k + "/states"], tokens=tensors[k + "/tokens"],
                                seed=e['seed']))
    return Dataset(cfg, episodes, meta['seed'])


def write_preview(path, ds, count, scale=8):
    '''writes the first `count` episodes as PNG strips, one row of frames per episode'''
    os.makedirs(path, exist_ok=True)
    for i, ep in enumerate(ds.episodes[:count]):
        strip = np.concatenate(list(ep.frames), axis=1)
        im = Image.fromarray((strip * 255).round().astype(np.uint8))
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
        im.save(os.path.join(path, "episode%05d.png" % i))
        im.close()
