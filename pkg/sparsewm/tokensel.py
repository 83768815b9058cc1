# tokensel.py -
#   token dropout masks and the competing selection / merging strategies:
#   uniform random, spatially stratified (latin hypercube), world-model
#   attention importance, and agglomerative token clustering with
#   hungarian matching of clusters.
#

from dataclasses import dataclass
from math import gcd

import numpy as np

from sparsewm import worldmodel
from sparsewm.errors import DegenerateInputError, DimensionError

STRATEGIES = ('full', 'random', 'fixed', 'lhs', 'attn-wm', 'atc')


@dataclass(frozen=True)
class DropMask:
    kept: np.ndarray  # sorted unique token indices
    p: float

    @classmethod
    def all(cls, n_tokens):
        return cls(kept=np.arange(n_tokens), p=0.0)

    def __len__(self):
        return len(self.kept)


def keep_count(n_tokens, p):
    '''round((1 - p) N), at least 1'''
    if not 0.0 <= p < 1.0:
        raise DegenerateInputError("drop fraction must be in [0, 1), got %r" % p)
    return max(1, int(round((1.0 - p) * n_tokens)))


def sample_mask_random(rng, n_tokens, p):
    k = keep_count(n_tokens, p)
    if k == n_tokens:
        return DropMask.all(n_tokens)
    return DropMask(kept=np.sort(rng.choice(n_tokens, size=k, replace=False)), p=p)


def _stratified_cells(hp, wp, k):
    # cell i = (i mod Hp, (i + i // lcm) mod Wp); any prefix of this sequence
    # has row and column counts balanced to within one and no repeated cell
    lcm = hp * wp // gcd(hp, wp)
    i = np.arange(k)
    return i % hp, (i + i // lcm) % wp


def _one_per_stratum(rng, side, k):
    return np.array([rng.choice(s) for s in np.array_split(np.arange(side), k)])


def sample_mask_lhs(rng, grid, p):
    '''latin hypercube selection on the patch grid: with k kept tokens the rows
    and columns are cut into k contiguous strata and no two tokens share a
    row or column stratum; beyond k = grid side every row and column holds
    k/side tokens to within one'''
    hp, wp = grid
    k = keep_count(hp * wp, p)
    if k > hp * wp:
        raise DimensionError("cannot keep %d tokens on a %dx%d grid" % (k, hp, wp))
    if k <= min(hp, wp):
        rows = _one_per_stratum(rng, hp, k)
        cols = _one_per_stratum(rng, wp, k)[rng.permutation(k)]
    else:
        r, c = _stratified_cells(hp, wp, k)
        rows = rng.permutation(hp)[r]
        cols = rng.permutation(wp)[c]
    return DropMask(kept=np.sort(rows * wp + cols), p=p)


def attention_importance(maps):
    '''per-token importance from attention maps.

    maps: list over layers of arrays (..., heads, L, L) where L = T * N.
    a key's score is the weight it receives averaged over layers, heads,
    querying positions and batch. returns (L,).
    '''
    received = [m.reshape((-1,) + m.shape[-2:]).mean(axis=(0, 1)) for m in maps]
    return np.mean(received, axis=0)


def top_k(scores, k):
    '''indices of the k highest scores, lower index first on ties, sorted'''
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return np.sort(order[:k])


def score_attention_wm(params, history, actions):
    '''one full forward pass over the current window, returning the importance of
    each token position (N,)'''
    maps = []
    worldmodel.forward(params, history, actions, attn_record=maps)
    per_key = attention_importance(maps)
    n = params.cfg.n_tokens
    return per_key.reshape(-1, n).mean(axis=0)


def mask_attention_wm(params, history, actions, p):
    n = params.cfg.n_tokens
    scores = score_attention_wm(params, history, actions)
    return DropMask(kept=top_k(scores, keep_count(n, p)), p=p)


@dataclass
class ClusterSet:
    labels: np.ndarray     # cluster id per token
    centroids: np.ndarray  # (C, D) mean of member tokens
    sizes: np.ndarray      # members per cluster

    @property
    def count(self):
        return len(self.centroids)

    def pool_matrix(self):
        '''(C, N) averaging weights; pool_matrix() @ tokens == centroids'''
        P = np.zeros((self.count, len(self.labels)))
        P[self.labels, np.arange(len(self.labels))] = 1.0
        return P / self.sizes[:, None]


def _cluster_set(tokens, labels, C):
    sizes = np.bincount(labels, minlength=C)
    if np.any(sizes == 0):
        raise DegenerateInputError("clusters %s have no members" % np.flatnonzero(sizes == 0).tolist())
    centroids = np.zeros((C, tokens.shape[1]))
    np.add.at(centroids, labels, tokens)
    return ClusterSet(labels=labels, centroids=centroids / sizes[:, None], sizes=sizes)


def agglomerate(tokens, C):
    '''bottom-up average-linkage merging under L2 distance until C clusters remain'''
    n = len(tokens)
    diff = tokens[:, None, :] - tokens[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    # linkage between active clusters, kept as sum of pairwise distances
    link = dist.copy()
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = np.arange(n)
    for _ in range(n - C):
        avg = link / np.outer(sizes, sizes)
        avg[~active, :] = np.inf
        avg[:, ~active] = np.inf
        np.fill_diagonal(avg, np.inf)
        i, j = np.unravel_index(np.argmin(avg), avg.shape)
        i, j = min(i, j), max(i, j)
        link[i, :] += link[j, :]
        link[:, i] += link[:, j]
        sizes[i] += sizes[j]
        active[j] = False
        members[members == j] = i
    roots = np.flatnonzero(active)
    relabel = np.full(n, -1)
    relabel[roots] = np.arange(len(roots))
    return relabel[members]


def _fill_empty(labels, d, C):
    # an empty cluster takes the point farthest from its own centroid among
    # clusters that keep at least one member after giving it up
    own = d[np.arange(len(labels)), labels]
    for c in range(C):
        sizes = np.bincount(labels, minlength=C)
        if sizes[c] > 0:
            continue
        donors = sizes[labels] > 1
        if not np.any(donors):
            raise DegenerateInputError("cannot fill %d clusters from %d tokens" % (C, len(labels)))
        far = int(np.argmax(np.where(donors, own, -np.inf)))
        labels[far] = c
        own[far] = d[far, c]
    return labels


def kmeans(tokens, init, iterations=20):
    '''Lloyd iterations from the given centroids. an empty cluster takes a
    point from a cluster with more than one member before centroids are
    updated, so every returned cluster is non-empty'''
    centroids = np.array(init, dtype=np.float64, copy=True)
    C = len(centroids)
    if C > len(tokens):
        raise DimensionError("cannot form %d clusters from %d tokens" % (C, len(tokens)))
    labels = None
    for _ in range(iterations):
        d = ((tokens[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new = _fill_empty(d.argmin(axis=1), d, C)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(C):
            centroids[c] = tokens[labels == c].mean(axis=0)
    return labels


def atc_cluster(tokens, C, anchor=None):
    '''clusters one frame's tokens (N, D) into C groups with exact member means.
    without an anchor: agglomerative, average linkage, L2. with an anchor
    ClusterSet: k-means started from the anchor's centroids.'''
    tokens = np.asarray(getattr(tokens, 'tokens', tokens), dtype=np.float64)
    n = len(tokens)
    if C < 1:
        raise DegenerateInputError("need at least one cluster")
    if C > n:
        raise DimensionError("cannot form %d clusters from %d tokens" % (C, n))
    if anchor is None:
        labels = agglomerate(tokens, C)
    else:
        if anchor.count != C:
            raise DimensionError("anchor has %d clusters, asked for %d" % (anchor.count, C))
        labels = kmeans(tokens, anchor.centroids)
    return _cluster_set(tokens, labels, C)


def hungarian_match(cost):
    '''minimum-cost assignment for a square cost matrix.

    shortest augmenting paths with row/column potentials, one row added
    at a time. returns (assignment, total) where row i goes to column
    assignment[i].
    '''
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DimensionError("cost matrix must be square, got %s" % (cost.shape,))
    if not np.all(np.isfinite(cost)):
        raise DegenerateInputError("cost matrix has non-finite entries")
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)   # owner[j] = row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = np.zeros(n, dtype=np.int64)
    assignment[owner[1:] - 1] = np.arange(n)
    return assignment, float(cost[np.arange(n), assignment].sum())
