import numpy as np
import pytest

from sparsewm import diffkernel as dk
from sparsewm import envsim, worldmodel as wm
from sparsewm.errors import ConfigError, DegenerateInputError, DimensionError, FormatError

CFG = wm.ModelConfig(n_tokens=6, token_dim=4, n_layers=2, n_heads=2, embed_dim=8,
                     action_proj_dim=3, history_len=2, dropout=0.0)


def make_params(seed=0, cfg=CFG):
    return wm.ModelParams.init(cfg, np.random.default_rng(seed))


def make_inputs(rng, T=3, B=None, cfg=CFG):
    lead = (T,) if B is None else (B, T)
    return (rng.standard_normal(lead + (cfg.n_tokens, cfg.token_dim)),
            rng.standard_normal(lead + (cfg.action_dim,)))


def test_group_sizes_uniform():
    rng = np.random.default_rng(0)
    N = 8
    sizes = np.array([wm.sample_group_assignment(rng, N).size0 for _ in range(10000)])
    counts = np.bincount(sizes, minlength=N)[1:]
    expected = 10000 / (N - 1)
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # 99th percentile of chi-square with 6 degrees of freedom
    assert chi2 < 16.81


def test_grouping_needs_two_tokens():
    with pytest.raises(DegenerateInputError):
        wm.sample_group_assignment(np.random.default_rng(0), 1)


def test_mask_structure():
    grp = wm.GroupAssignment(groups=np.array([0, 1, 1, 0, 1, 0], dtype=np.int8), size0=3)
    allowed = wm.build_mask(CFG, grp).allowed
    n = CFG.n_tokens
    frame = np.repeat(np.arange(CFG.window), n)
    g = np.tile(grp.groups, CFG.window)
    for i in range(len(frame)):
        for j in range(len(frame)):
            expected = frame[j] <= frame[i] and g[i] == g[j]
            assert allowed[i, j] == expected


def test_cross_group_attention_vanishes():
    params = make_params()
    rng = np.random.default_rng(1)
    z, a = make_inputs(rng)
    grp = wm.sample_group_assignment(rng, CFG.n_tokens)
    mask = wm.build_mask(CFG, grp)
    record = []
    wm.forward(params, z, a, mask=mask, attn_record=record)
    for w in record:
        assert np.all(w[..., ~mask.allowed] <= 1e-12)


def test_causality():
    '''changing the last frame never changes predictions made at earlier frames'''
    params = make_params()
    rng = np.random.default_rng(2)
    z, a = make_inputs(rng)
    out = wm.forward(params, z, a, all_frames=True).data
    z2 = z.copy()
    z2[-1] += rng.standard_normal(z2[-1].shape)
    a2 = a.copy()
    a2[-1] += 1.0
    out2 = wm.forward(params, z2, a2, all_frames=True).data
    assert np.array_equal(out[:-1], out2[:-1])
    assert not np.allclose(out[-1], out2[-1])


def test_grouped_prediction_depends_only_on_own_group():
    params = make_params()
    rng = np.random.default_rng(3)
    z, a = make_inputs(rng)
    grp = wm.GroupAssignment(groups=np.array([0, 0, 0, 1, 1, 1], dtype=np.int8), size0=3)
    mask = wm.build_mask(CFG, grp)
    out = wm.forward(params, z, a, mask=mask).data
    z2 = z.copy()
    z2[:, 3:] += 5.0
    out2 = wm.forward(params, z2, a, mask=mask).data
    assert np.allclose(out[:3], out2[:3], atol=1e-12)


def test_subset_forward_matches_grouped_forward():
    '''running only the kept tokens equals the grouped full pass for that group'''
    params = make_params()
    rng = np.random.default_rng(4)
    z, a = make_inputs(rng)
    keep = np.array([0, 2, 5])
    groups = np.ones(CFG.n_tokens, dtype=np.int8)
    groups[keep] = 0
    mask = wm.build_mask(CFG, wm.GroupAssignment(groups=groups, size0=3))
    full = wm.forward(params, z, a, mask=mask).data
    sub = wm.forward(params, z, a, keep=keep).data
    assert np.allclose(full[keep], sub, atol=1e-10)


def test_forward_shapes_and_errors():
    params = make_params()
    rng = np.random.default_rng(5)
    z, a = make_inputs(rng, B=4)
    assert wm.forward(params, z, a).shape == (4, CFG.n_tokens, CFG.token_dim)
    z1, a1 = make_inputs(rng, T=1)
    assert wm.forward(params, z1, a1).shape == (CFG.n_tokens, CFG.token_dim)
    with pytest.raises(DimensionError):
        wm.forward(params, *make_inputs(rng, T=4))
    with pytest.raises(DimensionError):
        wm.forward(params, z1, a1, keep=[0, CFG.n_tokens])


def test_token_grid_history():
    params = make_params()
    rng = np.random.default_rng(6)
    z, a = make_inputs(rng)
    grids = [wm.TokenGrid(tokens=t, t=i) for i, t in enumerate(z)]
    assert np.array_equal(wm.forward(params, grids, a).data, wm.forward(params, z, a).data)


def test_training_reduces_loss():
    params = make_params(cfg=CFG)
    rng = np.random.default_rng(7)
    tokens, actions = make_inputs(rng, B=32)
    targets = np.full((32, CFG.n_tokens, CFG.token_dim), 0.8)
    st = dk.AdamState(lr=1e-2)
    losses = [wm.train_step(params, st, (tokens, actions, targets), rng)[1] for _ in range(80)]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_full_policy_and_bad_policy():
    params = make_params()
    rng = np.random.default_rng(8)
    tokens, actions = make_inputs(rng, B=4)
    _, loss = wm.train_step(params, dk.AdamState(), (tokens, actions, tokens[:, -1]), rng, 'full')
    assert np.isfinite(loss)
    with pytest.raises(ConfigError):
        wm.train_step(params, dk.AdamState(), (tokens, actions, tokens[:, -1]), rng, 'other')


def test_checkpoint(tmp_path):
    params = make_params(seed=9).astype(np.float32)
    path = str(tmp_path / "model.spwm")
    params.save(path, 'grouped')
    back, policy = wm.ModelParams.load(path)
    assert policy == 'grouped'
    assert back.cfg == CFG
    assert back.dtype == np.float32
    for name, t in params.items():
        assert np.array_equal(back[name].data, t.data)
    assert (tmp_path / "model.spwm.json").exists()


def test_load_rejects_datasets(tmp_path):
    path = str(tmp_path / "data.spwm")
    envsim.write_dataset(path, envsim.generate_dataset(envsim.EnvConfig(), 1, 3, seed=0))
    with pytest.raises(FormatError):
        wm.ModelParams.load(path)


def test_rollout_counts_and_matches_forward():
    params = make_params()
    rng = np.random.default_rng(10)
    z, a = make_inputs(rng, T=2)
    plan = rng.standard_normal((5, 3, 2))
    wm.forward_calls.reset()
    pred = wm.rollout(params, np.broadcast_to(z, (5,) + z.shape), np.broadcast_to(a[:1], (5, 1, 2)), plan)
    assert pred.shape == (5, CFG.n_tokens, CFG.token_dim)
    assert wm.forward_calls.total == 5 * 3
    # first rollout step is a plain forward on the history plus the first planned action
    one = wm.rollout(params, z, a[:1], plan[0, :1])
    direct = wm.forward(params, z, np.stack([a[0], plan[0, 0]])).data
    assert np.allclose(one, direct)


def test_rollout_subset_and_corruption():
    params = make_params()
    rng = np.random.default_rng(11)
    z, a = make_inputs(rng, T=1)
    plan = rng.standard_normal((4, 2))
    calls = []

    def corrupt(p):
        calls.append(p.shape)
        return p

    pred = wm.rollout(params, z, a[:0], plan, keep=[1, 4], corrupt=corrupt)
    assert pred.shape == (2, CFG.token_dim)
    assert calls == [(1, 2, CFG.token_dim)] * 4
    with pytest.raises(DegenerateInputError):
        wm.rollout(params, z, a[:0], plan[:0])


def test_two_step_rollout_composes_forward():
    params = make_params()
    rng = np.random.default_rng(12)
    z, a = make_inputs(rng, T=2)
    plan = rng.standard_normal((2, CFG.action_dim))
    first = wm.forward(params, z, np.stack([a[0], plan[0]])).data
    second = wm.forward(params, np.concatenate([z, first[None]]), np.stack([a[0], plan[0], plan[1]])).data
    pred = wm.rollout(params, z, a[:1], plan)
    assert np.allclose(pred, second, rtol=0, atol=1e-12)


def test_forward_is_reproducible():
    rng = np.random.default_rng(13)
    z, a = make_inputs(rng, B=3)
    one = wm.forward(make_params(seed=4), z, a).data
    two = wm.forward(make_params(seed=4), z, a).data
    assert np.array_equal(one, two)
    assert np.array_equal(one, wm.forward(make_params(seed=4), z, a).data)


def test_exact_targets_give_no_update():
    params = make_params()
    rng = np.random.default_rng(14)
    tokens, actions = make_inputs(rng, B=4)
    target = wm.forward(params, tokens, actions).data
    before = {k: t.data.copy() for k, t in params.items()}
    params.zero_grad()
    with dk.Graph() as g:
        loss = dk.token_mse(wm.forward(params, tokens, actions), target)
        g.backward(loss)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-24)
    for _, t in params.items():
        assert t.grad is None or np.max(np.abs(t.grad)) < 1e-12
    _, value = wm.train_step(params, dk.AdamState(), (tokens, actions, target), rng, 'full')
    assert value == pytest.approx(0.0, abs=1e-24)
    for k, t in params.items():
        assert np.allclose(t.data, before[k], rtol=0, atol=1e-8)


def test_grouped_and_full_training_diverge():
    rng = np.random.default_rng(15)
    tokens, actions = make_inputs(rng, B=8)
    targets = rng.standard_normal((8, CFG.n_tokens, CFG.token_dim))
    trained = {}
    for policy in ('grouped', 'full'):
        params = make_params(seed=5)
        st = dk.AdamState(lr=1e-2)
        step_rng = np.random.default_rng(16)
        for _ in range(5):
            wm.train_step(params, st, (tokens, actions, targets), step_rng, policy)
        trained[policy] = params
    diff = max(np.max(np.abs(trained['grouped'][k].data - t.data)) for k, t in trained['full'].items())
    assert diff > 1e-6
