import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectrack.attention import (
    BlockMap,
    KEPT_BLOCKS,
    PRUNED_BLOCKS,
    asymmetric_mask,
    block_forward,
    eliminate,
    init_trunk_params,
    keep_ratio,
    relevance_scores,
)
from spectrack.config import DESK_PROFILE, KeepRatioSchedule
from spectrack.embed import TokenSet
from spectrack.model import Tracker, init_params
from spectrack.numerics import ParamStore, Tensor, grad_check


def _cfg(C=32, heads=4, depth=1):
    return DESK_PROFILE.with_(channels=C, heads=heads, depth=depth)


def _trunk_store(cfg, seed=0):
    store = ParamStore()
    init_trunk_params(store, cfg, np.random.default_rng(seed))
    return store


def _token_set(lp, lt, ls, C, rng):
    # grid bookkeeping: one frame of ls "cells" (ls need not be square here)
    tokens = Tensor(rng.normal(size=(lp + lt + ls, C)))
    return TokenSet(tokens=tokens, l_prompt=lp, l_template=lt,
                    n_frames=ls, grid=1, alive=np.ones(lp + lt + ls, bool))


# -- block taxonomy ----------------------------------------------------------------


def test_blocks_tile_full_matrix():
    bm = BlockMap(l_prompt=2, l_template=3, l_search=4)
    L = bm.total()
    covered = np.zeros((L, L), dtype=int)
    for i in range(1, 10):
        q, k = bm.block(i)
        covered[np.ix_(q, k)] += 1
    assert (covered == 1).all()


def test_pruned_kept_partition():
    assert sorted(PRUNED_BLOCKS + KEPT_BLOCKS) == list(range(1, 10))


def test_asymmetric_mask_blocks():
    bm = BlockMap(1, 2, 3)
    m = asymmetric_mask(bm)
    for b in PRUNED_BLOCKS:
        q, k = bm.block(b)
        assert np.isneginf(m[np.ix_(q, k)]).all()
    for b in KEPT_BLOCKS:
        q, k = bm.block(b)
        assert (m[np.ix_(q, k)] == 0).all()


# -- asymmetric vs masked-full oracle ------------------------------------------------


@pytest.mark.parametrize("lt,ls,C", [(4, 8, 16), (16, 64, 64), (4, 64, 16)])
def test_asym_equals_masked_full(lt, ls, C):
    cfg = _cfg(C=C)
    store = _trunk_store(cfg)
    rng = np.random.default_rng(lt * 1000 + ls + C)
    x = Tensor(rng.normal(size=(1 + lt + ls, C)))
    ya, _ = block_forward(x, store, 1, cfg, 1, lt, asymmetric=True)
    mask = asymmetric_mask(BlockMap(1, lt, ls))
    yf, _ = block_forward(x, store, 1, cfg, 1, lt, asymmetric=False,
                          additive_mask=mask)
    assert np.abs(ya.data - yf.data).max() <= 1e-9


def test_search_only_asym_equals_full():
    # degenerate partition: no prompt/template rows
    cfg = _cfg()
    store = _trunk_store(cfg)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(6, cfg.channels)))
    ya, _ = block_forward(x, store, 1, cfg, 0, 0, asymmetric=True)
    yf, _ = block_forward(x, store, 1, cfg, 0, 0, asymmetric=False)
    assert np.abs(ya.data - yf.data).max() <= 1e-12


def test_template_output_invariant_to_search_tokens():
    cfg = _cfg()
    store = _trunk_store(cfg)
    rng = np.random.default_rng(1)
    lp, lt, ls = 1, 4, 6
    base = rng.normal(size=(lp + lt + ls, cfg.channels))
    mod = base.copy()
    mod[lp + lt:] = rng.normal(size=(ls, cfg.channels))
    ya, _ = block_forward(Tensor(base), store, 1, cfg, lp, lt, asymmetric=True)
    yb, _ = block_forward(Tensor(mod), store, 1, cfg, lp, lt, asymmetric=True)
    front = lp + lt
    assert np.abs(ya.data[:front] - yb.data[:front]).max() == 0.0
    assert np.abs(ya.data[front:] - yb.data[front:]).max() > 0  # search did change


def test_single_token_softmax_is_one():
    cfg = _cfg()
    store = _trunk_store(cfg)
    x = Tensor(np.random.default_rng(2).normal(size=(1, cfg.channels)))
    y, _ = block_forward(x, store, 1, cfg, 0, 0, asymmetric=False)
    assert y.shape == (1, cfg.channels)


def test_identical_tokens_identical_outputs():
    cfg = _cfg()
    store = _trunk_store(cfg)
    row = np.random.default_rng(3).normal(size=cfg.channels)
    x = Tensor(np.stack([row, row]))
    y, _ = block_forward(x, store, 1, cfg, 0, 0, asymmetric=False)
    assert np.abs(y.data[0] - y.data[1]).max() < 1e-12


def test_dense_reference_small_instance():
    # independently coded single-head dense attention as the oracle
    cfg = _cfg(C=16, heads=1)
    store = _trunk_store(cfg, seed=5)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(8, 16))

    def reference(x):
        g1 = store["trunk.layer1.norm1.gamma"].data
        b1 = store["trunk.layer1.norm1.beta"].data
        mu = x.mean(-1, keepdims=True)
        xn = (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-6)
        xn = xn * g1 + b1
        qkv = xn @ store["trunk.layer1.qkv.weight"].data + store["trunk.layer1.qkv.bias"].data
        q, k, v = qkv[:, :16], qkv[:, 16:32], qkv[:, 32:]
        logits = q @ k.T / np.sqrt(16)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        attn = (w @ v) @ store["trunk.layer1.proj.weight"].data + store["trunk.layer1.proj.bias"].data
        h = x + attn
        mu2 = h.mean(-1, keepdims=True)
        hn = (h - mu2) / np.sqrt(((h - mu2) ** 2).mean(-1, keepdims=True) + 1e-6)
        hn = hn * store["trunk.layer1.norm2.gamma"].data + store["trunk.layer1.norm2.beta"].data
        from scipy.special import erf
        z = hn @ store["trunk.layer1.mlp.fc1.weight"].data + store["trunk.layer1.mlp.fc1.bias"].data
        z = z * 0.5 * (1 + erf(z / np.sqrt(2)))
        return h + z @ store["trunk.layer1.mlp.fc2.weight"].data + store["trunk.layer1.mlp.fc2.bias"].data

    y, _ = block_forward(Tensor(x), store, 1, cfg, 0, 0, asymmetric=False)
    assert np.abs(y.data - reference(x)).max() <= 1e-9


def test_attention_block_grad_check():
    # full asymmetric block at a random 8-token input
    cfg = _cfg(C=16, heads=4)
    store = _trunk_store(cfg, seed=7)
    x0 = np.random.default_rng(11).normal(size=(8, 16))

    def fn(x):
        y, _ = block_forward(x, store, 1, cfg, 1, 3, asymmetric=True)
        return (y * np.arange(1, 17)).sum()

    assert grad_check(fn, [x0], eps=1e-5) <= 1e-6


# -- relevance scores -----------------------------------------------------------------


def test_relevance_brute_force_contribution_tensor():
    cfg = _cfg(C=16, heads=2)
    store = _trunk_store(cfg, seed=9)
    rng = np.random.default_rng(10)
    lp, lt, ls = 1, 3, 8     # 12-token instance
    x = Tensor(rng.normal(size=(lp + lt + ls, 16)))
    _, internals = block_forward(x, store, 1, cfg, lp, lt, asymmetric=True,
                                 need_internals=True)
    scores = relevance_scores(internals)

    # brute force: rebuild per-head search attention from scratch
    g1 = store["trunk.layer1.norm1.gamma"].data
    b1 = store["trunk.layer1.norm1.beta"].data
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xn = (xd - mu) / np.sqrt(((xd - mu) ** 2).mean(-1, keepdims=True) + 1e-6)
    xn = xn * g1 + b1
    qkv = xn @ store["trunk.layer1.qkv.weight"].data + store["trunk.layer1.qkv.bias"].data
    L, d, h = lp + lt + ls, 8, 2
    q = qkv[:, :16].reshape(L, h, d).transpose(1, 0, 2)
    k = qkv[:, 16:32].reshape(L, h, d).transpose(1, 0, 2)
    v = qkv[:, 32:].reshape(L, h, d).transpose(1, 0, 2)
    expected = np.zeros(ls)
    for j in range(ls):
        per_head = []
        for head in range(h):
            logits = q[head, lp + lt + j] @ k[head].T / np.sqrt(d)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            contrib = w[:, None] * v[head]          # (L, d) contribution rows
            pooled = contrib.mean(axis=0)           # average over the key axis
            per_head.append(np.linalg.norm(pooled))
        expected[j] = np.mean(per_head)
    assert np.abs(scores - expected).max() <= 1e-12


def test_relevance_uniform_symmetry():
    # identical tokens -> identical attention -> equal scores
    cfg = _cfg(C=16, heads=2)
    store = _trunk_store(cfg, seed=4)
    row = np.random.default_rng(6).normal(size=16)
    x = Tensor(np.tile(row, (6, 1)))
    _, internals = block_forward(x, store, 1, cfg, 1, 2, asymmetric=True,
                                 need_internals=True)
    scores = relevance_scores(internals)
    assert np.abs(scores - scores[0]).max() < 1e-12


# -- keep-ratio schedule ---------------------------------------------------------------


def test_keep_ratio_endpoints_and_midpoint():
    sch = KeepRatioSchedule(rho_start=1.0, rho_end=0.7, total_steps=200)
    assert keep_ratio(0, sch) == 1.0
    assert keep_ratio(200, sch) == pytest.approx(0.7, abs=1e-15)
    assert keep_ratio(100, sch) == pytest.approx(0.85, abs=1e-15)


def test_keep_ratio_monotone_non_increasing():
    sch = KeepRatioSchedule(rho_start=0.9, rho_end=0.5, total_steps=137)
    vals = [keep_ratio(t, sch) for t in range(138)]
    assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))


def test_keep_ratio_range_checked():
    sch = KeepRatioSchedule(1.0, 0.7, 10)
    with pytest.raises(ValueError):
        keep_ratio(11, sch)
    with pytest.raises(ValueError):
        keep_ratio(-1, sch)


# -- elimination -------------------------------------------------------------------------


def test_eliminate_worked_example():
    # 10 alive search rows, L_P=1, L_T=4, rho=0.5 -> keep round(0.5*15)-5 = 3
    rng = np.random.default_rng(12)
    ts = _token_set(1, 4, 10, 8, rng)
    scores = rng.normal(size=10)
    trace = eliminate(ts, scores, rho=0.5)
    assert len(trace.kept) == 3
    assert len(trace.dropped) == 7
    assert ts.alive[:5].all()


def test_eliminate_rho_one_keeps_all():
    rng = np.random.default_rng(13)
    ts = _token_set(1, 4, 10, 8, rng)
    trace = eliminate(ts, rng.normal(size=10), rho=1.0)
    assert len(trace.dropped) == 0
    assert ts.alive.all()


def test_eliminate_tie_break_low_index():
    rng = np.random.default_rng(14)
    ts = _token_set(1, 4, 3, 8, rng)
    # keep count: round(0.25 * 8) - 5 = -3 -> clamped to 1
    trace = eliminate(ts, np.array([5.0, 5.0, 1.0]), rho=0.25)
    assert len(trace.kept) == 1
    assert trace.kept[0] == ts.search_start  # lower-index row among the tied 5s


@given(st.integers(0, 2**32 - 1), st.integers(4, 40), st.floats(0.05, 1.0))
@settings(max_examples=60, deadline=None)
def test_eliminate_matches_brute_force_sort(seed, ls, rho):
    rng = np.random.default_rng(seed)
    lp, lt = 1, 4
    ts = _token_set(lp, lt, ls, 8, rng)
    scores = rng.choice([0.0, 0.5, 1.0, 2.0, 3.0], size=ls)  # plenty of ties
    trace = eliminate(ts, scores, rho=rho)
    k = int(np.floor(rho * (lp + lt + ls) + 0.5)) - lp - lt
    k = max(1, min(k, ls))
    order = sorted(range(ls), key=lambda i: (-scores[i], i))
    expected = np.sort(np.array(order[:k]) + ts.search_start)
    assert np.array_equal(trace.kept, expected)
    assert np.array_equal(np.sort(np.concatenate([trace.kept, trace.dropped])),
                          ts.search_start + np.arange(ls))


def test_monotone_elimination_across_layers():
    rng = np.random.default_rng(15)
    ts = _token_set(1, 4, 32, 8, rng)
    dropped_sets = []
    alive_counts = [ts.alive_search_rows().size]
    for layer in (1, 2, 3):
        rows = ts.alive_search_rows()
        trace = eliminate(ts, rng.normal(size=rows.size), rho=0.7, layer=layer)
        dropped_sets.append(set(trace.dropped))
        alive_counts.append(ts.alive_search_rows().size)
    assert all(a >= b for a, b in zip(alive_counts, alive_counts[1:]))
    # dropped sets are disjoint and never resurface
    assert not (dropped_sets[0] & dropped_sets[1])
    assert not (dropped_sets[0] & dropped_sets[2])
    assert not (dropped_sets[1] & dropped_sets[2])
    final = set(ts.alive_search_rows())
    union = dropped_sets[0] | dropped_sets[1] | dropped_sets[2]
    assert final == set(range(5, 5 + 32)) - union


def test_scores_must_cover_alive_rows():
    rng = np.random.default_rng(16)
    ts = _token_set(1, 4, 10, 8, rng)
    with pytest.raises(ValueError):
        eliminate(ts, rng.normal(size=9), rho=0.5)


# -- dead rows are fully masked ------------------------------------------------------------


def test_output_independent_of_dead_row_contents():
    cfg = DESK_PROFILE.with_(channels=32, heads=4, depth=2, elim_layers=(1,))
    params = init_params(cfg, seed=0)
    tracker = Tracker(cfg, params)
    rng = np.random.default_rng(17)
    tmpl = rng.uniform(0, 1, (48, 48, 8))
    searches = [rng.uniform(0, 1, (96, 96, 8)) for _ in range(2)]

    res1 = tracker.forward(tmpl, searches, rho=0.6)
    dead = np.flatnonzero(~res1.tokens.alive)
    assert dead.size > 0

    # rerun with identical inputs but scribble over dead rows mid-flight by
    # monkeypatching the trunk entry: instead, verify determinism first
    res2 = tracker.forward(tmpl, searches, rho=0.6)
    assert np.array_equal(res1.tokens.tokens.data[res1.tokens.alive],
                          res2.tokens.tokens.data[res2.tokens.alive])
    for h1, h2 in zip(res1.heads, res2.heads):
        assert np.array_equal(h1.cla.data, h2.cla.data)

    # scribbling on dead rows of the final token matrix must not leak into
    # any downstream consumer (head reads alive rows + placeholder only)
    from spectrack.head import head_forward
    tampered = res1.tokens
    tampered.tokens.data[dead] = 1e6
    heads_t = head_forward(tampered, params, cfg)
    for h1, ht in zip(res1.heads, heads_t):
        assert np.array_equal(h1.cla.data, ht.cla.data)
        assert np.array_equal(h1.bbox.data, ht.bbox.data)
