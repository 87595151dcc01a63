"""Transformer trunk: full and asymmetric attention, the nine-block taxonomy,
relevance-scored background elimination, and the cosine keep-ratio schedule.

The attention matrix over [prompt; template; search] splits into nine blocks
by (query segment x key segment).  The asymmetric rule keeps blocks 1, 5, 7,
8, 9 (self-attention everywhere plus search->prompt and search->template
cross-attention) and prunes 2, 3, 4, 6: prompt and template rows attend only
within their own segment, search rows attend everything alive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import KeepRatioSchedule, ModelConfig
from .embed import TokenSet
from .numerics import ParamStore, Tensor, concat, trunc_normal

# attention blocks pruned by the asymmetric rule, numbered row-major
# (1 = prompt self ... 9 = search self)
PRUNED_BLOCKS = (2, 3, 4, 6)
KEPT_BLOCKS = (1, 5, 7, 8, 9)


@dataclass(frozen=True)
class BlockMap:
    """3x3 partition of an L x L attention matrix by token segment."""

    l_prompt: int
    l_template: int
    l_search: int

    def _ranges(self):
        p, t = self.l_prompt, self.l_template
        return (
            (0, p),
            (p, p + t),
            (p + t, p + t + self.l_search),
        )

    def block(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(query indices, key indices) of block i in 1..9."""
        if not 1 <= i <= 9:
            raise ValueError("block index must be 1..9")
        q_seg, k_seg = divmod(i - 1, 3)
        r = self._ranges()
        q = np.arange(*r[q_seg])
        k = np.arange(*r[k_seg])
        return q, k

    def total(self) -> int:
        return self.l_prompt + self.l_template + self.l_search


def asymmetric_mask(bm: BlockMap) -> np.ndarray:
    """Additive (L, L) mask with -inf on the pruned blocks."""
    L = bm.total()
    mask = np.zeros((L, L))
    for b in PRUNED_BLOCKS:
        q, k = bm.block(b)
        if q.size and k.size:
            mask[np.ix_(q, k)] = -np.inf
    return mask


def init_trunk_params(store: ParamStore, cfg: ModelConfig,
                      rng: np.random.Generator, dtype=np.float64) -> None:
    C = cfg.channels
    hidden = cfg.mlp_ratio * C
    for i in range(1, cfg.depth + 1):
        pre = f"trunk.layer{i}"
        store.add(f"{pre}.norm1.gamma", np.ones(C, dtype=dtype))
        store.add(f"{pre}.norm1.beta", np.zeros(C, dtype=dtype))
        store.add(f"{pre}.qkv.weight", trunc_normal(rng, (C, 3 * C), dtype=dtype))
        store.add(f"{pre}.qkv.bias", np.zeros(3 * C, dtype=dtype))
        store.add(f"{pre}.proj.weight", trunc_normal(rng, (C, C), dtype=dtype))
        store.add(f"{pre}.proj.bias", np.zeros(C, dtype=dtype))
        store.add(f"{pre}.norm2.gamma", np.ones(C, dtype=dtype))
        store.add(f"{pre}.norm2.beta", np.zeros(C, dtype=dtype))
        store.add(f"{pre}.mlp.fc1.weight", trunc_normal(rng, (C, hidden), dtype=dtype))
        store.add(f"{pre}.mlp.fc1.bias", np.zeros(hidden, dtype=dtype))
        store.add(f"{pre}.mlp.fc2.weight", trunc_normal(rng, (hidden, C), dtype=dtype))
        store.add(f"{pre}.mlp.fc2.bias", np.zeros(C, dtype=dtype))


@dataclass
class AttnInternals:
    """Post-softmax per-head attention outputs for the alive search rows."""

    search_head_out: np.ndarray   # (heads, L_search_alive, head_dim)
    n_alive_keys: int


def _split_qkv(qkv: Tensor, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    L = qkv.shape[0]
    C = qkv.shape[1] // 3
    d = C // heads
    stacked = qkv.reshape(L, 3, heads, d).transpose((1, 2, 0, 3))  # (3, h, L, d)
    q = stacked.gather_rows([0]).reshape(heads, L, d)
    k = stacked.gather_rows([1]).reshape(heads, L, d)
    v = stacked.gather_rows([2]).reshape(heads, L, d)
    return q, k, v


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float,
            additive_mask: np.ndarray | None = None) -> Tensor:
    logits = (q @ k.swapaxes(-1, -2)) * scale
    weights = logits.softmax(axis=-1, additive_mask=additive_mask)
    return weights @ v


def block_forward(
    x: Tensor,
    store: ParamStore,
    layer: int,
    cfg: ModelConfig,
    l_prompt: int,
    l_template: int,
    asymmetric: bool = True,
    additive_mask: np.ndarray | None = None,
    need_internals: bool = False,
) -> tuple[Tensor, AttnInternals | None]:
    """One pre-norm transformer block over the alive rows ``x``.

    ``asymmetric=False`` runs vanilla attention over all rows (optionally
    with an additive logit mask); ``asymmetric=True`` computes the pruned
    route exactly: prompt and template queries see only their own keys.
    """
    pre = f"trunk.layer{layer}"
    h = cfg.heads
    d = cfg.head_dim
    scale = 1.0 / math.sqrt(d)
    La = x.shape[0]
    ls = La - l_prompt - l_template

    xn = x.layer_norm() * store[f"{pre}.norm1.gamma"] + store[f"{pre}.norm1.beta"]
    qkv = xn @ store[f"{pre}.qkv.weight"] + store[f"{pre}.qkv.bias"]
    q, k, v = _split_qkv(qkv, h)

    internals = None
    if not asymmetric:
        out_heads = _attend(q, k, v, scale, additive_mask)
        if need_internals:
            internals = AttnInternals(
                search_head_out=out_heads.data[:, l_prompt + l_template:, :].copy(),
                n_alive_keys=La,
            )
    else:
        if additive_mask is not None:
            raise ValueError("additive masks apply only to the full route")
        p_sl = np.arange(l_prompt)
        t_sl = np.arange(l_prompt, l_prompt + l_template)
        s_sl = np.arange(l_prompt + l_template, La)
        parts = []
        if l_prompt:
            parts.append(_attend(_rows(q, p_sl), _rows(k, p_sl), _rows(v, p_sl), scale))
        if l_template:
            parts.append(_attend(_rows(q, t_sl), _rows(k, t_sl), _rows(v, t_sl), scale))
        if ls:
            search_out = _attend(_rows(q, s_sl), k, v, scale)
            parts.append(search_out)
            if need_internals:
                internals = AttnInternals(
                    search_head_out=search_out.data.copy(), n_alive_keys=La
                )
        out_heads = concat(parts, axis=1)

    merged = out_heads.transpose((1, 0, 2)).reshape(La, cfg.channels)
    attn_out = merged @ store[f"{pre}.proj.weight"] + store[f"{pre}.proj.bias"]
    x = x + attn_out

    xn2 = x.layer_norm() * store[f"{pre}.norm2.gamma"] + store[f"{pre}.norm2.beta"]
    hidden = (xn2 @ store[f"{pre}.mlp.fc1.weight"] + store[f"{pre}.mlp.fc1.bias"]).gelu()
    x = x + (hidden @ store[f"{pre}.mlp.fc2.weight"] + store[f"{pre}.mlp.fc2.bias"])
    return x, internals


def _rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Row subset along the token axis of a (heads, L, d) tensor."""
    return t.swapaxes(0, 1).gather_rows(idx).swapaxes(0, 1)


def relevance_scores(internals: AttnInternals) -> np.ndarray:
    """Confidence that each alive search region covers the target.

    The per-search-query contribution tensor (attention weight times value
    row, over every alive key) average-pooled along the key axis equals that
    query's attention output divided by the alive-key count; its channel norm,
    averaged over heads, is the relevance scalar."""
    o = internals.search_head_out
    if o.shape[1] == 0:
        raise ValueError("no alive search rows to score")
    norms = np.linalg.norm(o, axis=2)          # (heads, L_search_alive)
    return norms.mean(axis=0) / internals.n_alive_keys


def keep_ratio(step: int, schedule: KeepRatioSchedule) -> float:
    """Cosine-annealed keeping ratio; rho(0)=rho_start, rho(T)=rho_end."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.rho_end + 0.5 * (schedule.rho_start - schedule.rho_end) * (1.0 + cos)


@dataclass
class EliminationTrace:
    layer: int
    rows: np.ndarray      # global row indices scored (alive search rows)
    scores: np.ndarray    # relevance per scored row
    kept: np.ndarray      # global row indices kept
    dropped: np.ndarray   # global row indices eliminated


def eliminate(tokens: TokenSet, scores: np.ndarray, rho: float,
              layer: int = 0) -> EliminationTrace:
    """Keep the top-scoring search rows so that roughly ``rho`` of all alive
    tokens survive; prompt/template rows are never candidates.  Ties break
    toward the lower row index.  Mutates the alive mask in place."""
    rows = tokens.alive_search_rows()
    if scores.shape != rows.shape:
        raise ValueError("scores must cover exactly the alive search rows")
    n_keep_total = math.floor(rho * (tokens.l_prompt + tokens.l_template + rows.size) + 0.5)
    k = n_keep_total - tokens.l_prompt - tokens.l_template
    k = max(1, min(k, rows.size))
    order = np.argsort(-scores, kind="stable")   # stable: ties keep lower index
    kept_local = np.sort(order[:k])
    dropped_local = np.sort(order[k:])
    kept = rows[kept_local]
    dropped = rows[dropped_local]
    tokens.alive[dropped] = False
    return EliminationTrace(layer=layer, rows=rows, scores=scores.copy(),
                            kept=kept, dropped=dropped)
