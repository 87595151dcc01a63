"""Analytic per-frame cost accountant.

Counting convention, printed in every report: one multiply-accumulate is one
FLOP (the convention common to vision-tracker literature); softmax, layer
normalization, and activations are excluded as negligible.  Embedding, trunk
(QK^T, AV, projections, MLP), prompt encoder, and prediction head are all
included.  In the asymmetric structure, template rows attend only to
themselves, so their whole trunk trajectory can be computed once per sequence
and cached; ``cache_template=True`` (the inference convention) excludes that
amortized work from the per-frame count, ``False`` keeps the structural
count comparable row-for-row against vanilla attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import ModelConfig

CONVENTION = (
    "FLOPs counted as multiply-accumulates (1 MAC = 1 FLOP); softmax/norm "
    "excluded; embedding, trunk, prompt encoder, and head included"
)


@dataclass(frozen=True)
class FlopsOptions:
    attention: str = "asymmetric"           # "symmetric" | "asymmetric"
    cache_template: bool = True             # amortize template rows per sequence
    eliminate: bool = True
    rho_end: float | None = None            # defaults to cfg.rho_end
    head_frames: str = "all"                # "all" | "last"

    def __post_init__(self):
        if self.attention not in ("symmetric", "asymmetric"):
            raise ValueError("attention must be 'symmetric' or 'asymmetric'")
        if self.head_frames not in ("all", "last"):
            raise ValueError("head_frames must be 'all' or 'last'")


@dataclass
class FlopsBreakdown:
    embedding: float
    attn_qk: float
    attn_av: float
    attn_proj: float
    mlp: float
    prompt_encoder: float
    head: float
    alive_per_layer: list[int] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total(self) -> float:
        return (self.embedding + self.attn_qk + self.attn_av + self.attn_proj
                + self.mlp + self.prompt_encoder + self.head)

    @property
    def total_g(self) -> float:
        return self.total / 1e9

    def as_text(self) -> str:
        rows = [
            ("embedding", self.embedding),
            ("attention_qk", self.attn_qk),
            ("attention_av", self.attn_av),
            ("projections", self.attn_proj),
            ("mlp", self.mlp),
            ("prompt_encoder", self.prompt_encoder),
            ("head", self.head),
            ("total", self.total),
        ]
        lines = [f"{name},{val / 1e9:.4f}" for name, val in rows]
        lines.append("alive_per_layer," + " ".join(str(a) for a in self.alive_per_layer))
        lines.append(f"convention,{self.convention}")
        return "component,gflops\n" + "\n".join(lines) + "\n"


def _keep_count(rho: float, l_front: int, alive_search: int) -> int:
    """post-elimination alive search rows (same rule the tracker applies)."""
    k = math.floor(rho * (l_front + alive_search) + 0.5) - l_front
    return max(1, min(k, alive_search))


def alive_search_profile(cfg: ModelConfig, rho_end: float,
                         eliminate: bool) -> list[int]:
    """Alive search-token count entering each layer (length = depth)."""
    alive = cfg.l_search
    front = cfg.l_prompt + cfg.l_template
    profile = []
    for layer in range(1, cfg.depth + 1):
        profile.append(alive)
        if eliminate and layer in cfg.elim_layers and rho_end < 1.0:
            alive = _keep_count(rho_end, front, alive)
    return profile


def count_flops(cfg: ModelConfig, options: FlopsOptions = FlopsOptions(),
                alive_profile: list[int] | None = None) -> FlopsBreakdown:
    """Closed-form per-tracked-frame cost.  ``alive_profile`` overrides the
    analytic elimination schedule with observed per-layer alive counts."""
    C = cfg.channels
    lp, lt = cfg.l_prompt, cfg.l_template
    rho = cfg.rho_end if options.rho_end is None else options.rho_end
    if alive_profile is None:
        alive_profile = alive_search_profile(cfg, rho, options.eliminate)
    if len(alive_profile) != cfg.depth:
        raise ValueError("alive profile length must equal trunk depth")

    cached = options.attention == "asymmetric" and options.cache_template

    # embedding: one patch projection MAC-count per token
    per_token = cfg.patch * cfg.patch * cfg.bands * C
    embed_tokens = cfg.l_search + (0 if cached else lt)
    embedding = embed_tokens * per_token

    qk = av = proj = mlp = 0.0
    for alive in alive_profile:
        l_all = lp + lt + alive
        rows = lp + alive if cached else l_all
        proj += 4.0 * rows * C * C           # fused QKV (3) + output projection
        mlp += 2.0 * cfg.mlp_ratio * rows * C * C
        if options.attention == "symmetric":
            keys = l_all * l_all
        else:
            keys = lp * lp + alive * l_all + (0 if cached else lt * lt)
        qk += keys * C
        av += keys * C

    two_c = 2 * C
    prompt_encoder = 0.0
    if cfg.prompt_mode == "encoder":
        squeezed = two_c // cfg.compress_ratio
        prompt_encoder = cfg.prompt_len * (
            two_c * squeezed + squeezed * two_c + two_c * two_c + two_c * two_c
        )

    frames = cfg.n_search if options.head_frames == "all" else 1
    cells = cfg.l_search_per_frame * frames
    chans = [C, C // 2, C // 4, C // 8]
    head = 0.0
    for out_c in (1, 4):
        dims = chans + [out_c]
        for i in range(4):
            head += 9.0 * dims[i] * dims[i + 1] * cells

    return FlopsBreakdown(
        embedding=float(embedding), attn_qk=float(qk), attn_av=float(av),
        attn_proj=float(proj), mlp=float(mlp),
        prompt_encoder=float(prompt_encoder), head=float(head),
        alive_per_layer=list(alive_profile),
    )


def reduction_percent(baseline: FlopsBreakdown, variant: FlopsBreakdown) -> float:
    return 100.0 * (1.0 - variant.total / baseline.total)


def search_frame_ladder(cfg: ModelConfig, options: FlopsOptions,
                        n_values=(1, 2, 3, 4, 5)) -> list[float]:
    """Total GFLOPs as the search-frame count sweeps ``n_values``."""
    return [count_flops(cfg.with_(n_search=n), options).total_g for n in n_values]
