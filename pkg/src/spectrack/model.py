"""The assembled tracker: embedding, trunk with background elimination,
prompt encoding, and prediction head behind one forward call."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttnInternals,
    EliminationTrace,
    block_forward,
    eliminate,
    init_trunk_params,
    relevance_scores,
)
from .config import ModelConfig
from .embed import TokenSet, assemble, init_embed_params, patch_embed
from .head import HeadOutput, head_forward, init_head_params
from .numerics import ParamStore, Tensor
from .prompt import encode, init_prompt_params

# dead rows keep stale values; downstream consumers read alive rows only
def _scatter_update(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    out_data = base.data.copy()
    out_data[idx] = rows.data

    def backward(g):
        rows._accum(g[idx])
        gb = g.copy()
        gb[idx] = 0.0
        base._accum(gb)

    return Tensor._make(out_data, (base, rows), backward, "scatter_update")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_embed_params(store, cfg, rng, dtype)
    init_trunk_params(store, cfg, rng, dtype)
    init_prompt_params(store, cfg, rng, dtype)
    init_head_params(store, cfg, rng, dtype)
    return store


@dataclass
class ForwardResult:
    tokens: TokenSet
    heads: list[HeadOutput]
    traces: list[EliminationTrace] = field(default_factory=list)
    prompt_out: Tensor | None = None
    template_out: Tensor | None = None
    encoded_prompt: Tensor | None = None
    excited_template: Tensor | None = None


class Tracker:
    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    def embed_inputs(self, template_img: np.ndarray,
                     search_imgs: list[np.ndarray],
                     prompt_tokens: Tensor | None) -> TokenSet:
        cfg = self.cfg
        if len(search_imgs) != cfg.n_search:
            raise ValueError(f"expected {cfg.n_search} search frames, got {len(search_imgs)}")
        template_rows = patch_embed(template_img, self.params, cfg, "embed.pos.template")
        search_rows = [
            patch_embed(img, self.params, cfg, f"embed.pos.search{i}")
            for i, img in enumerate(search_imgs)
        ]
        prompt = None
        if cfg.prompt_mode != "none":
            if prompt_tokens is None:
                prompt_tokens = self.params["prompt_enc.init_prompt"]
            prompt = prompt_tokens + self.params["embed.pos.prompt"]
        return assemble(prompt, template_rows, search_rows, cfg)

    def trunk(self, tokens: TokenSet, rho: float, asymmetric: bool = True,
              use_elimination: bool = True) -> tuple[TokenSet, list[EliminationTrace]]:
        cfg = self.cfg
        traces: list[EliminationTrace] = []
        for layer in range(1, cfg.depth + 1):
            alive_idx = tokens.alive_rows()
            x = tokens.tokens.gather_rows(alive_idx)
            want_scores = use_elimination and layer in cfg.elim_layers and rho < 1.0
            y, internals = block_forward(
                x, self.params, layer, cfg,
                l_prompt=tokens.l_prompt, l_template=tokens.l_template,
                asymmetric=asymmetric, need_internals=want_scores,
            )
            tokens.tokens = _scatter_update(tokens.tokens, alive_idx, y)
            if want_scores and internals is not None:
                scores = relevance_scores(internals)
                traces.append(eliminate(tokens, scores, rho, layer=layer))
        return tokens, traces

    def forward(self, template_img: np.ndarray, search_imgs: list[np.ndarray],
                prompt_tokens: Tensor | None = None, rho: float | None = None,
                asymmetric: bool = True, use_elimination: bool = True) -> ForwardResult:
        cfg = self.cfg
        if rho is None:
            rho = cfg.rho_end
        tokens = self.embed_inputs(template_img, search_imgs, prompt_tokens)
        tokens, traces = self.trunk(tokens, rho, asymmetric, use_elimination)

        prompt_out = template_out = None
        encoded = excited = None
        if cfg.prompt_mode != "none":
            prompt_out = tokens.tokens.gather_rows(np.arange(tokens.l_prompt))
            template_out = tokens.tokens.gather_rows(
                np.arange(tokens.l_prompt, tokens.l_prompt + tokens.l_template)
            )
            if cfg.prompt_mode == "encoder":
                encoded, excited = encode(prompt_out, template_out, self.params, cfg)

        heads = head_forward(tokens, self.params, cfg)
        return ForwardResult(
            tokens=tokens, heads=heads, traces=traces,
            prompt_out=prompt_out, template_out=template_out,
            encoded_prompt=encoded, excited_template=excited,
        )

    def next_prompt(self, result: ForwardResult) -> Tensor | None:
        """The prompt candidate this pass proposes for the following frame."""
        mode = self.cfg.prompt_mode
        if mode == "encoder":
            return result.encoded_prompt
        if mode == "passthrough":
            return result.prompt_out
        return None
