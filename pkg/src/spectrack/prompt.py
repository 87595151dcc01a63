"""Spectrum prompt encoder: squeeze/excite over [prompt; pooled template]
channels, residual MLP, and per-frame prompt propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .numerics import ParamStore, Tensor, concat, trunc_normal


@dataclass
class SpectrumPrompt:
    tokens: Tensor          # (L_P, C)
    frame_index: int        # frame whose trunk pass produced it (-1 = learned init)


def init_prompt_params(store: ParamStore, cfg: ModelConfig,
                       rng: np.random.Generator, dtype=np.float64) -> None:
    if cfg.prompt_mode == "none":
        return
    C = cfg.channels
    store.add("prompt_enc.init_prompt", trunc_normal(rng, (cfg.prompt_len, C), dtype=dtype),
              trainable=cfg.prompt_mode != "random")
    if cfg.prompt_mode != "encoder":
        return
    two_c = 2 * C
    squeezed = two_c // cfg.compress_ratio
    store.add("prompt_enc.fc1.weight", trunc_normal(rng, (two_c, squeezed), dtype=dtype))
    store.add("prompt_enc.fc1.bias", np.zeros(squeezed, dtype=dtype))
    store.add("prompt_enc.fc2.weight", trunc_normal(rng, (squeezed, two_c), dtype=dtype))
    store.add("prompt_enc.fc2.bias", np.zeros(two_c, dtype=dtype))
    store.add("prompt_enc.mlp.fc1.weight", trunc_normal(rng, (two_c, two_c), dtype=dtype))
    store.add("prompt_enc.mlp.fc1.bias", np.zeros(two_c, dtype=dtype))
    store.add("prompt_enc.mlp.fc2.weight", trunc_normal(rng, (two_c, two_c), dtype=dtype))
    store.add("prompt_enc.mlp.fc2.bias", np.zeros(two_c, dtype=dtype))


def encode(prompt_out: Tensor, template_out: Tensor, store: ParamStore,
           cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Compress/excite the concatenated prompt and pooled-template channels.

    Returns (encoded prompt, excited template summary); the channel split is
    exact: the first C channels form the prompt."""
    C = cfg.channels
    if prompt_out.shape[-1] != C or template_out.shape[-1] != C:
        raise ValueError("channel width mismatch")
    lp = prompt_out.shape[0]
    pooled = template_out.mean(axis=0, keepdims=True)      # global pool over tokens
    if lp > 1:
        pooled = pooled.gather_rows(np.zeros(lp, dtype=np.intp))
    z = concat([prompt_out, pooled], axis=1)               # (L_P, 2C)
    squeezed = (z @ store["prompt_enc.fc1.weight"] + store["prompt_enc.fc1.bias"]).gelu()
    excited = squeezed @ store["prompt_enc.fc2.weight"] + store["prompt_enc.fc2.bias"]
    hidden = (excited @ store["prompt_enc.mlp.fc1.weight"]
              + store["prompt_enc.mlp.fc1.bias"]).gelu()
    out = excited + (hidden @ store["prompt_enc.mlp.fc2.weight"]
                     + store["prompt_enc.mlp.fc2.bias"])
    cols = np.arange(2 * C)
    out_t = out.swapaxes(0, 1)                             # (2C, L_P)
    p_hat = out_t.gather_rows(cols[:C]).swapaxes(0, 1)
    t_hat = out_t.gather_rows(cols[C:]).swapaxes(0, 1)
    return p_hat, t_hat


class PromptState:
    """Per-sequence prompt carried across frames (single-writer)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        self.store = store
        self.flagged_frames: list[int] = []
        self.reset()

    def reset(self) -> None:
        if self.cfg.prompt_mode == "none":
            self.current: SpectrumPrompt | None = None
        else:
            self.current = SpectrumPrompt(
                tokens=self.store["prompt_enc.init_prompt"], frame_index=-1
            )
        self.flagged_frames = []

    def update(self, candidate: Tensor, frame_index: int) -> None:
        """Adopt the new prompt unless it is non-finite (keep previous, flag)."""
        mode = self.cfg.prompt_mode
        if mode in ("none", "random"):
            return
        if not np.isfinite(candidate.data).all():
            self.flagged_frames.append(frame_index)
            return
        self.current = SpectrumPrompt(tokens=candidate, frame_index=frame_index)
