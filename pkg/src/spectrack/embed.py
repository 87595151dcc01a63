"""Patch embedding and assembly of the unified token matrix [prompt; template; searches]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .numerics import ParamStore, Tensor, concat, trunc_normal

SEG_PROMPT, SEG_TEMPLATE, SEG_SEARCH = 0, 1, 2


@dataclass
class TokenSet:
    """Unified token rows with segment/origin bookkeeping and an alive mask.

    Rows are ordered [prompt; template; search_1; ...; search_N].  Search-row
    origins are (frame index, grid row, grid col); prompt and template rows
    are permanently alive.
    """

    tokens: Tensor                 # (L, C)
    l_prompt: int
    l_template: int
    n_frames: int
    grid: int
    alive: np.ndarray              # (L,) bool

    def __post_init__(self):
        L = self.tokens.shape[0]
        if L != self.l_prompt + self.l_template + self.l_search:
            raise ValueError("token count does not match segment bookkeeping")
        if self.alive.shape != (L,):
            raise ValueError("alive mask must cover every row")
        if not self.alive[: self.l_prompt + self.l_template].all():
            raise ValueError("prompt/template rows must stay alive")

    @property
    def l_search(self) -> int:
        return self.n_frames * self.grid * self.grid

    @property
    def l_total(self) -> int:
        return self.tokens.shape[0]

    @property
    def search_start(self) -> int:
        return self.l_prompt + self.l_template

    def segments(self) -> np.ndarray:
        seg = np.full(self.l_total, SEG_SEARCH, dtype=np.int8)
        seg[: self.l_prompt] = SEG_PROMPT
        seg[self.l_prompt : self.l_prompt + self.l_template] = SEG_TEMPLATE
        return seg

    def search_origin(self, row: int) -> tuple[int, int, int]:
        """(frame, grid row, grid col) of a global search-row index."""
        per = self.grid * self.grid
        off = row - self.search_start
        if off < 0:
            raise IndexError(f"row {row} is not a search row")
        frame, cell = divmod(off, per)
        r, c = divmod(cell, self.grid)
        return frame, r, c

    def frame_rows(self, frame: int) -> np.ndarray:
        """Global indices of the given search frame's rows, grid order."""
        per = self.grid * self.grid
        start = self.search_start + frame * per
        return np.arange(start, start + per)

    def alive_rows(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def alive_search_rows(self) -> np.ndarray:
        idx = np.flatnonzero(self.alive)
        return idx[idx >= self.search_start]


def init_embed_params(store: ParamStore, cfg: ModelConfig,
                      rng: np.random.Generator, dtype=np.float64) -> None:
    C, P, B = cfg.channels, cfg.patch, cfg.bands
    store.add("embed.proj.weight", trunc_normal(rng, (P * P * B, C), dtype=dtype))
    store.add("embed.proj.bias", np.zeros(C, dtype=dtype))
    store.add("embed.pos.template", trunc_normal(rng, (cfg.l_template, C), dtype=dtype))
    for i in range(cfg.n_search):
        store.add(f"embed.pos.search{i}",
                  trunc_normal(rng, (cfg.l_search_per_frame, C), dtype=dtype))
    if cfg.prompt_mode != "none":
        store.add("embed.pos.prompt", trunc_normal(rng, (cfg.prompt_len, C), dtype=dtype))


def patch_embed(image: np.ndarray, store: ParamStore, cfg: ModelConfig,
                pos_name: str | None) -> Tensor:
    """Linear projection of P x P x B patches in row-major grid order, plus the
    named positional table."""
    side = image.shape[0]
    P, B = cfg.patch, cfg.bands
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square HxWxB image, got {image.shape}")
    if side % P:
        raise ValueError(f"side {side} not divisible by patch {P}")
    if image.shape[2] != B:
        raise ValueError(f"band mismatch: image has {image.shape[2]}, model expects {B}")
    g = side // P
    patches = (
        image.reshape(g, P, g, P, B)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, P * P * B)
    )
    rows = Tensor(patches) @ store["embed.proj.weight"] + store["embed.proj.bias"]
    if pos_name is not None:
        rows = rows + store[pos_name]
    return rows


def assemble(prompt: Tensor | None, template_rows: Tensor,
             search_rows: list[Tensor], cfg: ModelConfig) -> TokenSet:
    """Concatenate [prompt; template; searches] and populate bookkeeping."""
    parts = []
    l_prompt = 0
    if prompt is not None:
        if prompt.shape[-1] != cfg.channels:
            raise ValueError("prompt width mismatch")
        parts.append(prompt)
        l_prompt = prompt.shape[0]
    for rows in [template_rows, *search_rows]:
        if rows.shape[-1] != cfg.channels:
            raise ValueError("token width mismatch")
    parts.append(template_rows)
    parts.extend(search_rows)
    tokens = concat(parts, axis=0)
    return TokenSet(
        tokens=tokens,
        l_prompt=l_prompt,
        l_template=template_rows.shape[0],
        n_frames=len(search_rows),
        grid=cfg.search_grid,
        alive=np.ones(tokens.shape[0], dtype=bool),
    )
