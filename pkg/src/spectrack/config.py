"""Model and schedule configuration profiles."""

from __future__ import annotations

from dataclasses import dataclass, replace

PROMPT_MODES = ("none", "random", "passthrough", "encoder")


@dataclass(frozen=True)
class ModelConfig:
    bands: int = 8
    patch: int = 16
    template_size: int = 192
    search_size: int = 384
    n_search: int = 2
    channels: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    prompt_len: int = 1
    compress_ratio: int = 4
    elim_layers: tuple[int, ...] = (4, 7, 10)
    rho_start: float = 1.0
    rho_end: float = 0.7
    prompt_mode: str = "encoder"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must divide evenly into heads")
        if self.template_size % self.patch or self.search_size % self.patch:
            raise ValueError("template/search sides must be divisible by patch size")
        if any(l < 1 or l > self.depth for l in self.elim_layers):
            raise ValueError("elimination layers must lie in [1, depth]")
        if not 0.0 < self.rho_end <= self.rho_start <= 1.0:
            raise ValueError("need 0 < rho_end <= rho_start <= 1")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.n_search < 1:
            raise ValueError("need at least one search frame")
        if 2 * self.channels % self.compress_ratio:
            raise ValueError("2*channels must be divisible by the compression ratio")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch

    @property
    def l_template(self) -> int:
        return self.template_grid ** 2

    @property
    def l_search_per_frame(self) -> int:
        return self.search_grid ** 2

    @property
    def l_search(self) -> int:
        return self.n_search * self.l_search_per_frame

    @property
    def l_prompt(self) -> int:
        return 0 if self.prompt_mode == "none" else self.prompt_len

    @property
    def l_total(self) -> int:
        return self.l_prompt + self.l_template + self.l_search

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# full-size profile matching the published architecture dimensions
PAPER_PROFILE = ModelConfig()

# CPU-scale profile used by the synthetic-benchmark experiments
DESK_PROFILE = ModelConfig(
    patch=8,
    template_size=48,
    search_size=96,
    channels=64,
    depth=2,
    heads=4,
    elim_layers=(1,),
)

PROFILES = {"paper": PAPER_PROFILE, "desk": DESK_PROFILE}


@dataclass(frozen=True)
class KeepRatioSchedule:
    rho_start: float
    rho_end: float
    total_steps: int

    def __post_init__(self):
        if not 0.0 < self.rho_end <= self.rho_start <= 1.0:
            raise ValueError("need 0 < rho_end <= rho_start <= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
