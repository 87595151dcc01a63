"""RGB -> multispectral input-layer weight reconstruction.

Pre-trained 3-channel patch-projection weights are mapped onto arbitrary band
centers by piecewise-linear interpolation anchored at the CIE red/green/blue
wavelengths; bands beyond red replicate the red-channel weights, and bands
below blue extrapolate the blue/green segment (blend coefficients still sum
to one)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import CIE_BLUE_NM, CIE_GREEN_NM, CIE_RED_NM, BandSpec
from .numerics import ParamStore


@dataclass(frozen=True)
class RgbAnchors:
    """Per-channel source weights pinned at the CIE anchor wavelengths."""

    w_red: np.ndarray
    w_green: np.ndarray
    w_blue: np.ndarray
    red_nm: float = CIE_RED_NM
    green_nm: float = CIE_GREEN_NM
    blue_nm: float = CIE_BLUE_NM

    def __post_init__(self):
        if not self.blue_nm < self.green_nm < self.red_nm:
            raise ValueError("anchor wavelengths must satisfy blue < green < red")
        if not (self.w_red.shape == self.w_green.shape == self.w_blue.shape):
            raise ValueError("anchor weight shapes must match")


def reconstruct_weights(anchors: RgbAnchors, bands: BandSpec) -> list[np.ndarray]:
    """One weight array per band center, in band order."""
    if len(bands) == 0:
        raise ValueError("empty band table")
    r, g, b = anchors.red_nm, anchors.green_nm, anchors.blue_nm
    out = []
    for m in bands.centers():
        if m < g:
            w = (anchors.w_blue * (g - m) + anchors.w_green * (m - b)) / (g - b)
        elif m <= r:
            # covers m == g exactly: the coefficients become (1, 0)
            w = (anchors.w_green * (r - m) + anchors.w_red * (m - g)) / (r - g)
        else:
            w = anchors.w_red.copy()
        out.append(np.asarray(w))
    return out


def blend_coefficients(anchors: RgbAnchors, center: float) -> tuple[float, float]:
    """The two blending coefficients applied at ``center`` (they sum to 1)."""
    r, g, b = anchors.red_nm, anchors.green_nm, anchors.blue_nm
    if center < g:
        return (g - center) / (g - b), (center - b) / (g - b)
    if center <= r:
        return (r - center) / (r - g), (center - g) / (r - g)
    return (0.0, 1.0)


def anchors_from_patch_proj(weight: np.ndarray, patch: int, channels: int) -> RgbAnchors:
    """Split a 3-band patch-projection weight (P*P*3, C) into per-channel
    anchors of shape (P, P, C), taking the band order as (B, G, R) by
    wavelength -- blue first, as in the sequence container."""
    w = weight.reshape(patch, patch, 3, channels)
    return RgbAnchors(w_red=w[:, :, 2, :], w_green=w[:, :, 1, :], w_blue=w[:, :, 0, :])


def reconstruct_patch_proj(weight_rgb: np.ndarray, patch: int, channels: int,
                           bands: BandSpec) -> np.ndarray:
    """(P*P*3, C) RGB patch projection -> (P*P*B, C) multispectral one."""
    anchors = anchors_from_patch_proj(weight_rgb, patch, channels)
    per_band = reconstruct_weights(anchors, bands)        # each (P, P, C)
    stacked = np.stack(per_band, axis=2)                  # (P, P, B, C)
    return stacked.reshape(patch * patch * len(bands), channels)


def apply_reconstruction(store: ParamStore, weight_rgb: np.ndarray,
                         cfg: ModelConfig, bands: BandSpec) -> None:
    """Overwrite the model's patch-projection weight in place from RGB source
    weights (training-from-scratch comparisons simply skip this call)."""
    if len(bands) != cfg.bands:
        raise ValueError(f"band table has {len(bands)} entries, model expects {cfg.bands}")
    new_w = reconstruct_patch_proj(weight_rgb, cfg.patch, cfg.channels, bands)
    store.set_value("embed.proj.weight", new_w)
