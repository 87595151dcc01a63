"""Synthetic multispectral tracking scenes with exact ground truth.

Targets are axis-aligned ellipses or rectangles carrying a per-band
signature over a blocky background mosaic, plus Gaussian texture noise.
Challenge injectors reproduce the benchmark's difficulty axes: partial/full
occlusion, out-of-view intervals, small targets, illumination drift, and
spectral camouflage (target and background that collapse to nearly identical
RGB while staying far apart in the full spectrum).

Generation is bit-deterministic per (scene spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    Annotation,
    BandSpec,
    MsiFrame,
    MsiSequence,
    MUST_BANDS,
    rgb_band_groups,
)


@dataclass(frozen=True)
class OcclusionEvent:
    """Occluder drawn over the target for frames [start, stop)."""

    start: int
    stop: int
    full: bool = True
    fraction: float = 0.6   # covered fraction of the box when partial


@dataclass(frozen=True)
class OutOfViewEvent:
    start: int
    stop: int


@dataclass(frozen=True)
class IlluminationDrift:
    gain_start: float = 1.0
    gain_end: float = 0.7


@dataclass(frozen=True)
class SceneSpec:
    height: int = 112
    width: int = 112
    bands: BandSpec = MUST_BANDS
    n_frames: int = 24
    fps: float = 5.0
    target_signature: tuple[float, ...] = ()
    background_signatures: tuple[tuple[float, ...], ...] = ()
    background_layout: str = "mosaic"       # "solid" | "mosaic"
    mosaic_cells: int = 4
    target_shape: str = "ellipse"           # "ellipse" | "rect"
    target_size: tuple[int, int] = (14, 12)
    motion: str = "wander"                  # "static" | "linear" | "wander"
    speed: float = 2.0
    occlusions: tuple[OcclusionEvent, ...] = ()
    out_of_view: tuple[OutOfViewEvent, ...] = ()
    illumination: IlluminationDrift | None = None
    camouflage: bool = False
    noise_std: float = 0.02
    name: str = "scene"

    def validate(self) -> None:
        tw, th = self.target_size
        if tw >= self.width or th >= self.height:
            raise ValueError(f"target {self.target_size} larger than frame")
        if len(self.target_signature) != len(self.bands):
            raise ValueError("target signature length must match band count")
        for sig in self.background_signatures:
            if len(sig) != len(self.bands):
                raise ValueError("background signature length must match band count")
        if not self.background_signatures:
            raise ValueError("at least one background signature required")

    def attributes(self) -> tuple[str, ...]:
        attrs = []
        if any(not o.full for o in self.occlusions):
            attrs.append("POC")
        if any(o.full for o in self.occlusions):
            attrs.append("FOC")
        if self.out_of_view:
            attrs.append("OV")
        if self.illumination is not None:
            attrs.append("IV")
        if self.camouflage:
            attrs.append("SC")
        if self.target_size[0] * self.target_size[1] < 100:
            attrs.append("LR")
        if self.background_layout == "mosaic":
            attrs.append("BC")
        return tuple(attrs)


def camouflage_signature(background: np.ndarray, bands: BandSpec,
                         rng: np.random.Generator, spectral_gap: float = 0.45,
                         max_tries: int = 64) -> np.ndarray:
    """Signature whose width-weighted RGB collapse equals ``background``'s
    exactly while the full-spectrum L2 distance reaches ``spectral_gap``.

    Perturbations are projected, per CIE band group, onto the subspace with
    zero width-weighted sum, so the collapse is untouched by construction.
    """
    background = np.asarray(background, dtype=np.float64)
    groups = rgb_band_groups(bands)
    widths = bands.widths()
    for _ in range(max_tries):
        delta = np.zeros_like(background)
        for idx in groups.values():
            if len(idx) < 2:
                continue
            w = widths[idx]
            u = rng.uniform(-1.0, 1.0, size=len(idx))
            u -= w * (w @ u) / (w @ w)
            delta[idx] = u
        norm = float(np.linalg.norm(delta))
        if norm < 1e-9:
            continue
        delta *= spectral_gap / norm
        sig = background + delta
        if sig.min() >= 0.02 and sig.max() <= 0.98:
            return sig
    raise ValueError("could not construct a camouflage signature within bounds")


def _target_mask(shape: str, box: tuple[int, int, int, int],
                 height: int, width: int) -> np.ndarray:
    x, y, w, h = box
    mask = np.zeros((height, width), dtype=bool)
    if shape == "rect":
        mask[y:y + h, x:x + w] = True
        return mask
    cy, cx = y + h / 2.0, x + w / 2.0
    ry, rx = h / 2.0, w / 2.0
    ys, xs = np.mgrid[y:y + h, x:x + w]
    inside = (((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2) <= 1.0
    mask[y:y + h, x:x + w] = inside
    return mask


def _center_path(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_frames, 2) float centers; clamped so the box stays in frame."""
    tw, th = spec.target_size
    lo = np.array([tw / 2.0 + 1, th / 2.0 + 1])
    hi = np.array([spec.width - tw / 2.0 - 1, spec.height - th / 2.0 - 1])
    start = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo))
    t = np.arange(spec.n_frames)[:, None]
    if spec.motion == "static":
        path = np.repeat(start[None, :], spec.n_frames, axis=0)
    elif spec.motion == "linear":
        ang = rng.uniform(0, 2 * math.pi)
        vel = spec.speed * np.array([math.cos(ang), math.sin(ang)])
        path = start[None, :] + t * vel[None, :]
    elif spec.motion == "wander":
        ang = rng.uniform(0, 2 * math.pi)
        vel = spec.speed * np.array([math.cos(ang), math.sin(ang)])
        amp = rng.uniform(2.0, 6.0, size=2)
        freq = rng.uniform(0.15, 0.45, size=2)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        path = start[None, :] + t * vel[None, :] + amp * np.sin(freq * t + phase)
    else:
        raise ValueError(f"unknown motion model {spec.motion!r}")
    # reflect off the walls instead of clamping so motion stays lively
    span = hi - lo
    path = lo + np.abs((path - lo) % (2 * span) - span)
    return path


def synth_sequence(spec: SceneSpec, seed: int) -> MsiSequence:
    spec.validate()
    rng = np.random.default_rng(seed)
    H, W, B = spec.height, spec.width, len(spec.bands)
    tw, th = spec.target_size

    target_sig = np.asarray(spec.target_signature, dtype=np.float64)
    bg_sigs = [np.asarray(s, dtype=np.float64) for s in spec.background_signatures]

    # static background canvas
    canvas = np.empty((H, W, B))
    if spec.background_layout == "solid" or len(bg_sigs) == 1:
        canvas[:] = bg_sigs[0]
    else:
        cells = spec.mosaic_cells
        pick = rng.integers(0, len(bg_sigs), size=(cells, cells))
        ys = np.linspace(0, H, cells + 1).astype(int)
        xs = np.linspace(0, W, cells + 1).astype(int)
        for i in range(cells):
            for j in range(cells):
                canvas[ys[i]:ys[i + 1], xs[j]:xs[j + 1]] = bg_sigs[pick[i, j]]

    occluder_sig = np.clip(bg_sigs[0] + rng.uniform(-0.15, 0.15, size=B), 0.05, 0.95)
    path = _center_path(spec, rng)
    gains = (np.linspace(spec.illumination.gain_start, spec.illumination.gain_end,
                         spec.n_frames) if spec.illumination is not None
             else np.ones(spec.n_frames))

    oov_frames = {f for e in spec.out_of_view for f in range(e.start, e.stop)}
    full_occ = {f for e in spec.occlusions if e.full for f in range(e.start, e.stop)}
    partials = {f: e for e in spec.occlusions if not e.full
                for f in range(e.start, e.stop)}

    frames: list[MsiFrame] = []
    annotations: list[Annotation] = []
    for f in range(spec.n_frames):
        img = canvas.copy()
        cx, cy = path[f]
        x = int(round(cx - tw / 2.0))
        y = int(round(cy - th / 2.0))
        x = min(max(x, 0), W - tw)
        y = min(max(y, 0), H - th)
        box = (x, y, tw, th)
        hidden = f in oov_frames or f in full_occ

        if f not in oov_frames:
            mask = _target_mask(spec.target_shape, box, H, W)
            img[mask] = target_sig
            if f in full_occ:
                m = 2
                img[max(0, y - m):y + th + m, max(0, x - m):x + tw + m] = occluder_sig
            elif f in partials:
                frac = partials[f].fraction
                cover = max(1, int(round(tw * frac)))
                img[y:y + th, x:x + cover] = occluder_sig

        noise = rng.normal(0.0, spec.noise_std, size=img.shape)
        img = np.clip((img + noise) * gains[f], 0.0, 1.0)
        frames.append(MsiFrame(values=img.astype(np.float32)))
        annotations.append(Annotation(box=(0, 0, 0, 0), flag=1) if hidden
                           else Annotation(box=box, flag=0))

    return MsiSequence(frames=frames, annotations=annotations, bands=spec.bands,
                       fps=spec.fps, attributes=spec.attributes(),
                       name=f"{spec.name}_{seed:04d}")


def measure_signature_gap(seq: MsiSequence, ring: int = 5) -> tuple[np.ndarray, float]:
    """Scan rendered frames: mean spectrum inside the target box vs. a
    background ring around it.  Returns (per-channel RGB-collapse gap,
    full-spectrum L2 gap)."""
    groups = rgb_band_groups(seq.bands)
    widths = seq.bands.widths()
    tgt, bg = [], []
    for frame, ann in zip(seq.frames, seq.annotations):
        if ann.flag:
            continue
        x, y, w, h = ann.box
        v = frame.values
        inner = _target_mask("ellipse", ann.box, frame.height, frame.width)
        x0, y0 = max(0, x - ring), max(0, y - ring)
        x1, y1 = min(frame.width, x + w + ring), min(frame.height, y + h + ring)
        outer = np.zeros(inner.shape, dtype=bool)
        outer[y0:y1, x0:x1] = True
        outer[y:y + h, x:x + w] = False
        tgt.append(v[inner].mean(axis=0))
        bg.append(v[outer].mean(axis=0))
    t = np.mean(tgt, axis=0)
    b = np.mean(bg, axis=0)
    rgb_gap = np.array([
        abs(float(((t - b)[idx] * widths[idx]).sum() / widths[idx].sum()))
        for idx in (groups["R"], groups["G"], groups["B"])
    ])
    return rgb_gap, float(np.linalg.norm(t - b))


# -- scene families used by the experiments ------------------------------------


def plain_scene(rng: np.random.Generator, **overrides) -> SceneSpec:
    """No-challenge family: distinct target over a mild mosaic."""
    B = len(MUST_BANDS)
    base = rng.uniform(0.25, 0.45)
    bg = tuple(
        tuple(np.clip(base + rng.uniform(-0.06, 0.06, size=B), 0.05, 0.95))
        for _ in range(3)
    )
    target = tuple(np.clip(rng.uniform(0.65, 0.85, size=B), 0.05, 0.95))
    spec = SceneSpec(
        target_signature=target,
        background_signatures=bg,
        motion="wander",
        speed=float(rng.uniform(1.0, 2.5)),
        name="plain",
    )
    return replace(spec, **overrides) if overrides else spec


def camouflage_scene(rng: np.random.Generator, **overrides) -> SceneSpec:
    """Similar-color family: RGB collapse hides the target, spectrum does not."""
    B = len(MUST_BANDS)
    bg = np.clip(0.45 + rng.uniform(-0.08, 0.08, size=B), 0.1, 0.9)
    target = camouflage_signature(bg, MUST_BANDS, rng)
    spec = SceneSpec(
        target_signature=tuple(target),
        background_signatures=(tuple(bg),),
        background_layout="solid",
        motion="wander",
        speed=float(rng.uniform(1.0, 2.5)),
        camouflage=True,
        name="camo",
    )
    return replace(spec, **overrides) if overrides else spec
