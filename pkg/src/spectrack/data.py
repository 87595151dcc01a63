"""Multispectral frame/sequence types, crop geometry, band math, and disk I/O.

A sequence directory holds:

    meta              key = value text header (height, width, bands, fps,
                      frames, attributes, and one ``band<i> = start,end,
                      center,width`` line per spectral band)
    frame_000001.raw  one file per frame: band-major planes of little-endian
                      float32 (B planes of H*W values each)
    groundtruth.txt   one line per frame ``x_min,y_min,w,h,flag`` (integers)

Boxes are ``[x_min, y_min, w, h]`` in pixels with the origin at the frame's
upper-left corner; a status flag of 1 (fully occluded / out of view) forces a
zero box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# CIE anchor wavelengths for the red/green/blue channels (nm)
CIE_RED_NM = 700.0
CIE_GREEN_NM = 546.1
CIE_BLUE_NM = 435.8

CHALLENGE_ATTRIBUTES = (
    "POC", "BC", "LR", "SOB", "SV", "MB", "FM", "SC", "OV", "IV", "FOC", "CM",
)


class SequenceFormatError(ValueError):
    """Malformed sequence directory (header, planes, or annotations)."""


@dataclass(frozen=True)
class Band:
    start: float
    end: float
    center: float
    width: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"band start {self.start} must precede end {self.end}")
        if not self.start <= self.center <= self.end:
            raise ValueError(f"band center {self.center} outside [{self.start}, {self.end}]")


@dataclass(frozen=True)
class BandSpec:
    bands: tuple[Band, ...]

    def __post_init__(self):
        centers = [b.center for b in self.bands]
        if sorted(centers) != centers:
            raise ValueError("bands must be sorted by center wavelength")

    def __len__(self) -> int:
        return len(self.bands)

    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.bands])

    def widths(self) -> np.ndarray:
        return np.array([b.width for b in self.bands])


# The 8-band spectral layout of the drone camera benchmark (nm).
MUST_BANDS = BandSpec(
    bands=(
        Band(395, 450, 422.5, 55),
        Band(455, 520, 487.5, 65),
        Band(525, 575, 550.0, 50),
        Band(580, 625, 602.5, 45),
        Band(630, 690, 660.0, 60),
        Band(705, 745, 725.0, 40),
        Band(750, 820, 785.0, 70),
        Band(825, 950, 887.5, 125),
    )
)


@dataclass
class MsiFrame:
    """H x W x B reflectance raster with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"frame must be HxWxB, got shape {v.shape}")
        if v.shape[2] < 3:
            raise ValueError(f"need at least 3 bands, got {v.shape[2]}")
        lo, hi = float(v.min(initial=0.0)), float(v.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"reflectance outside [0,1]: [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_bands(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class Annotation:
    """Box [x_min, y_min, w, h] plus occlusion/out-of-view status flag."""

    box: tuple[int, int, int, int]
    flag: int = 0

    def __post_init__(self):
        if self.flag not in (0, 1):
            raise ValueError(f"flag must be 0 or 1, got {self.flag}")
        if self.flag == 1 and tuple(self.box) != (0, 0, 0, 0):
            raise ValueError("flagged frames must carry a zero box")
        if self.flag == 0 and (self.box[2] <= 0 or self.box[3] <= 0):
            raise ValueError(f"visible frame needs positive box extent, got {self.box}")

    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return (x + w / 2.0, y + h / 2.0)


@dataclass
class MsiSequence:
    frames: list[MsiFrame]
    annotations: list[Annotation]
    bands: BandSpec
    fps: float = 5.0
    attributes: tuple[str, ...] = ()
    name: str = "sequence"

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise ValueError(
                f"{len(self.frames)} frames but {len(self.annotations)} annotations"
            )
        shapes = {f.values.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frame shapes not uniform: {shapes}")
        for f in self.frames:
            if f.n_bands != len(self.bands):
                raise ValueError("frame band count differs from band table")
        unknown = set(self.attributes) - set(CHALLENGE_ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown challenge attributes: {sorted(unknown)}")
        for i, a in enumerate(self.annotations):
            if a.flag == 0:
                x, y, w, h = a.box
                fh, fw = self.frames[i].height, self.frames[i].width
                if x < 0 or y < 0 or x + w > fw or y + h > fh:
                    raise ValueError(f"frame {i}: box {a.box} exceeds {fw}x{fh} frame")

    def __len__(self) -> int:
        return len(self.frames)


# -- crop geometry -------------------------------------------------------------


@dataclass(frozen=True)
class CropMapping:
    """Affine patch->frame coordinate map: frame = origin + patch / scale."""

    x0: float
    y0: float
    scale: float

    def patch_to_frame(self, box) -> np.ndarray:
        x, y, w, h = [float(v) for v in box]
        return np.array([self.x0 + x / self.scale, self.y0 + y / self.scale,
                         w / self.scale, h / self.scale])

    def frame_to_patch(self, box) -> np.ndarray:
        x, y, w, h = [float(v) for v in box]
        return np.array([(x - self.x0) * self.scale, (y - self.y0) * self.scale,
                         w * self.scale, h * self.scale])


@dataclass
class CropResult:
    patch: np.ndarray          # (out, out, B) float
    mapping: CropMapping
    padded: np.ndarray         # (out, out) bool, True where out-of-frame fill was used


def crop_resize(frame: MsiFrame | np.ndarray, box, area_factor: float,
                out_size: int, center=None) -> CropResult:
    """Square crop of side ``area_factor * sqrt(w*h)`` around the box center,
    padded with the per-band mean of the in-frame part and bilinearly resized
    per band to ``out_size``.

    ``center`` overrides the crop center (tracking re-centers on the previous
    prediction while sizing from the previous box).
    """
    values = frame.values if isinstance(frame, MsiFrame) else np.asarray(frame)
    H, W, B = values.shape
    x, y, w, h = [float(v) for v in box]
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {box}")
    if area_factor <= 0:
        raise ValueError("area_factor must be positive")
    cx, cy = (x + w / 2.0, y + h / 2.0) if center is None else (float(center[0]), float(center[1]))
    side = area_factor * math.sqrt(w * h)
    x0 = cx - side / 2.0
    y0 = cy - side / 2.0
    scale = out_size / side

    # sample positions of output pixel centers, in frame index space
    u = (np.arange(out_size) + 0.5) / scale
    xs = x0 + u - 0.5
    ys = y0 + u - 0.5
    gx, gy = np.meshgrid(xs, ys)  # (out, out), gy varies along rows

    inb = (gx > -0.5) & (gx < W - 0.5) & (gy > -0.5) & (gy < H - 0.5)
    x_cl = np.clip(gx, 0, W - 1)
    y_cl = np.clip(gy, 0, H - 1)
    ix = np.floor(x_cl).astype(np.intp)
    iy = np.floor(y_cl).astype(np.intp)
    ix1 = np.minimum(ix + 1, W - 1)
    iy1 = np.minimum(iy + 1, H - 1)
    fx = (x_cl - ix)[..., None]
    fy = (y_cl - iy)[..., None]

    v00 = values[iy, ix]
    v01 = values[iy, ix1]
    v10 = values[iy1, ix]
    v11 = values[iy1, ix1]
    patch = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
             + v10 * (1 - fx) * fy + v11 * fx * fy)

    padded = ~inb
    if padded.any():
        if inb.any():
            fill = patch[inb].mean(axis=0)
        else:
            fill = values.reshape(-1, B).mean(axis=0)
        patch[padded] = fill
    return CropResult(patch=patch.astype(values.dtype), mapping=CropMapping(x0, y0, scale),
                      padded=padded)


# -- band math -------------------------------------------------------------------


def rgb_band_groups(bands: BandSpec) -> dict[str, list[int]]:
    """Assign each band to the nearest CIE anchor (R/G/B).  A channel left
    without members falls back to its single nearest band."""
    anchors = {"R": CIE_RED_NM, "G": CIE_GREEN_NM, "B": CIE_BLUE_NM}
    groups: dict[str, list[int]] = {"R": [], "G": [], "B": []}
    centers = bands.centers()
    for i, c in enumerate(centers):
        nearest = min(anchors, key=lambda k: abs(c - anchors[k]))
        groups[nearest].append(i)
    for name, anchor in anchors.items():
        if not groups[name]:
            groups[name] = [int(np.argmin(np.abs(centers - anchor)))]
    return groups


def collapse_to_rgb(frame: MsiFrame, bands: BandSpec) -> tuple[MsiFrame, BandSpec]:
    """Width-weighted average of each CIE-anchor band group; returns the
    3-band frame (ordered B, G, R by wavelength) and its band table."""
    if len(bands) < 3:
        raise ValueError("need at least 3 bands to collapse")
    groups = rgb_band_groups(bands)
    widths = bands.widths()
    planes = {}
    new_bands = {}
    for name in ("B", "G", "R"):
        idx = groups[name]
        w = widths[idx]
        planes[name] = (frame.values[:, :, idx] * w).sum(axis=2) / w.sum()
        members = [bands.bands[i] for i in idx]
        center = float((np.array([b.center for b in members]) * w).sum() / w.sum())
        new_bands[name] = Band(
            start=min(b.start for b in members),
            end=max(b.end for b in members),
            center=center,
            width=float(sum(b.width for b in members)),
        )
    order = sorted(("B", "G", "R"), key=lambda k: new_bands[k].center)
    values = np.stack([planes[k] for k in order], axis=2)
    spec = BandSpec(bands=tuple(new_bands[k] for k in order))
    return MsiFrame(values=values.astype(frame.values.dtype)), spec


def collapse_sequence(seq: MsiSequence) -> MsiSequence:
    frames = []
    spec = None
    for f in seq.frames:
        rgb, spec = collapse_to_rgb(f, seq.bands)
        frames.append(rgb)
    return MsiSequence(frames=frames, annotations=list(seq.annotations), bands=spec,
                       fps=seq.fps, attributes=seq.attributes, name=seq.name + "_rgb")


# -- disk i/o --------------------------------------------------------------------


def _frame_filename(i: int) -> str:
    return f"frame_{i + 1:06d}.raw"


def save_sequence(seq: MsiSequence, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w, b = seq.frames[0].values.shape if seq.frames else (0, 0, len(seq.bands))
    lines = [
        f"height = {h}",
        f"width = {w}",
        f"bands = {len(seq.bands)}",
        f"fps = {seq.fps}",
        f"frames = {len(seq.frames)}",
        f"attributes = {','.join(seq.attributes)}",
    ]
    for i, band in enumerate(seq.bands.bands):
        lines.append(f"band{i + 1} = {band.start},{band.end},{band.center},{band.width}")
    (path / "meta").write_text("\n".join(lines) + "\n")
    with open(path / "groundtruth.txt", "w") as f:
        for a in seq.annotations:
            x, y, bw, bh = a.box
            f.write(f"{x},{y},{bw},{bh},{a.flag}\n")
    for i, frame in enumerate(seq.frames):
        planes = np.ascontiguousarray(frame.values.transpose(2, 0, 1)).astype("<f4")
        (path / _frame_filename(i)).write_bytes(planes.tobytes())


def load_meta(path) -> dict:
    path = Path(path)
    meta_file = path / "meta"
    if not meta_file.exists():
        raise SequenceFormatError(f"missing meta file in {path}")
    fields: dict[str, str] = {}
    for ln, line in enumerate(meta_file.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise SequenceFormatError(f"malformed header line {ln}: {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        out = {
            "height": int(fields["height"]),
            "width": int(fields["width"]),
            "bands": int(fields["bands"]),
            "fps": float(fields["fps"]),
            "frames": int(fields["frames"]),
            "attributes": tuple(a for a in fields.get("attributes", "").split(",") if a),
        }
    except (KeyError, ValueError) as e:
        raise SequenceFormatError(f"malformed header in {path}: {e}") from e
    bands = []
    for i in range(out["bands"]):
        key = f"band{i + 1}"
        if key not in fields:
            raise SequenceFormatError(f"missing {key} in header")
        try:
            start, end, center, width = (float(v) for v in fields[key].split(","))
        except ValueError as e:
            raise SequenceFormatError(f"malformed {key}: {fields[key]!r}") from e
        bands.append(Band(start, end, center, width))
    out["band_table"] = BandSpec(bands=tuple(bands))
    return out


def load_sequence(path) -> MsiSequence:
    path = Path(path)
    meta = load_meta(path)
    h, w, b, n = meta["height"], meta["width"], meta["bands"], meta["frames"]

    gt_file = path / "groundtruth.txt"
    if not gt_file.exists():
        raise SequenceFormatError(f"missing groundtruth.txt in {path}")
    annotations = []
    gt_lines = [l for l in gt_file.read_text().splitlines() if l.strip()]
    for i, line in enumerate(gt_lines):
        try:
            x, y, bw, bh, flag = (int(v) for v in line.split(","))
        except ValueError as e:
            raise SequenceFormatError(f"malformed annotation at frame {i + 1}: {line!r}") from e
        annotations.append(Annotation(box=(x, y, bw, bh), flag=flag))
    if len(annotations) != n:
        raise SequenceFormatError(
            f"annotation misalignment at frame {min(len(annotations), n) + 1}: "
            f"{len(annotations)} annotations for {n} frames"
        )

    frames = []
    expected = h * w * b * 4
    for i in range(n):
        f = path / _frame_filename(i)
        if not f.exists():
            raise SequenceFormatError(f"missing frame file {f.name}")
        raw = f.read_bytes()
        if len(raw) != expected:
            raise SequenceFormatError(
                f"band-count mismatch in {f.name}: {len(raw)} bytes, expected {expected}"
            )
        planes = np.frombuffer(raw, dtype="<f4").reshape(b, h, w)
        frames.append(MsiFrame(values=np.ascontiguousarray(planes.transpose(1, 2, 0))))
    return MsiSequence(frames=frames, annotations=annotations, bands=meta["band_table"],
                       fps=meta["fps"], attributes=meta["attributes"], name=path.name)
