"""Sliding-window one-pass tracking over a sequence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import EliminationTrace
from .config import ModelConfig
from .data import MsiSequence, crop_resize
from .model import Tracker
from .numerics import no_grad
from .prompt import PromptState

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0


@dataclass
class TrackResult:
    """Per-frame outputs for frames 2..T (frame 1 seeds the template)."""

    boxes: np.ndarray                                  # (T-1, 4) float
    confidences: np.ndarray                            # (T-1,)
    traces: list[list[EliminationTrace]] = field(default_factory=list)
    prompt_frames: list[int] = field(default_factory=list)
    name: str = "sequence"


def _clamp_box(box: np.ndarray, width: int, height: int) -> np.ndarray:
    w = float(np.clip(box[2], 2.0, width))
    h = float(np.clip(box[3], 2.0, height))
    cx = float(np.clip(box[0] + box[2] / 2.0, 0.0, width))
    cy = float(np.clip(box[1] + box[3] / 2.0, 0.0, height))
    return np.array([cx - w / 2.0, cy - h / 2.0, w, h])


def track(tracker: Tracker, seq: MsiSequence, rho: float | None = None,
          template_factor: float = TEMPLATE_FACTOR,
          search_factor: float = SEARCH_FACTOR) -> TrackResult:
    """Template from frame 1's annotation; every later frame is located in a
    window of the N most recent frames cropped around the previous prediction.
    Deterministic per (params, sequence)."""
    cfg = tracker.cfg
    n = len(seq)
    if n < cfg.n_search + 1:
        raise ValueError(f"sequence needs at least {cfg.n_search + 1} frames, has {n}")
    first = seq.annotations[0]
    if first.flag != 0:
        raise ValueError("frame-1 annotation must be visible")

    from .head import decode  # local import to avoid a cycle at module load

    height, width = seq.frames[0].height, seq.frames[0].width
    template = crop_resize(seq.frames[0], first.box, template_factor, cfg.template_size)
    state = PromptState(tracker.params, cfg)
    prev_box = np.array(first.box, dtype=np.float64)

    boxes, confs, all_traces, prompt_frames = [], [], [], []
    with no_grad():
        for t in range(1, n):
            idx = [max(0, t - (cfg.n_search - 1) + i) for i in range(cfg.n_search)]
            center = (prev_box[0] + prev_box[2] / 2.0, prev_box[1] + prev_box[3] / 2.0)
            crops = [
                crop_resize(seq.frames[i], prev_box, search_factor,
                            cfg.search_size, center=center)
                for i in idx
            ]
            prompt_tokens = state.current.tokens if state.current is not None else None
            result = tracker.forward(
                template.patch, [c.patch for c in crops],
                prompt_tokens=prompt_tokens, rho=rho,
            )
            det = decode(result.heads[-1], crops[-1].mapping, cfg.search_size)
            prev_box = _clamp_box(det.box, width, height)
            boxes.append(prev_box.copy())
            confs.append(det.confidence)
            all_traces.append(result.traces)
            prompt_frames.append(state.current.frame_index if state.current else -1)
            candidate = tracker.next_prompt(result)
            if candidate is not None:
                state.update(candidate.detach(), frame_index=t)

    return TrackResult(
        boxes=np.array(boxes), confidences=np.array(confs),
        traces=all_traces, prompt_frames=prompt_frames, name=seq.name,
    )
