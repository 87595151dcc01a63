"""Training loop: (template, N consecutive searches) sampling with jittered
ground-truth crops, the combined focal/L1/GIoU objective, cosine-annealed
background elimination, and AdamW with a step learning-rate drop.

The prompt encoder is trained by a one-step recurrence unroll: a gradient-free
pass over the previous window produces trunk outputs, the encoder (with
gradients) turns them into the next prompt, and the supervised pass consumes
that prompt, so encoder weights learn from how much their prompt helps the
following window.  Samples alternate between this two-pass form and a plain
single-pass form so the learned initial prompt also receives gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import KeepRatioSchedule, ModelConfig
from .attention import keep_ratio
from .data import Annotation, MsiSequence, crop_resize
from .head import frame_loss
from .model import Tracker, init_params
from .numerics import ParamStore, adamw_step, init_opt_state, no_grad
from .numerics.tensor import finite_checks
from .prompt import encode


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2
    steps_per_epoch: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    decay_epoch: int | None = None          # lr /= decay_factor after this epoch
    decay_factor: float = 10.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    template_factor: float = 2.0
    search_factor: float = 4.0
    jitter_frac: float = 0.1
    two_pass_prob: float = 0.5
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    seed: int = 0
    dtype: str = "float32"
    asymmetric: bool = True
    use_elimination: bool = True
    fast_math: bool = True                  # per-op finite checks off in the hot loop

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0


def _last_visible(seq: MsiSequence, t: int) -> Annotation:
    for i in range(t, -1, -1):
        if seq.annotations[i].flag == 0:
            return seq.annotations[i]
    for i in range(t + 1, len(seq)):
        if seq.annotations[i].flag == 0:
            return seq.annotations[i]
    raise ValueError("sequence has no visible frames")


def _search_crop(seq: MsiSequence, t: int, rng: np.random.Generator,
                 cfg: ModelConfig, tcfg: TrainConfig):
    """Jittered ground-truth-centered crop; returns (patch, gt box in patch
    coords or None when flagged)."""
    ann = seq.annotations[t]
    ref = ann if ann.flag == 0 else _last_visible(seq, t)
    side = tcfg.search_factor * np.sqrt(ref.box[2] * ref.box[3])
    jitter = rng.uniform(-tcfg.jitter_frac, tcfg.jitter_frac, size=2) * side
    cx, cy = ref.center()
    crop = crop_resize(seq.frames[t], ref.box, tcfg.search_factor, cfg.search_size,
                       center=(cx + jitter[0], cy + jitter[1]))
    gt_patch = crop.mapping.frame_to_patch(ann.box) if ann.flag == 0 else None
    return crop, gt_patch


def _window_loss(tracker: Tracker, template_patch, window, prompt_tokens, rho, tcfg):
    """Mean loss over one window's search frames."""
    res = tracker.forward(
        template_patch, [c.patch for c, _ in window],
        prompt_tokens=prompt_tokens, rho=rho,
        asymmetric=tcfg.asymmetric, use_elimination=tcfg.use_elimination,
    )
    loss = None
    for out, (_, gt_patch) in zip(res.heads, window):
        fl = frame_loss(out, gt_patch, tracker.cfg.search_size,
                        tcfg.lambda_l1, tcfg.lambda_giou)
        loss = fl if loss is None else loss + fl
    return loss * (1.0 / len(window)), res


def _sample_loss(tracker: Tracker, seq: MsiSequence, rng: np.random.Generator,
                 rho: float, tcfg: TrainConfig):
    cfg = tracker.cfg
    two_pass = (cfg.prompt_mode in ("passthrough", "encoder")
                and rng.uniform() < tcfg.two_pass_prob)
    need = cfg.n_search + (1 if two_pass else 0)
    if len(seq) < need:
        two_pass, need = False, cfg.n_search

    visible = [i for i, a in enumerate(seq.annotations) if a.flag == 0]
    t0 = int(visible[rng.integers(len(visible))])
    start = int(rng.integers(0, len(seq) - need + 1))

    t_ann = seq.annotations[t0]
    template = crop_resize(seq.frames[t0], t_ann.box, tcfg.template_factor,
                           cfg.template_size)
    frames = list(range(start, start + need))
    crops = [_search_crop(seq, t, rng, cfg, tcfg) for t in frames]

    if not two_pass:
        loss, _ = _window_loss(tracker, template.patch, crops[: cfg.n_search],
                               None, rho, tcfg)
        return loss

    with no_grad():
        warm = tracker.forward(
            template.patch, [c.patch for c, _ in crops[: cfg.n_search]],
            prompt_tokens=None, rho=rho,
            asymmetric=tcfg.asymmetric, use_elimination=tcfg.use_elimination,
        )
    if cfg.prompt_mode == "encoder":
        p_hat, _ = encode(warm.prompt_out, warm.template_out, tracker.params, cfg)
    else:
        p_hat = warm.prompt_out
    loss, _ = _window_loss(tracker, template.patch, crops[1: 1 + cfg.n_search],
                           p_hat, rho, tcfg)
    return loss


def train(model_cfg: ModelConfig, tcfg: TrainConfig,
          sequences: list[MsiSequence], out_dir=None,
          params: ParamStore | None = None) -> tuple[ParamStore, TrainLog]:
    if not sequences:
        raise ValueError("empty training set")
    dtype = np.dtype(tcfg.dtype).type
    if params is None:
        params = init_params(model_cfg, seed=tcfg.seed, dtype=dtype)
    tracker = Tracker(model_cfg, params)
    state = init_opt_state(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                           eps=tcfg.eps, weight_decay=tcfg.weight_decay)
    schedule = KeepRatioSchedule(model_cfg.rho_start, model_cfg.rho_end,
                                 tcfg.total_steps)
    rng = np.random.default_rng(tcfg.seed)
    log = TrainLog()
    t_start = time.perf_counter()
    gstep = 0

    for epoch in range(1, tcfg.epochs + 1):
        if tcfg.decay_epoch is not None and epoch > tcfg.decay_epoch:
            state.lr = tcfg.lr / tcfg.decay_factor
        epoch_losses = []
        for _ in range(tcfg.steps_per_epoch):
            rho = keep_ratio(gstep, schedule) if tcfg.use_elimination else 1.0
            params.zero_grad()
            batch_loss = 0.0
            with finite_checks(not tcfg.fast_math):
                for _ in range(tcfg.batch_size):
                    seq = sequences[int(rng.integers(len(sequences)))]
                    loss = _sample_loss(tracker, seq, rng, rho, tcfg)
                    scaled = loss * (1.0 / tcfg.batch_size)
                    scaled.backward()
                    batch_loss += float(scaled.data)
            if not np.isfinite(batch_loss):
                if out_dir is not None:
                    from pathlib import Path
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    params.save(Path(out_dir) / "diverged.ckpt")
                raise TrainingDiverged(f"non-finite loss at step {gstep}")
            # params untouched by this batch (e.g. encoder in an all-single-pass
            # batch) step with a zero gradient
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for n, t in params.trainable_items()}
            adamw_step(params, grads, state)
            log.steps.append({"step": gstep, "loss": batch_loss, "rho": rho,
                              "lr": state.lr, "epoch": epoch})
            epoch_losses.append(batch_loss)
            gstep += 1
        log.epoch_losses.append(float(np.mean(epoch_losses)))
    log.wall_seconds = time.perf_counter() - t_start
    return params, log
