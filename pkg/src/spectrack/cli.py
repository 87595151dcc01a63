"""Command-line entry point.

Subcommands: synth, train, track, eval, flops, reconstruct, plot.  Each takes
``--config <ini file>`` plus repeatable ``--set section.key=value`` overrides;
``--out`` (or the SPECTRACK_OUT_ROOT environment variable) picks the output
directory.  Every run writes its fully-resolved configuration next to its
outputs so results are reproducible from that file alone.

Exit codes: 0 success, 2 bad configuration, 3 missing file, 4 shape mismatch,
5 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PROFILES, ModelConfig
from .data import (
    MUST_BANDS,
    SequenceFormatError,
    load_sequence,
    save_sequence,
)
from .flops import CONVENTION, FlopsOptions, count_flops, reduction_percent
from .metrics import SequenceTrace, evaluate
from .model import Tracker, init_params
from .numerics import ParamStore, ShapeError
from .reconstruct import reconstruct_patch_proj
from .synth import synth_sequence
from .track import track
from .train import TrainConfig, TrainingDiverged, train

EXIT_BAD_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_SHAPE_MISMATCH = 4
EXIT_DIVERGENCE = 5


class ConfigError(ValueError):
    pass


# section -> key -> (parser, default); None default means required
_SCHEMAS: dict[str, dict[str, dict]] = {
    "synth": {
        "synth": {
            "family": (str, "plain"),
            "count": (int, 4),
            "base_seed": (int, 0),
            "height": (int, 96),
            "width": (int, 96),
            "frames": (int, 20),
        }
    },
    "train": {
        "train": {
            "data": (str, None),
            "profile": (str, "desk"),
            "prompt_mode": (str, "encoder"),
            "epochs": (int, 2),
            "steps_per_epoch": (int, 300),
            "batch_size": (int, 4),
            "lr": (float, 1e-3),
            "decay_epoch": (int, -1),
            "weight_decay": (float, 1e-4),
            "seed": (int, 0),
            "dtype": (str, "float32"),
            "asymmetric": (lambda s: s.lower() == "true", True),
            "use_elimination": (lambda s: s.lower() == "true", True),
        }
    },
    "track": {
        "track": {
            "checkpoint": (str, None),
            "data": (str, None),
            "profile": (str, "desk"),
            "prompt_mode": (str, "encoder"),
            "export_masks": (lambda s: s.lower() == "true", False),
        }
    },
    "eval": {
        "eval": {
            "results": (str, None),
            "data": (str, None),
        }
    },
    "flops": {
        "flops": {
            "profile": (str, "paper"),
            "n_search": (int, 2),
            "attention": (str, "asymmetric"),
            "cache_template": (lambda s: s.lower() == "true", True),
            "eliminate": (lambda s: s.lower() == "true", True),
            "rho_end": (float, -1.0),
            "compare": (lambda s: s.lower() == "true", True),
        }
    },
    "reconstruct": {
        "reconstruct": {
            "checkpoint": (str, ""),
            "seed": (int, 0),
            "profile": (str, "desk"),
            "prompt_mode": (str, "encoder"),
        }
    },
    "plot": {
        "plot": {
            "results": (str, None),
            "data": (str, None),
        }
    },
}


def _load_config(command: str, path: str | None, overrides: list[str]) -> dict:
    schema = _SCHEMAS[command]
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file {path}")
        parser.read(path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, _, value = item.partition("=")
        if "." not in key:
            raise ConfigError(f"--set key must be section.key, got {key!r}")
        section, _, name = key.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    resolved: dict[str, dict] = {}
    for section, keys in schema.items():
        resolved[section] = {}
        if parser.has_section(section):
            for name in parser.options(section):
                if name not in keys:
                    raise ConfigError(f"unknown key [{section}] {name}")
        for name, (cast, default) in keys.items():
            if parser.has_option(section, name):
                raw = parser.get(section, name)
                try:
                    resolved[section][name] = cast(raw)
                except ValueError as e:
                    raise ConfigError(f"bad value for [{section}] {name}: {raw!r}") from e
            elif default is None:
                raise ConfigError(f"missing required key [{section}] {name}")
            else:
                resolved[section][name] = default
    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"unknown config section [{section}]")
    return resolved


def _write_resolved(cfg: dict, out: Path, command: str) -> None:
    parser = configparser.ConfigParser()
    for section, keys in cfg.items():
        parser.add_section(section)
        for name, value in keys.items():
            parser.set(section, name, str(value))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"resolved_{command}.cfg", "w") as f:
        parser.write(f)


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("SPECTRACK_OUT_ROOT", ".")
    return Path(root) / "spectrack_out"


def _model_cfg(profile: str, prompt_mode: str, bands: int | None = None) -> ModelConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (choose from {sorted(PROFILES)})")
    cfg = PROFILES[profile].with_(prompt_mode=prompt_mode)
    if bands is not None:
        cfg = cfg.with_(bands=bands)
    return cfg


def _sequence_dirs(root: Path) -> list[Path]:
    if not root.exists():
        raise FileNotFoundError(f"data directory {root}")
    dirs = sorted(p for p in root.iterdir() if (p / "meta").exists())
    if not dirs:
        raise FileNotFoundError(f"no sequence directories under {root}")
    return dirs


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: dict, out: Path, seed: int | None) -> int:
    from .bench import family_scene

    s = cfg["synth"]
    base_seed = seed if seed is not None else s["base_seed"]
    rng = np.random.default_rng(base_seed)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(s["count"]):
        spec = family_scene(s["family"], rng, height=s["height"],
                            width=s["width"], n_frames=s["frames"])
        seq = synth_sequence(spec, int(rng.integers(0, 2**31 - 1)))
        seq.name = f"{s['family']}_{i:03d}"
        save_sequence(seq, out / seq.name)
        print(f"wrote {out / seq.name} ({len(seq)} frames)")
    return 0


def cmd_train(cfg: dict, out: Path, seed: int | None) -> int:
    s = cfg["train"]
    seqs = [load_sequence(p) for p in _sequence_dirs(Path(s["data"]))]
    bands = seqs[0].frames[0].n_bands
    model_cfg = _model_cfg(s["profile"], s["prompt_mode"], bands=bands)
    tcfg = TrainConfig(
        epochs=s["epochs"], steps_per_epoch=s["steps_per_epoch"],
        batch_size=s["batch_size"], lr=s["lr"],
        decay_epoch=None if s["decay_epoch"] < 0 else s["decay_epoch"],
        weight_decay=s["weight_decay"],
        seed=seed if seed is not None else s["seed"],
        dtype=s["dtype"], asymmetric=s["asymmetric"],
        use_elimination=s["use_elimination"],
    )
    params, log = train(model_cfg, tcfg, seqs, out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "checkpoint.ckpt")
    with open(out / "train_log.csv", "w") as f:
        f.write("step,epoch,loss,rho,lr\n")
        for row in log.steps:
            f.write(f"{row['step']},{row['epoch']},{row['loss']:.6f},"
                    f"{row['rho']:.6f},{row['lr']:.2e}\n")
    print(f"trained {tcfg.total_steps} steps in {log.wall_seconds:.1f}s; "
          f"final epoch loss {log.epoch_losses[-1]:.4f}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def _write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.clip(image * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def cmd_track(cfg: dict, out: Path, seed: int | None) -> int:
    s = cfg["track"]
    ckpt = Path(s["checkpoint"])
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt}")
    params = ParamStore.load(ckpt)
    seq_dirs = _sequence_dirs(Path(s["data"]))
    first = load_sequence(seq_dirs[0])
    model_cfg = _model_cfg(s["profile"], s["prompt_mode"],
                           bands=first.frames[0].n_bands)
    tracker = Tracker(model_cfg, params)
    out.mkdir(parents=True, exist_ok=True)
    for p in seq_dirs:
        seq = load_sequence(p)
        res = track(tracker, seq)
        seq_out = out / seq.name
        seq_out.mkdir(parents=True, exist_ok=True)
        with open(seq_out / "results.txt", "w") as f:
            for box, conf in zip(res.boxes, res.confidences):
                f.write(f"{box[0]:.3f},{box[1]:.3f},{box[2]:.3f},{box[3]:.3f},{conf:.4f}\n")
        if s["export_masks"]:
            gs = model_cfg.search_grid
            for t, frame_traces in enumerate(res.traces):
                mask = np.ones(model_cfg.l_search, dtype=np.float64)
                for tr_ in frame_traces:
                    mask[tr_.dropped - (model_cfg.l_prompt + model_cfg.l_template)] = 0.0
                latest = mask[-gs * gs:].reshape(gs, gs)
                _write_pgm(seq_out / f"elim_{t + 2:06d}.pgm", latest)
        print(f"tracked {seq.name}: {len(res.boxes)} frames")
    return 0


def _load_traces(results_root: Path, data_root: Path) -> list[SequenceTrace]:
    traces = []
    for p in _sequence_dirs(data_root):
        seq = load_sequence(p)
        rfile = results_root / seq.name / "results.txt"
        if not rfile.exists():
            raise FileNotFoundError(f"results file {rfile}")
        rows = [[float(v) for v in line.split(",")]
                for line in rfile.read_text().splitlines() if line.strip()]
        boxes = np.array([r[:4] for r in rows])
        if len(boxes) != len(seq) - 1:
            raise ShapeError(
                f"{seq.name}: {len(boxes)} results for {len(seq) - 1} tracked frames"
            )
        traces.append(SequenceTrace(pred_boxes=boxes, gt=seq.annotations[1:],
                                    attributes=seq.attributes, name=seq.name))
    return traces


def cmd_eval(cfg: dict, out: Path, seed: int | None) -> int:
    s = cfg["eval"]
    traces = _load_traces(Path(s["results"]), Path(s["data"]))
    report = evaluate(traces)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.as_text())
    o = report.overall
    print(f"AUC={o.auc:.3f} SR0.5={o.sr50:.3f} SR0.75={o.sr75:.3f} "
          f"Pre={o.precision:.3f} Pre_N={o.norm_precision:.3f} "
          f"frames={o.n_frames}")
    return 0


def cmd_flops(cfg: dict, out: Path, seed: int | None) -> int:
    s = cfg["flops"]
    model_cfg = PROFILES[s["profile"]].with_(n_search=s["n_search"])
    rho_end = None if s["rho_end"] < 0 else s["rho_end"]
    opts = FlopsOptions(attention=s["attention"], cache_template=s["cache_template"],
                        eliminate=s["eliminate"], rho_end=rho_end)
    breakdown = count_flops(model_cfg, opts)
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.csv").write_text(breakdown.as_text())
    print(f"total: {breakdown.total_g:.2f} GFLOPs ({s['attention']}, "
          f"eliminate={s['eliminate']})")
    print(f"convention: {CONVENTION}")
    if s["compare"]:
        sym = count_flops(model_cfg, FlopsOptions(attention="symmetric",
                                                  cache_template=False,
                                                  eliminate=False))
        asym = count_flops(model_cfg, FlopsOptions(attention="asymmetric",
                                                   cache_template=True,
                                                   eliminate=False))
        print(f"symmetric: {sym.total_g:.2f}G  asymmetric: {asym.total_g:.2f}G  "
              f"reduction: {reduction_percent(sym, asym):.1f}%")
    return 0


def cmd_reconstruct(cfg: dict, out: Path, seed: int | None) -> int:
    s = cfg["reconstruct"]
    model_cfg = _model_cfg(s["profile"], s["prompt_mode"])
    P, C = model_cfg.patch, model_cfg.channels
    if s["checkpoint"]:
        ckpt = Path(s["checkpoint"])
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt}")
        store = ParamStore.load(ckpt)
        w = store["embed.proj.weight"].data
        if w.shape[0] != P * P * 3:
            raise ShapeError(
                f"embed.proj.weight has {w.shape[0]} input rows; expected "
                f"{P * P * 3} (a 3-band source)"
            )
        rgb_weight = w
    else:
        rng = np.random.default_rng(seed if seed is not None else s["seed"])
        rgb_weight = rng.normal(0.0, 0.02, size=(P * P * 3, C))
        store = None
    new_weight = reconstruct_patch_proj(rgb_weight, P, C, MUST_BANDS)
    out.mkdir(parents=True, exist_ok=True)
    params = init_params(model_cfg, seed=seed if seed is not None else s["seed"])
    params.set_value("embed.proj.weight", new_weight)
    if store is not None:
        for name, t in store.items():
            if name != "embed.proj.weight" and name in params:
                params.set_value(name, t.data)
    params.save(out / "reconstructed.ckpt")
    print(f"reconstructed {rgb_weight.shape} -> {new_weight.shape}; "
          f"wrote {out / 'reconstructed.ckpt'}")
    return 0


def cmd_plot(cfg: dict, out: Path, seed: int | None) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = cfg["plot"]
    traces = _load_traces(Path(s["results"]), Path(s["data"]))
    report = evaluate(traces)
    from .metrics import TAUS, _frame_stats

    ious, errs, nerrs = _frame_stats(traces)
    nthr = [i / 100 for i in range(0, 51)]
    norm_curve = [float((nerrs <= t).mean()) if nerrs.size else 0.0 for t in nthr]

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w") as f:
        f.write("tau,success\n")
        for tau, val in zip(TAUS, report.success_curve):
            f.write(f"{tau:.2f},{val:.6f}\n")
        f.write("norm_threshold,norm_precision\n")
        for t, val in zip(nthr, norm_curve):
            f.write(f"{t:.2f},{val:.6f}\n")

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot(TAUS, report.success_curve)
    axes[0].set_xlabel("overlap threshold")
    axes[0].set_ylabel("success rate")
    axes[0].set_title(f"Success (AUC {report.overall.auc:.3f})")
    axes[1].plot(nthr, norm_curve)
    axes[1].set_xlabel("normalized center error threshold")
    axes[1].set_ylabel("precision")
    axes[1].set_title(f"Normalized precision ({report.overall.norm_precision:.3f} @0.2)")
    for ax in axes:
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "curves.svg")
    print(f"AUC={report.overall.auc:.3f}; wrote {out / 'curves.svg'} and curves.csv")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "reconstruct": cmd_reconstruct,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spectrack",
        description="Multispectral tracker: synthesize data, train, track, "
                    "evaluate, count FLOPs, reconstruct weights, plot curves.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="INI configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    parser.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args.command, args.config, args.overrides)
        out = _out_dir(args)
        _write_resolved(cfg, out, args.command)
        return _COMMANDS[args.command](cfg, out, args.seed)
    except (ConfigError, configparser.Error) as e:
        print(f"error: bad config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ShapeError, SequenceFormatError, ValueError) as e:
        print(f"error: shape/format mismatch: {e}", file=sys.stderr)
        return EXIT_SHAPE_MISMATCH
    except TrainingDiverged as e:
        print(f"error: divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
