"""Command-line entry point: synth / train / sample / evaluate / gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import models as models_mod
from . import train as train_mod
from .errors import (ConfigError, ContractError, CorruptionError,
                     DivergenceError, FlowFieldError, FormatError)
from .flowmatch import SamplerConfig, euler_sample_batch
from .models import MODEL_PRESETS, build_model, model_config_from_dict
from .rng import make_rng
from .tensor import Tensor, grad_check
from .train import (TRAIN_PRESETS, load_checkpoint, restore_model,
                    restore_stats, save_checkpoint, train_config_from_dict,
                    train_loop, train_mlp_baseline, trace_csv)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

# Run-config presets: model + train + sampler + data sections.
RUN_PRESETS = {
    "airfoil-unet": {"model": "airfoil-unet", "train": "airfoil-flow"},
    "airfoil-dit": {"model": "airfoil-dit", "train": "airfoil-flow"},
    "aircraft-dit": {"model": "aircraft-dit", "train": "aircraft-flow"},
    "airfoil-mlp": {"model": "airfoil-mlp", "train": "airfoil-mlp"},
    "synth-small": {"model": "synth-dit", "train": "synth-small"},
    "synth-unet": {"model": "synth-unet", "train": "synth-small"},
    "synth-mlp": {"model": "synth-mlp", "train": "airfoil-mlp"},
}

DEFAULT_DATA_SECTION = {"split_fractions": [0.7, 0.15, 0.15], "split_seed": 0}
DEFAULT_SWEEP = "1,1.5,2,2.5,3,4,6"


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("FLOWFIELD_THREADS", "1")))
    except ValueError:
        return 1


def load_run_config(path: str | None, preset: str | None) -> dict:
    """Expand a preset and/or strict JSON config into full section dicts."""
    sections = {"model": {}, "train": {}, "sampler": {}, "data": dict(DEFAULT_DATA_SECTION)}
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        unknown = set(doc) - {"preset", "model", "train", "sampler", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        preset = doc.get("preset", preset)
    if preset is not None:
        if preset not in RUN_PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (have {sorted(RUN_PRESETS)})")
        spec = RUN_PRESETS[preset]
        sections["model"] = asdict(MODEL_PRESETS[spec["model"]])
        sections["train"] = asdict(TRAIN_PRESETS[spec["train"]])
    for sec in ("model", "train", "sampler", "data"):
        overrides = doc.get(sec, {})
        if not isinstance(overrides, dict):
            raise ConfigError(f"config section '{sec}' must be an object")
        if sec == "sampler":
            unknown = set(overrides) - set(SamplerConfig.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown sampler config keys: {sorted(unknown)}")
        if sec == "data":
            unknown = set(overrides) - {"split_fractions", "split_seed"}
            if unknown:
                raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        sections[sec].update(overrides)
    if not sections["model"]:
        raise ConfigError("no model config: give a preset or a 'model' section")
    return sections


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        a, _, b = args.grid.partition("x")
        spec = D.SynthSpec(points=args.points, grid_c1=int(a), grid_c2=int(b),
                           seed=args.seed)
        spec.validate()
    except (ValueError, ConfigError) as exc:
        print(f"error: invalid synth spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ds = D.synth_generate(spec)
    try:
        D.save_dataset(ds, args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {ds.num_samples} samples x {ds.num_points} points to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        sections = load_run_config(args.config, args.preset)
        model_cfg = model_config_from_dict(sections["model"])
        train_cfg = train_config_from_dict(sections["train"])
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        ds = D.load_dataset(args.data)
    except OSError as exc:
        print(f"error: cannot read dataset {args.data}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, CorruptionError) as exc:
        print(f"error: bad dataset: {exc}", file=sys.stderr)
        return EXIT_USAGE
    data_sec = sections["data"]
    model_cfg = replace(model_cfg, channels=ds.num_channels, points=ds.num_points,
                        cond_dim=ds.cond_dim)
    try:
        model_cfg.validate()
        ds = D.split_conditions(ds, data_sec["split_fractions"], data_sec["split_seed"])
        ds = D.standardize(ds)
        model = build_model(model_cfg, seed=train_cfg.seed)
    except FlowFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO

    def on_checkpoint(step, ckpt):
        save_checkpoint(ckpt, out_dir / f"checkpoint_{step:08d}.ffck")

    log = print if not args.quiet else None
    try:
        if model_cfg.architecture == "mlp_baseline":
            ckpt, trace = train_mlp_baseline(model, ds, train_cfg, model_cfg,
                                             data_section=data_sec, log=log)
            csv = "epoch,loss,lr\n" + "\n".join(
                f"{e},{l!r},{lr!r}" for e, l, lr in trace) + "\n"
        else:
            ckpt, trace, _ = train_loop(model, ds, train_cfg, model_cfg,
                                        data_section=data_sec,
                                        on_checkpoint=on_checkpoint, log=log)
            csv = trace_csv(trace)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    try:
        save_checkpoint(ckpt, out_dir / "checkpoint_final.ffck")
        (out_dir / "loss_trace.csv").write_text(csv)
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {out_dir / 'checkpoint_final.ffck'}")
    return EXIT_OK


def _read_conditions_csv(path, k: int) -> np.ndarray:
    import csv as csv_mod
    with open(path, newline="") as fh:
        reader = csv_mod.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    if len(header) != k:
        raise ConfigError(
            f"conditions CSV has {len(header)} columns, checkpoint expects {k}")
    return np.asarray(rows, dtype=np.float64)


def cmd_sample(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
        model, model_cfg = restore_model(ckpt)
        ch_stats, cond_stats = restore_stats(ckpt)
    except OSError as exc:
        print(f"error: cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, CorruptionError, ConfigError) as exc:
        print(f"error: bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        raw_conds = _read_conditions_csv(args.conditions, model_cfg.cond_dim)
    except OSError as exc:
        print(f"error: cannot read conditions: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    scfg = SamplerConfig(steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
    try:
        scfg.validate()
        conds_std = D.standardize_conditions(raw_conds, cond_stats)
        fields_std = euler_sample_batch(model, conds_std, scfg)
        fields = D.destandardize_fields(fields_std, ch_stats).astype(np.float32)
        ds = D.FieldDataset(conditions=raw_conds.astype(np.float32), fields=fields)
        D.save_dataset(ds, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"sampled {fields.shape[0]} fields -> {args.out}")
    return EXIT_OK


def _evaluate_one_scale(model, conds_std, y_true, ch_stats, scfg,
                        aoa=None, channel_std=None):
    from concurrent.futures import ThreadPoolExecutor

    threads = worker_threads()
    m = conds_std.shape[0]
    if threads > 1 and m > 1:
        chunks = [c for c in np.array_split(np.arange(m), threads) if c.size]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda idx: euler_sample_batch(model, conds_std[idx], scfg,
                                               stream_offset=int(idx[0])),
                chunks))
        fields_std = np.concatenate(parts)
    else:
        fields_std = euler_sample_batch(model, conds_std, scfg)
    y_pred = D.destandardize_fields(fields_std, ch_stats)
    report = M.compute_metrics(y_true, y_pred, channel_std=channel_std)
    if aoa is not None:
        weights = M.aoa_weights(aoa)
        report.weighted_r2, report.weighted_r2_per_channel = M.weighted_r2(
            y_true, y_pred, weights)
    return report, y_pred


def cmd_evaluate(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
        model, model_cfg = restore_model(ckpt)
        ch_stats, cond_stats = restore_stats(ckpt)
        ds = D.load_dataset(args.data)
    except OSError as exc:
        print(f"error: cannot read inputs: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, CorruptionError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    data_sec = ckpt.meta.get("data") or DEFAULT_DATA_SECTION
    try:
        ds = D.split_conditions(ds, data_sec.get("split_fractions", [0.7, 0.15, 0.15]),
                                data_sec.get("split_seed", 0))
        idx = ds.indices(args.split)
        if idx.size == 0:
            raise ConfigError(f"split '{args.split}' is empty")
        sweep = [float(s) for s in args.guidance_sweep.split(",") if s.strip()]
        if not sweep:
            raise ConfigError("empty guidance sweep")
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    y_true = ds.fields[idx].astype(np.float64)
    conds_std = D.standardize_conditions(ds.conditions[idx], cond_stats)
    aoa = None
    if args.aoa_column is not None:
        if not 0 <= args.aoa_column < ds.cond_dim:
            print(f"error: --aoa-column {args.aoa_column} out of range", file=sys.stderr)
            return EXIT_USAGE
        aoa = ds.conditions[idx][:, args.aoa_column]
    for s in sweep:
        scfg = SamplerConfig(steps=args.steps, guidance_scale=s, seed=args.seed)
        report, y_pred = _evaluate_one_scale(model, conds_std, y_true, ch_stats,
                                             scfg, aoa=aoa,
                                             channel_std=ch_stats.std)
        tag = f"{s:g}".replace(".", "p")
        (out_dir / f"metrics_s{tag}.json").write_text(report.to_json() + "\n")
        (out_dir / f"metrics_s{tag}.csv").write_text(report.to_csv())
        scatter = ["true,predicted,residual"]
        yt = y_true.reshape(-1)
        yp = y_pred.reshape(-1)
        scatter += [f"{a!r},{b!r},{b - a!r}" for a, b in zip(yt, yp)]
        (out_dir / f"scatter_s{tag}.csv").write_text("\n".join(scatter) + "\n")
        print(f"s={s:g}: relative_l2={report.relative_l2:.5f} r2={report.r2:.5f} "
              f"mae={report.mae:.5f}")
    return EXIT_OK


GRADCHECK_PRESETS = {
    "airfoil-unet": "unet1d", "synth-unet": "unet1d",
    "airfoil-dit": "dit", "aircraft-dit": "dit", "synth-small": "dit",
    "synth-dit": "dit",
}


def tiny_model_for(architecture: str):
    """A desk-size instance of the given architecture for finite differences."""
    from .models import ModelConfig
    if architecture == "dit":
        cfg = ModelConfig(architecture="dit", channels=1, points=8, cond_dim=2,
                          embed_dim=8, num_blocks=2, num_heads=2, hidden_dim=8,
                          patch_size=1, mlp_ratio=2.0)
    else:
        cfg = ModelConfig(architecture="unet1d", channels=1, points=16, cond_dim=2,
                          embed_dim=8, block_dims=[8, 16], attn_heads=2,
                          attn_hidden_dim=8)
    return build_model(cfg.validate(), seed=3), cfg


def run_gradcheck(architecture: str, tolerance: float = 1e-4, h: float = 1e-4):
    # h=1e-4 rather than the library default: with the ~O(1) loss used here,
    # 1e-5 leaves central-difference roundoff above 1e-4 relative on
    # near-cancelled gradient coordinates.
    """Finite-difference check of a tiny instance; returns (report, worst)."""
    model, cfg = tiny_model_for(architecture)
    model.to_dtype(np.float64)
    rng = make_rng(11)
    # zero-initialized gates and output heads hide whole branches from the
    # check; perturb every parameter so all backward rules are exercised
    for _, p in model.named_parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.data.shape)
    z = rng.standard_normal((2, cfg.channels, cfg.points))
    t = rng.random(2)
    c = rng.standard_normal((2, cfg.cond_dim))
    drop = np.array([False, True])

    def f():
        out = model(Tensor(z, dtype=np.float64), t, c.astype(np.float64), drop_mask=drop)
        return (out * out).mean() + out.mean()

    report = grad_check(f, model.named_parameters(), h=h)
    worst = max(report.items(), key=lambda kv: kv[1])
    return report, worst


def cmd_gradcheck(args) -> int:
    if args.preset not in GRADCHECK_PRESETS:
        print(f"error: unknown preset '{args.preset}' "
              f"(have {sorted(GRADCHECK_PRESETS)})", file=sys.stderr)
        return EXIT_USAGE
    report, worst = run_gradcheck(GRADCHECK_PRESETS[args.preset], args.tolerance)
    n_fail = sum(1 for v in report.values() if v > args.tolerance)
    print(f"checked {len(report)} parameters, worst: {worst[0]} rel err {worst[1]:.3e}")
    if n_fail:
        print(f"FAIL: {n_fail} parameters exceed tolerance {args.tolerance:g}; "
              f"worst offender {worst[0]} at {worst[1]:.3e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"PASS at tolerance {args.tolerance:g}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowfield",
        description="Conditional flow-matching surrogate models for 1D field data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--grid", default="20x10", help="AxB condition grid")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on an FFD1 dataset")
    p.add_argument("--config", help="JSON run config (strict keys)")
    p.add_argument("--preset", help=f"one of {sorted(RUN_PRESETS)}")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate fields for a conditions CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--conditions", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--guidance", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="sample a split and report metrics per guidance scale")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--guidance-sweep", default=DEFAULT_SWEEP)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aoa-column", type=int, default=None,
                   help="condition column holding angle of attack in degrees")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--preset", required=True)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FlowFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
