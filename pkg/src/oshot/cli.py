"""oshotctl command line: dataset generation, pretraining, adaptive
evaluation, gamma sweeps, the rotation-input ablation, error analysis, and
the gradient-check suite.

Exit codes: 0 success, 1 contract violation, 2 IO/config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evalkit, gradcheck, minidet, pipeline, scenes
from .errors import ConfigError, ContractViolation, DatasetError
from .pipeline import AdaptConfig, EvalConfig, PretrainConfig

DATA_DEFAULTS = {"count": 200, "styles": "plain"}
MODEL_DEFAULTS = {"num_classes": scenes.NUM_CLASSES}


def default_config() -> dict:
    return {
        "seed": 0,
        "data": dict(DATA_DEFAULTS),
        "model": dict(MODEL_DEFAULTS),
        "pretrain": {
            k: v for k, v in dataclasses.asdict(PretrainConfig()).items() if k != "seed"
        },
        "adapt": {
            k: v for k, v in dataclasses.asdict(AdaptConfig()).items() if k != "seed"
        },
        "eval": dataclasses.asdict(EvalConfig()),
    }


def _merge_section(base: dict, override: dict, path: str) -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{path}.{key}' must be an object")
            out[key] = _merge_section(base[key], val, f"{path}.{key}")
        else:
            out[key] = val
    return out


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    for key, val in doc.items():
        if key == "seed":
            cfg["seed"] = int(val)
        elif key in ("data", "model", "pretrain", "adapt", "eval"):
            if not isinstance(val, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            cfg[key] = _merge_section(cfg[key], val, key)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return cfg


def _apply_overrides(cfg: dict, args: argparse.Namespace, mapping: dict[str, tuple[str, str]]) -> dict:
    """Flags win over the config file."""
    for attr, (section, key) in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            if section == "":
                cfg[key] = val
            else:
                cfg[section][key] = val
    return cfg


def _pretrain_cfg(cfg: dict) -> PretrainConfig:
    return PretrainConfig(seed=cfg["seed"], **cfg["pretrain"])


def _adapt_cfg(cfg: dict) -> AdaptConfig:
    return AdaptConfig(seed=cfg["seed"], **cfg["adapt"])


def _eval_cfg(cfg: dict) -> EvalConfig:
    return EvalConfig(**cfg["eval"])


def _dump_effective(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _write_meta(out_dir: Path, started: float) -> None:
    meta = {"started_unix": started, "finished_unix": time.time()}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _write_log(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args, {"count": ("data", "count"), "styles": ("data", "styles"), "seed": ("", "seed")})
    out = Path(args.out)
    samples = scenes.gen_dataset(cfg["data"]["count"], cfg["seed"], cfg["data"]["styles"])
    scenes.write_dataset(samples, out)
    _dump_effective(cfg, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _apply_overrides(
        cfg,
        args,
        {
            "seed": ("", "seed"),
            "steps": ("pretrain", "steps"),
            "lam": ("pretrain", "lam"),
            "rotation_input": ("pretrain", "rotation_input"),
        },
    )
    dataset = scenes.read_dataset(args.data)
    pcfg = _pretrain_cfg(cfg)
    params, log = pipeline.pretrain(dataset, pcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    minidet.save_checkpoint(params, out)
    _write_log(out.with_suffix(out.suffix + ".log.jsonl"), log)
    _dump_effective(cfg, out.parent)
    _write_meta(out.parent, started)
    print(f"pretrained {pcfg.steps} steps -> {out} (final L_d {log[-1]['L_d']:.4f})")
    return 0


def _run_eval(args, cfg: dict, gamma: int | None = None, mode: str | None = None):
    params = minidet.load_checkpoint(args.ckpt)
    dataset = scenes.read_dataset(args.data)
    acfg = _adapt_cfg(cfg)
    if gamma is not None:
        acfg = dataclasses.replace(acfg, gamma=gamma)
    if mode is not None:
        acfg = dataclasses.replace(acfg, rotation_input=mode)
    ecfg = _eval_cfg(cfg)
    dets, report, logs = pipeline.evaluate_stream(params, dataset, acfg, ecfg)
    return dets, report, logs


def cmd_eval(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _apply_overrides(
        cfg,
        args,
        {
            "seed": ("", "seed"),
            "gamma": ("adapt", "gamma"),
            "mode": ("adapt", "rotation_input"),
            "jobs": ("eval", "jobs"),
            "topk": ("eval", "top_k"),
        },
    )
    out = Path(args.out)
    _, report, logs = _run_eval(args, cfg)
    evalkit.emit_report(report, out)
    _write_log(out / "adapt_log.jsonl", [rec for log in logs for rec in log])
    _dump_effective(cfg, out)
    _write_meta(out, started)
    print(f"mAP {report.map:.4f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _apply_overrides(cfg, args, {"seed": ("", "seed"), "jobs": ("eval", "jobs")})
    gammas = [int(g) for g in args.gammas.split(",") if g.strip() != ""]
    if not gammas:
        raise ConfigError("sweep: no gamma values given")
    params = minidet.load_checkpoint(args.ckpt)
    dataset = scenes.read_dataset(args.data)
    acfg = _adapt_cfg(cfg)
    ecfg = _eval_cfg(cfg)
    out = Path(args.out)
    curve = []
    final_report = None
    for gamma in gammas:
        _, report, _ = pipeline.evaluate_stream(
            params, dataset, dataclasses.replace(acfg, gamma=gamma), ecfg
        )
        curve.append((gamma, report.map))
        final_report = report
    final_report.gamma_curve = curve
    evalkit.emit_report(final_report, out)
    _dump_effective(cfg, out)
    _write_meta(out, started)
    print("gamma curve: " + ", ".join(f"{g}:{m:.4f}" for g, m in curve))
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _apply_overrides(cfg, args, {"seed": ("", "seed"), "gamma": ("adapt", "gamma"), "jobs": ("eval", "jobs")})
    out = Path(args.out)
    rows = []
    for mode in ("image", "pseudobox"):
        _, report, _ = _run_eval(args, cfg, mode=mode)
        evalkit.emit_report(report, out / mode)
        rows.append((mode, report.map))
    out.mkdir(parents=True, exist_ok=True)
    lines = ["mode,map"] + [f"{m},{v:.6f}" for m, v in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    _dump_effective(cfg, out)
    _write_meta(out, started)
    print("ablation: " + ", ".join(f"{m}={v:.4f}" for m, v in rows))
    return 0


def cmd_errors(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _apply_overrides(
        cfg,
        args,
        {"seed": ("", "seed"), "gamma": ("adapt", "gamma"), "topk": ("eval", "top_k"), "jobs": ("eval", "jobs")},
    )
    out = Path(args.out)
    _, report, _ = _run_eval(args, cfg)
    evalkit.emit_report(report, out)
    _dump_effective(cfg, out)
    _write_meta(out, started)
    errs = report.errors
    print(
        f"errors (top {errs.get('total', 0)}): correct {errs['correct']}, "
        f"mislocalized {errs['mislocalized']}, background {errs['background']}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed if args.seed is not None else 0)
    worst = 0.0
    ok = True
    for name, err, passed in results:
        print(f"{name:24s} max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
        worst = max(worst, err)
        ok = ok and passed
    if not ok:
        raise ContractViolation(f"gradient checks failed (worst rel err {worst:.3e})")
    print(f"all gradient checks passed (worst rel err {worst:.3e})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oshotctl", description=__doc__)
    parser.add_argument("--print-defaults", action="store_true", help="print the default config JSON and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="RunConfig JSON file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen", help="generate a dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--styles", default=None, help="comma list of styles, or 'random'")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="multi-task pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--rotation-input", dest="rotation_input", choices=["image", "boxcrop"], default=None)
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="adaptive evaluation on a target dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=int, default=None)
    p.add_argument("--mode", choices=["image", "pseudobox"], default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="mAP at several gamma values")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gammas", default="0,10,30,70")
    p.add_argument("--jobs", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="rotation-input ablation: image vs pseudobox")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("errors", help="error-type analysis of top-k detections")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_errors)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, config=False)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(json.dumps(default_config(), indent=2, sort_keys=True))
        return 0
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ContractViolation as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
