"""``faxbev`` command line: gradient checks, attention benchmark, toy training, evaluation and dumps.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from faxbev.errors import ConfigurationError, FaxBevError, FormatError, UsageError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _limit_threads() -> None:
    n = os.environ.get("FAXBEV_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise UsageError(f"FAXBEV_THREADS must be a positive integer, got {n!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # BLAS picks the variables up only before it loads
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n
        return
    threadpool_limits(int(n))


# -- config handling -----------------------------------------------------------

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _train_config(args):
    from faxbev.train import TrainConfig
    base = _load_config_file(args.config)
    base.pop("command", None)  # accept a previous run's echoed config.json
    try:
        cfg = TrainConfig.from_dict(base)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from None
    overrides = {"seed": args.seed, "train_scenes": args.scenes, "epochs": args.epochs, "lr": args.lr,
                 "dtype": args.dtype}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.np_dtype()
    if cfg.train_scenes < 1 or cfg.epochs < 0:
        raise UsageError("--scenes must be >= 1 and --epochs >= 0")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _echo_config(out: Path | None, command: str, resolved: dict) -> None:
    text = json.dumps({"command": command, **resolved}, indent=2, sort_keys=True, default=_jsonable)
    print(text)
    if out is not None:
        (out / "config.json").write_text(text + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


# -- subcommands -------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from faxbev.gradcheck import TOLERANCE, format_table, run_checks
    _echo_config(None, "gradcheck", {"filter": args.filter, "seed": args.seed, "instances": args.instances})
    results = run_checks(args.filter, seed=args.seed, instances=args.instances, tolerance=TOLERANCE)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (tolerance {TOLERANCE:g})")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench_attention(args) -> int:
    from faxbev.bench import CSV_HEADER, bench_attention, fit_slopes
    sizes = tuple(int(s) for s in args.sizes.split(","))
    resolved = {"sizes": sizes, "agents": args.agents, "P": args.P, "G": args.G, "heads": args.heads,
                "dim": args.dim, "repeats": args.repeats, "seed": args.seed}
    out = _out_dir(args) if args.out else None
    _echo_config(out, "bench-attention", resolved)
    rows = bench_attention(sizes, args.agents, args.P, args.G, args.heads, args.dim, args.repeats, args.seed)
    lines = [",".join(CSV_HEADER)] + [r.csv() for r in rows]
    print("\n".join(lines))
    if out is not None:
        (out / "bench_attention.csv").write_text("\n".join(lines) + "\n")
    for variant, slope in fit_slopes(rows).items():
        t_slope = fit_slopes(rows, "wall_ms").get(variant, float("nan"))
        print(f"# {variant}: log-log slope of pair_count vs H*W = {slope:.3f} (wall time slope {t_slope:.2f})")
    return EXIT_OK


def _datasets(cfg):
    from faxbev.train import build_dataset, scene_seeds
    train = build_dataset(cfg.scene, scene_seeds(cfg, "train"))
    val = build_dataset(cfg.scene, scene_seeds(cfg, "val"))
    return train, val


def cmd_train_toy(args) -> int:
    from faxbev.io import save_checkpoint
    from faxbev.models import build_model
    from faxbev.train import json_line, train_model, warm_start
    cfg = _train_config(args)
    out = _out_dir(args)
    _echo_config(out, "train-toy", cfg.to_dict())
    train, val = _datasets(cfg)
    log_path = out / "metrics.jsonl"
    with log_path.open("w") as log:
        def emit(rec):
            line = json_line(rec)
            print(line, flush=True)
            log.write(line + "\n")
        single = build_model("single", cfg.model, seed=cfg.seed).to(cfg.np_dtype())
        train_model(single, train, cfg, val, emit)
        save_checkpoint(out / "single.ckpt", single.state_dict())
        coop = build_model("cobevt", cfg.model, seed=cfg.seed).to(cfg.np_dtype())
        if cfg.warm_start:
            warm_start(coop, single)
        train_model(coop, train, cfg, val, emit)
        save_checkpoint(out / "cobevt.ckpt", coop.state_dict())
    print(f"wrote {out / 'single.ckpt'}, {out / 'cobevt.ckpt'} and {log_path}")
    return EXIT_OK


def load_trained(checkpoint: str, config_path: str | None = None):
    """(model, TrainConfig) from a checkpoint written by ``train-toy``.

    The model kind is taken from the file name (``single``/``cobevt``); the
    config from ``--config`` or ``config.json`` next to the checkpoint.
    """
    from faxbev.io import load_checkpoint
    from faxbev.models import build_model
    from faxbev.train import TrainConfig
    path = Path(checkpoint)
    kind = "single" if path.stem.startswith("single") else "cobevt" if path.stem.startswith("cobevt") else None
    if kind is None:
        raise UsageError(f"cannot tell the model kind of {path}; expected single*.ckpt or cobevt*.ckpt")
    cfg_file = config_path or str(path.parent / "config.json")
    raw = _load_config_file(cfg_file)
    raw.pop("command", None)
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ConfigurationError) as exc:
        raise UsageError(f"bad config {cfg_file}: {exc}") from None
    try:
        state = load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    model = build_model(kind, cfg.model, seed=cfg.seed)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {path} does not match config {cfg_file}: {exc}") from None
    model.to(next(iter(state.values())).dtype).eval()
    return model, cfg


def cmd_eval(args) -> int:
    from faxbev.geometry import surround_rigs
    from faxbev.train import build_dataset, eval_report, json_line, scene_seeds
    model, cfg = load_trained(args.checkpoint, args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    trained_rate = cfg.model.compressor.rate
    if args.compression_rate is not None and args.compression_rate != trained_rate:
        raise UsageError(f"--compression-rate {args.compression_rate} does not match the checkpoint "
                         f"(trained with rate {trained_rate})")
    cameras = len(surround_rigs())
    if args.drop_cameras is not None and not 0 <= args.drop_cameras <= cameras:
        raise UsageError(f"--drop-cameras must be in [0, {cameras}], got {args.drop_cameras}")
    if args.max_agents is not None and args.max_agents < 1:
        raise UsageError("--max-agents must be >= 1")
    n = args.scenes or 200
    resolved = {"checkpoint": args.checkpoint, "scenes": n, "seed": cfg.seed, "drop_cameras": args.drop_cameras or 0,
                "max_agents": args.max_agents, "compression_rate": trained_rate}
    out = _out_dir(args) if args.out else None
    _echo_config(out, "eval", resolved)
    scenes = build_dataset(cfg.scene, scene_seeds(cfg, "eval", n))
    rec = eval_report(model, scenes, trained_rate, args.drop_cameras or 0, args.max_agents)
    line = json_line(rec)
    print(line)
    if out is not None:
        with (out / "eval.jsonl").open("a") as fh:
            fh.write(line + "\n")
    return EXIT_OK


def cmd_dump(args) -> int:
    from faxbev.dump import dump_scene
    out = _out_dir(args)
    model, cfg = load_trained(args.checkpoint, args.config)
    seed = args.scene if args.scene is not None else (args.seed or 0)
    _echo_config(out, "dump", {"what": args.what, "checkpoint": args.checkpoint, "scene_seed": seed})
    written = dump_scene(model, cfg.scene, seed, args.what, out)
    for p in written:
        print(p)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faxbev", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dtype", choices=("f32", "f64"))
        return sp

    g = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), 0)
    g.add_argument("--filter", help="regular expression over check names")
    g.add_argument("--instances", type=int, help="cap on random instances per check")
    g.set_defaults(func=cmd_gradcheck)

    b = common(sub.add_parser("bench-attention", help="FAX vs dense attention pair counts and timings"), 0)
    b.add_argument("--sizes", default="16,32,64", help="comma-separated H=W values")
    b.add_argument("--agents", type=int, default=2)
    b.add_argument("--P", type=int, default=8)
    b.add_argument("--G", type=int, default=8)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--dim", type=int, default=8)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench_attention)

    t = common(sub.add_parser("train-toy", help="train the single-agent and cooperative models"))
    t.add_argument("--scenes", type=int, help="number of training scenes")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train_toy, out="runs/toy")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes"))
    e.add_argument("checkpoint")
    e.add_argument("--scenes", type=int, help="number of held-out scenes (default 200)")
    e.add_argument("--compression-rate", type=int)
    e.add_argument("--drop-cameras", type=int)
    e.add_argument("--max-agents", type=int)
    e.set_defaults(func=cmd_eval)

    d = common(sub.add_parser("dump", help="write .tdump tensors and PPM images for one scene"))
    d.add_argument("what", choices=("attention-maps", "warped-features", "predictions"))
    d.add_argument("checkpoint")
    d.add_argument("--scene", type=int, help="scene seed (defaults to --seed)")
    d.set_defaults(func=cmd_dump, out="dump")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        _limit_threads()
        return args.func(args)
    except UsageError as exc:
        print(f"faxbev: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, FormatError) as exc:
        print(f"faxbev: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FaxBevError as exc:
        print(f"faxbev: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
