"""Command-line entry point: ``moalign <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import GEOMETRIES, ConfigFileError, load_config, parse_overrides


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="run seed (u64)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", default=None, help="single-threaded, byte-stable outputs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="moalign", description="Motion-aligned toy video diffusion training.")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic clip dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--clips", type=int, default=64)
    g.add_argument("--families", help="comma list of family=weight pairs")
    g.add_argument("--geometry", choices=sorted(GEOMETRIES), default="desk", help="clip size preset")
    g.add_argument("--deterministic", action="store_true")
    g.add_argument("--config")

    for name in ("train-stage1", "train-stage2"):
        t = sub.add_parser(name, help=f"run {name.split('-')[1]} training")
        _common(t)
        t.add_argument("--manifest", help="training dataset directory or manifest.tsv")
        t.add_argument("--steps", type=int)
        if name == "train-stage2":
            t.add_argument("--stage1-ckpt", help="stage-1 checkpoint directory")
            t.add_argument("--loss-mode", choices=("soft_trd", "trd", "repa", "none"))

    e = sub.add_parser("eval", help="evaluate a checkpoint on a held-out manifest")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)

    a = sub.add_parser("ablate", help="run a stage-2 ablation sweep")
    _common(a)
    a.add_argument("--suite", choices=("loss_mode", "tau", "tap", "all"), default="all")
    a.add_argument("--manifest")
    a.add_argument("--stage1-ckpt")
    a.add_argument("--steps", type=int)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    c.add_argument("--all", action="store_true", help="run every registered check")
    c.add_argument("--op", action="append", default=[], help="run one named check (repeatable)")
    c.add_argument("--list", action="store_true", help="list registered checks")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.add_argument("--deterministic", action="store_true")
    c.add_argument("--config")
    return ap


def _kv(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _config(args, **extra):
    overrides = parse_overrides(_kv(args.set))
    for flag, key in (("seed", "seed"), ("out", "out"), ("deterministic", "deterministic"),
                      ("manifest", "manifest"), ("steps", "steps"), ("loss_mode", "mode"),
                      ("stage1_ckpt", "stage1_ckpt")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    overrides.update(extra)
    return load_config(args.config, **overrides)


def _families(spec: str | None):
    if not spec:
        return None
    out = {}
    for part in spec.split(","):
        name, _, w = part.partition("=")
        try:
            out[name.strip()] = float(w) if w else 1.0
        except ValueError:
            raise UsageError(f"bad family weight in {part!r}") from None
    return out


def _run(args) -> int:
    if args.cmd == "gen-data":
        from .synthvid import make_dataset

        if args.clips < 1:
            raise UsageError("--clips must be >= 1")
        F, H, W = GEOMETRIES[args.geometry]
        path = make_dataset(args.out, args.clips, _families(args.families), args.seed,
                            {"frames": F, "height": H, "width": W})
        print(path)
        return 0

    if args.cmd == "gradcheck":
        from .gradsuite import CHECKS, run_all

        if args.list:
            print("\n".join(CHECKS))
            return 0
        if not args.all and not args.op:
            raise UsageError("gradcheck needs --all, --op NAME or --list")
        unknown = [n for n in args.op if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown gradient check(s): {', '.join(unknown)}")
        return 0 if run_all(None if args.all else args.op, args.tol) else 2

    if args.cmd == "train-stage1":
        from .train import train_stage1

        cfg = _config(args, stage=1)
        if not cfg.manifest:
            raise UsageError("train-stage1 needs --manifest (or [data] manifest)")
        res = train_stage1(cfg)
        print(res.checkpoint)
        return 0

    if args.cmd == "train-stage2":
        from .train import train_stage2

        cfg = _config(args, stage=2)
        if not cfg.manifest:
            raise UsageError("train-stage2 needs --manifest (or [data] manifest)")
        if cfg.mode != "none" and not cfg.stage1_ckpt:
            raise UsageError(f"loss mode {cfg.mode!r} needs --stage1-ckpt")
        res = train_stage2(cfg)
        print(res.checkpoint)
        return 0

    if args.cmd == "eval":
        from .evaluate import evaluate

        out = args.out or "eval"
        res = evaluate(args.checkpoint, args.manifest, out, args.seed or 0)
        print(json.dumps(res, indent=2, sort_keys=True))
        return 0

    if args.cmd == "ablate":
        from .ablate import SUITES, run_ablation
        from .train import load_clips

        cfg = _config(args, stage=2)
        if not cfg.manifest:
            raise UsageError("ablate needs --manifest (or [data] manifest)")
        if not cfg.stage1_ckpt:
            raise UsageError("ablate needs --stage1-ckpt")
        clips = load_clips(cfg.manifest)
        cache: dict = {}
        for suite in SUITES if args.suite == "all" else (args.suite,):
            print(run_ablation(suite, cfg, cfg.stage1_ckpt, cfg.out, clips, cache=cache))
        return 0

    raise UsageError("missing subcommand")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError(parser.format_usage() + "moalign: error: missing subcommand")
        if getattr(args, "deterministic", False):
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=1):
                return _run(args)
        return _run(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigFileError as exc:
        print(f"moalign: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures surface as exit code 2
        print(f"moalign: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
