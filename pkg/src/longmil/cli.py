"""Command-line entry points.

Subcommands: gen, train, eval, analyze, bench, extrapolate, gradcheck.
Exit codes: 0 success, 1 validation error (bad flags, malformed inputs),
2 runtime failure.  Every artifact lands under the --out path.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import diagnostics
from .data import (
    Manifest,
    SynthSpec,
    gen_synthetic,
    load_split,
    read_bag,
    save_bags,
    split_by_size,
    split_random,
)
from .errors import ConfigError, LongMILError
from .gradcheck import grad_check_head
from .heads import HEAD_KINDS, HeadConfig, build_head
from .linalg import Rng
from .params import load_checkpoint, save_checkpoint
from .posenc import PosMode
from .train import (
    EXTRAPOLATION_VARIANTS,
    TrainConfig,
    evaluate,
    extrapolation_experiment,
    train,
)

POS_KINDS = ("none", "abs2d", "rope2d", "alibi2d")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit 1 with usage
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _ratios(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _pos_mode(args, bags=None) -> PosMode:
    if args.pos == "none":
        return PosMode.none()
    if args.pos == "rope2d":
        return PosMode.rope2d()
    if args.pos == "alibi2d":
        return PosMode.alibi2d(rho=args.rho)
    if bags is None:
        raise ConfigError("abs2d needs training bags to size its table")
    hi = np.max([b.positions.max(axis=0) for b in bags], axis=0)
    return PosMode.abs2d(int(hi[0]), int(hi[1]))


def _head_config(args, manifest: Manifest, bags) -> HeadConfig:
    return HeadConfig(
        kind=args.head,
        d_in=manifest.d,
        n_classes=manifest.n_classes,
        d_model=args.d_model,
        n_heads=args.n_heads,
        band=args.band,
        chunk_size=args.chunk,
        pos=_pos_mode(args, bags),
        local_layers=args.local_layers,
        full_layers=args.full_layers,
        global_stage=args.global_stage,
    )


def _write_run_config(out: Path, args, head_cfg: HeadConfig) -> None:
    run = {
        "head": head_cfg.kind,
        "pos_mode": head_cfg.pos.to_json(),
        "band_radius": head_cfg.band if head_cfg.band != np.inf else "inf",
        "chunk_size": head_cfg.chunk_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "epochs": args.epochs,
        "seed": args.seed,
        "manifest_path": str(args.manifest),
        "out_dir": str(args.out),
    }
    (out / "run_config.json").write_text(json.dumps(run, indent=2, sort_keys=True))


def _load_head(config_path: Path, ckpt_path: Path):
    cfg = HeadConfig.from_json(config_path.read_text())
    head = build_head(cfg, Rng(0))
    head.load_state_dict(load_checkpoint(ckpt_path))
    return cfg, head


def _write_eval(out: Path, name: str, report) -> None:
    lines = ["split,seed,macro_auc,macro_f1,class_auc", report.csv_row()]
    (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_gen(args) -> int:
    out = _out_dir(args)
    if args.spec is not None:
        spec = SynthSpec.from_json(json.loads(Path(args.spec).read_text()))
    else:
        spec = SynthSpec()
    spec = replace(spec, seed=args.seed)
    bags = gen_synthetic(spec, args.count)
    if args.split == "size":
        manifest = split_by_size(bags, args.ratios)
    else:
        manifest = split_random(bags, args.ratios, seed=args.seed)
    save_bags(bags, out)
    manifest.save(out / "manifest.csv")
    (out / "dataset.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))
    print(f"wrote {len(bags)} bags and manifest.csv to {out}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = Manifest.load(args.manifest)
    base = Path(args.manifest).parent
    train_bags = load_split(manifest, base, "train")
    val_bags = load_split(manifest, base, "val")
    head_cfg = _head_config(args, manifest, train_bags + val_bags)
    cfg = TrainConfig(
        seed=args.seed, epochs=args.epochs, lr=args.lr,
        weight_decay=args.weight_decay, patience=args.patience,
    )
    result = train(head_cfg, train_bags, val_bags, cfg)
    save_checkpoint(out / "model.ckpt", result.head.state_dict())
    (out / "head.json").write_text(head_cfg.to_json())
    _write_run_config(out, args, head_cfg)
    history = ["epoch,loss,val_auc"] + [
        f"{i},{loss:.6f},{auc:.6f}"
        for i, (loss, auc) in enumerate(zip(result.epoch_losses, result.val_aucs))
    ]
    (out / "history.csv").write_text("\n".join(history) + "\n", encoding="utf-8")
    _write_eval(out, "eval_val.csv", evaluate(result.head, val_bags, "val", args.seed))
    print(
        f"best epoch {result.best_epoch} val macro-AUC {result.best_val_auc:.4f}; "
        f"artifacts in {out}"
    )
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    config = Path(args.config) if args.config else Path(args.ckpt).parent / "head.json"
    _, head = _load_head(config, Path(args.ckpt))
    manifest = Manifest.load(args.manifest)
    bags = load_split(manifest, Path(args.manifest).parent, args.split)
    if not bags:
        raise ConfigError(f"manifest has no {args.split!r} bags")
    report = evaluate(head, bags, args.split, args.seed)
    _write_eval(out, f"eval_{args.split}.csv", report)
    print(f"{args.split}: macro-AUC {report.macro_auc:.4f} macro-F1 {report.macro_f1:.4f}")
    return 0


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    config = Path(args.config) if args.config else Path(args.ckpt).parent / "head.json"
    _, head = _load_head(config, Path(args.ckpt))
    bag = read_bag(args.bag)
    stats = diagnostics.collect_attn_stats(head, bag, tau_scale=args.tau_scale)
    diagnostics.write_stats_csv(stats, out / "attn_stats.csv")
    for s in stats:
        print(f"{s.layer}: n={s.n} rank={s.rank} sparsity={s.sparsity:.4f}")
    if not stats:
        print("head has no attention layers; wrote empty stats")
    return 0


def cmd_bench(args) -> int:
    kernels = tuple(k for k in args.kernels.split(",") if k)
    records = bench_mod.scaling_bench(
        ns=args.n, d=args.d, b=args.b, chunk=args.chunk, kernels=kernels,
        reps=args.reps, seed=args.seed, backend=args.backend,
        threads=args.threads,
        progress=lambda r: print(
            f"{r.kernel} n={r.n}: {r.time_ns / 1e6:.1f} ms, peak {r.peak_bytes} B"
        ),
    )
    out = Path(args.out)
    if out.suffix == ".csv":
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        out = out / "bench.csv"
    bench_mod.write_bench_csv(records, out)
    print(f"wrote {out}")
    return 0


def cmd_extrapolate(args) -> int:
    out = _out_dir(args)
    if args.spec is not None:
        synth = SynthSpec.from_json(json.loads(Path(args.spec).read_text()))
    else:
        synth = SynthSpec(d=args.d_in, grid_min=16, grid_max=32)
    head = HeadConfig(
        kind="longmil", d_in=synth.d, n_classes=2, d_model=args.d_model,
        band=args.band, chunk_size=args.chunk,
    )
    cfg = TrainConfig(seed=args.seed, epochs=args.epochs, lr=args.lr)
    seeds = args.seeds if args.seeds else [args.seed + i for i in range(3)]
    rows = extrapolation_experiment(
        head, synth, seeds, small_count=args.small, large_count=args.large,
        train_cfg=cfg,
        progress=lambda r: print(
            f"seed {r.seed} {r.pos_mode}: test AUC {r.test_auc:.4f}"
        ),
    )
    lines = ["pos_mode,seed,test_auc,val_auc"] + [
        f"{r.pos_mode},{r.seed},{r.test_auc:.6f},{r.val_auc:.6f}" for r in rows
    ]
    (out / "extrapolation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for mode in EXTRAPOLATION_VARIANTS:
        vals = [r.test_auc for r in rows if r.pos_mode == mode]
        print(f"{mode}: mean test AUC {np.mean(vals):.4f} over {len(vals)} seeds")
    return 0


def cmd_gradcheck(args) -> int:
    rng = Rng(args.seed)
    n, d_in = args.tokens, args.d_in
    feats = rng.gaussian(n * d_in).reshape(n, d_in)
    w = max(2, int(np.ceil(np.sqrt(n))))
    positions = bench_mod.strip_positions(n, width=w)
    cfg = HeadConfig(
        kind=args.head, d_in=d_in, n_classes=2, d_model=args.d_model,
        band=args.band, chunk_size=args.chunk, pos=_pos_mode(args),
        local_layers=1,
    )
    head = build_head(cfg, rng.spawn(1))
    report = grad_check_head(head, feats, positions, label=1, rng=rng.spawn(2))
    print(report.summary())
    return 0 if report.ok else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="longmil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset", parents=[])
    p.add_argument("--spec", help="dataset spec JSON; defaults built in")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", choices=("random", "size"), default="random")
    p.add_argument("--ratios", type=_ratios, default=(0.6, 0.2, 0.2))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a head on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--head", choices=HEAD_KINDS, default="longmil")
    p.add_argument("--pos", choices=POS_KINDS, default="rope2d")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--band", type=float, default=10.0)
    p.add_argument("--chunk", type=int, default=128)
    p.add_argument("--d-model", type=int, default=384)
    p.add_argument("--n-heads", type=int, default=1)
    p.add_argument("--local-layers", type=int, default=2)
    p.add_argument("--full-layers", type=int, default=1)
    p.add_argument("--global-stage", choices=("full", "none"), default="full")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="head config JSON; defaults to head.json next to the ckpt")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="attention rank/sparsity stats for one bag")
    p.add_argument("--bag", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="head config JSON; defaults to head.json next to the ckpt")
    p.add_argument("--tau-scale", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="time/memory scaling benchmark")
    p.add_argument("--kernels", default="full,banded")
    p.add_argument("--n", type=_int_list, default=list(bench_mod.DEFAULT_NS))
    p.add_argument("--d", type=int, default=384)
    p.add_argument("--b", type=float, default=10.0)
    p.add_argument("--chunk", type=int, default=128)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=("compiled", "python"))
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="CSV file, or a directory for bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("extrapolate", help="train-small/test-large positional study")
    p.add_argument("--spec", help="dataset spec JSON; defaults built in")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--seeds", type=_int_list, help="explicit seed list; overrides --seed+i")
    p.add_argument("--small", type=int, default=120)
    p.add_argument("--large", type=int, default=30)
    p.add_argument("--d-in", type=int, default=64)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--band", type=float, default=10.0)
    p.add_argument("--chunk", type=int, default=128)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("gradcheck", help="finite-difference check of a head")
    p.add_argument("--head", choices=HEAD_KINDS, default="longmil")
    p.add_argument("--pos", choices=("none", "rope2d", "alibi2d"), default="rope2d")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--tokens", type=int, default=24)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--band", type=float, default=2.0)
    p.add_argument("--chunk", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (LongMILError, FileNotFoundError, json.JSONDecodeError) as e:
        # bad flags, missing inputs, malformed files: the user's to fix
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # noqa: BLE001 - boundary: anything else is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
