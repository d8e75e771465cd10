"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from qlens.errors import InputError, QlensError
from qlens.harness import report as reportlib
from qlens.harness.config import load_config, parse_intensity, preset_config
from qlens.harness.runner import fmt, run
from qlens.perturb import Clip, MatchQuantL2, PerturbSpec, apply_perturbation, gen_perturbation, parse_kind
from qlens.quant import (
    QuantScheme,
    dequantize,
    parse_granularity,
    parse_policy,
    parse_transform,
    quantize_with_stats,
    read_quantized,
    resolve_alpha,
    scale_sweep,
    write_quantized,
)
from qlens.tensor import RngStream, atomic_write_bytes, l2, parse_dist, read_tensor, sample, stats, write_tensor

log = logging.getLogger("qlens")


class UsageError(QlensError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shape(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace("x", ",").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None


def _read(path: str):
    try:
        return read_tensor(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def _scheme(args) -> QuantScheme:
    return QuantScheme(
        args.bits, parse_policy(args.policy), parse_granularity(args.granularity), parse_transform(args.transform)
    )


def _add_scheme_args(p: argparse.ArgumentParser, bits: int = 8):
    p.add_argument("--bits", type=int, default=bits)
    p.add_argument("--policy", default="absmax", help="absmax | minmax | fixed:ALPHA")
    p.add_argument("--granularity", default="per-tensor", help="per-tensor | per-channel:AXIS | per-group:AXIS:SIZE")
    p.add_argument("--transform", default="identity", help="identity | signed-power[:EXPONENT]")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    t = sample(parse_dist(args.dist), args.shape, RngStream(args.seed))
    write_tensor(args.out, t)
    print(f"wrote {args.out} shape={list(t.shape)}")
    return 0


def cmd_stats(args) -> int:
    s = stats(_read(args.input))
    _emit({k: (fmt(v) if isinstance(v, float) else v) for k, v in asdict(s).items()})
    return 0


def cmd_quantize(args) -> int:
    t = _read(args.input)
    q, st = quantize_with_stats(t, _scheme(args))
    out = args.out or str(Path(args.input).with_suffix(".qtnq"))
    write_quantized(out, q)
    delta = t.data - dequantize(q).data
    print(f"l2_delta={fmt(l2(delta))} clip_fraction={fmt(st.clip_fraction)} groups={q.n_groups} -> {out}")
    return 0


def cmd_dequantize(args) -> int:
    try:
        q = read_quantized(args.input)
    except OSError as exc:
        raise InputError(f"cannot read {args.input}: {exc}") from None
    out = args.out or str(Path(args.input).with_suffix(".dq.qtns"))
    write_tensor(out, dequantize(q))
    print(f"wrote {out}")
    return 0


def cmd_fake_quant(args) -> int:
    t = _read(args.input)
    q, st = quantize_with_stats(t, _scheme(args))
    fq = dequantize(q)
    write_tensor(args.out, fq)
    print(f"l2_delta={fmt(l2(t.data - fq.data))} clip_fraction={fmt(st.clip_fraction)} -> {args.out}")
    return 0


def cmd_perturb(args) -> int:
    t = _read(args.input)
    kind = parse_kind(args.kind)
    intensity = parse_intensity(args.intensity, _scheme(args))
    spec = PerturbSpec(kind, MatchQuantL2() if isinstance(kind, Clip) else intensity, args.seed)
    delta = gen_perturbation(t, spec, RngStream(args.seed))
    write_tensor(args.out, apply_perturbation(t, delta))
    if args.delta_out:
        write_tensor(args.delta_out, delta)
    print(f"l2_delta={fmt(l2(delta))} -> {args.out}")
    return 0


def cmd_sweep_scale(args) -> int:
    if args.input:
        t = _read(args.input)
    elif args.dist and args.shape:
        t = sample(parse_dist(args.dist), args.shape, RngStream(args.seed))
    else:
        raise UsageError("sweep-scale needs --in or --dist with --shape")
    scheme = _scheme(args)
    labels = [a for a in args.alphas.split(",") if a.strip()]
    alphas = [resolve_alpha(a, t, scheme) for a in labels]
    order = sorted(range(len(alphas)), key=alphas.__getitem__)
    rows = scale_sweep(t, scheme, [alphas[i] for i in order])
    lines = [("alpha", "l2_delta", "clip_fraction")]
    lines += [(fmt(r.alpha), fmt(r.l2_delta), fmt(r.clip_fraction)) for r in rows]
    text = "".join(",".join(row) + "\r\n" for row in lines)
    if args.out:
        atomic_write_bytes(args.out, text.encode())
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _model_args(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--context", type=int, default=32)


def _task_args(p):
    p.add_argument("--task", default="copy", choices=("copy", "induction", "modadd"))
    p.add_argument("--modulus", type=int, default=17)


def cmd_train_toy(args) -> int:
    from qlens.toymodel import ModelConfig, OptimizerConfig, TaskSpec, evaluate, init, save_checkpoint, train

    cfg = ModelConfig(args.layers, args.d_model, args.heads, None, args.vocab, args.context, init_seed=args.seed)
    task = TaskSpec(args.task, args.context, args.modulus)
    params, curve = train(init(cfg), task, args.steps, OptimizerConfig(lr=args.lr, batch_size=args.batch_size), RngStream(args.train_seed))
    res = evaluate(params, task)
    save_checkpoint(params, args.out, {"task": asdict(task), "steps": args.steps, "lr": args.lr, "train_seed": args.train_seed, "eval": res.as_dict()})
    atomic_write_bytes(Path(args.out) / "loss_curve.dat", "".join(f"{i} {fmt(v)}\n" for i, v in enumerate(curve)).encode())
    _emit({"checkpoint": args.out, "final_loss": fmt(curve[-1]) if curve else None, **{k: fmt(v) for k, v in res.as_dict().items()}})
    return 0


def cmd_eval_toy(args) -> int:
    from qlens.toymodel import (
        InjectionPlan,
        Perturb,
        TaskSpec,
        activation_scheme,
        evaluate,
        inject_outliers,
        load_checkpoint,
        preset_plan,
        weight_scheme,
    )

    params, _ = load_checkpoint(args.checkpoint)
    if args.outliers:
        params, _ = inject_outliers(params, args.outlier_fraction, args.outliers, RngStream(args.outlier_seed))
    task = TaskSpec(args.task, params.config.context, args.modulus)
    if args.perturb:
        kind = parse_kind(args.perturb)
        make = lambda sch: PerturbSpec(kind, MatchQuantL2() if isinstance(kind, Clip) else parse_intensity(args.intensity, sch), args.seed)
        plan = InjectionPlan.uniform(
            params.config, weight=Perturb(make(weight_scheme(8))), activation=Perturb(make(activation_scheme(8)))
        )
    else:
        plan = preset_plan(params.config, args.preset, args.non_uniform)
    res = evaluate(params, task, plan, args.batches, seed=args.eval_seed)
    _emit({k: fmt(v) for k, v in res.as_dict().items()})
    return 0


def cmd_experiment(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise UsageError("experiment needs exactly one of --config or --preset")
    if args.config:
        cfg = load_config(args.config)
        updates = {k: v for k, v in (("n_seeds", args.seeds), ("output_dir", args.out), ("base_seed", args.base_seed), ("checkpoint", args.checkpoint)) if v is not None}
        if updates:
            cfg = cfg.model_copy(update=updates)
    else:
        cfg = preset_config(args.preset, n_seeds=args.seeds, output_dir=args.out, base_seed=args.base_seed, checkpoint=args.checkpoint)
    result = run(cfg, parallelism=args.parallelism)
    failed = [t for t in result.trials if t.error]
    print(f"{len(result.trials)} trials, {len(result.rows)} rows -> {result.csv_path}")
    for t in failed:
        print(f"trial {t.index} failed: {t.error}", file=sys.stderr)
    if args.summary:
        print(reportlib.format_table(reportlib.aggregate(reportlib.read_rows([result.csv_path]))))
    return result.exit_code


def cmd_report(args) -> int:
    written = reportlib.write_report(args.inputs, args.out)
    print(reportlib.format_table(reportlib.aggregate(reportlib.read_rows(args.inputs))))
    print(f"wrote {', '.join(str(p) for p in written)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qlens", description="Quantization and perturbation laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="sample a tensor into a QTNS file")
    p.add_argument("--dist", default="normal:0,1")
    p.add_argument("--shape", type=_shape, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("stats", help="descriptive statistics of a QTNS tensor")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("quantize", help="quantize a QTNS tensor to a QTNQ file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    _add_scheme_args(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("dequantize", help="dequantize a QTNQ file to QTNS")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_dequantize)

    p = sub.add_parser("fake-quant", help="quantize-dequantize a QTNS tensor")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_scheme_args(p)
    p.set_defaults(fn=cmd_fake_quant)

    p = sub.add_parser("perturb", help="apply an artificial perturbation")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta-out")
    p.add_argument("--kind", required=True, help="gaussian | uniform | rademacher | mag-pos | mag-neg[:EPS] | clip:K[:upper]")
    p.add_argument("--intensity", default="match-l2", help="match-l2 | match-variance | fixed-l2:VALUE")
    p.add_argument("--seed", type=int, default=0)
    _add_scheme_args(p)
    p.set_defaults(fn=cmd_perturb)

    p = sub.add_parser("sweep-scale", help="noise intensity and clip fraction versus fixed scale")
    p.add_argument("--in", dest="input")
    p.add_argument("--dist")
    p.add_argument("--shape", type=_shape)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alphas", default="0.25x,0.5x,1x,2x,4x", help="comma list; NUMx is relative to absmax")
    p.add_argument("--out")
    _add_scheme_args(p)
    p.set_defaults(fn=cmd_sweep_scale)

    p = sub.add_parser("train-toy", help="train the toy transformer and save a checkpoint")
    _model_args(p)
    _task_args(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0, help="init seed")
    p.add_argument("--train-seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval-toy", help="evaluate a checkpoint under a quantization preset or perturbation")
    p.add_argument("--checkpoint", required=True)
    _task_args(p)
    p.add_argument("--preset", default="fp", help="fp | w4a16 | w8a8 | w4a8 | wXaY")
    p.add_argument("--non-uniform", action="store_true")
    p.add_argument("--perturb", help="perturbation kind at W8A8-matched intensity (overrides --preset)")
    p.add_argument("--intensity", default="match-l2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outliers", type=float, default=0.0, help="outlier factor (0 = none)")
    p.add_argument("--outlier-fraction", type=float, default=0.01)
    p.add_argument("--outlier-seed", type=int, default=3)
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--eval-seed", type=int, default=1234)
    p.set_defaults(fn=cmd_eval_toy)

    p = sub.add_parser("experiment", help="run a JSON-configured or preset experiment")
    p.add_argument("--config")
    p.add_argument("--preset", help="figure2 | figure3 | table1 | figure01 | kernels | train-copy")
    p.add_argument("--seeds", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--summary", action="store_true", help="print the aggregated table")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", help="aggregate result CSVs into summary tables and .dat files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if not getattr(args, "fn", None):
            raise UsageError("missing subcommand; see --help")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return args.fn(args)
    except QlensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
