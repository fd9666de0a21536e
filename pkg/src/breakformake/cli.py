"""Command-line entry point (``plp``).

Exit codes: 0 success, 2 usage or validation error, 3 incompatible or
tampered frozen blocks, 4 I/O or file-format error. ``PLP_LOG_LEVEL``
(``quiet``, ``info`` or ``debug``) controls diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from dataclasses import replace

from . import diag
from .formats import FormatError, load_adapter, load_task, save_adapter, save_task
from .pipeline import FINETUNE_STEPS
from .plp import (
    EXACT,
    INIT_MODES,
    DownHalf,
    FrozenTamperError,
    IncompatibleFrozenError,
    PlainLoraAdapter,
    PlpAdapter,
    UpHalf,
    break_adapter,
    make_adapter,
    merge_into_base,
)
from .synth import PlainRank, gen_task
from .train import OPTIMIZERS, ROUTINGS, TrainConfig, finetune_combined, train_content, train_style, write_trace

EXIT_OK, EXIT_USAGE, EXIT_COMPAT, EXIT_IO = 0, 2, 3, 4
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("breakformake.cli")


class UsageError(ValueError):
    pass


def _configure_logging() -> None:
    name = os.environ.get("PLP_LOG_LEVEL", "quiet").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if name not in LOG_LEVELS:
        log.warning("unknown PLP_LOG_LEVEL %r, using quiet", name)


def _ratio(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _add_train_flags(p: argparse.ArgumentParser, with_seed: bool = True) -> None:
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--d-ratio", type=_ratio, default=0.5)
    p.add_argument("--d", type=int, default=None, help="frozen feature count; overrides --d-ratio")
    p.add_argument("--mode", choices=INIT_MODES, default=EXACT)
    p.add_argument("--frozen-seed", type=int, default=7)
    p.add_argument("--routing", choices=ROUTINGS, default="mcp")
    p.add_argument("--n-aux", type=int, default=None, help="auxiliary partners per step")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="sgd")
    if with_seed:
        p.add_argument("--seed", type=int, default=42)


def _config(args, **overrides) -> TrainConfig:
    kw = dict(steps=args.steps, batch_size=args.batch, lr=args.lr, optimizer=args.optimizer,
              seed=getattr(args, "seed", 42), routing=args.routing, rank=args.rank, d=args.d,
              d_ratio=args.d_ratio, init_mode=args.mode)
    if args.n_aux is not None:
        kw.update(n_aux_styles=args.n_aux, n_aux_contents=args.n_aux)
    kw.update(overrides)
    return TrainConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plp", description="Partly learnable adapters on a synthetic task.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="write a task file")
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--contents", type=int, default=3)
    p.add_argument("--styles", type=int, default=5)
    p.add_argument("--gt-rank", type=int, default=2)
    p.add_argument("--base-scale", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)

    for name in ("train-content", "train-style"):
        p = sub.add_parser(name, help=f"train a {name.split('-')[1]} adapter")
        p.add_argument("--task", required=True)
        p.add_argument("--id", type=int, required=True)
        p.add_argument("--partner", type=int, default=None, help="partner id for one-to-one routing")
        _add_train_flags(p)
        p.add_argument("--out", required=True)
        p.add_argument("--trace", default=None)

    p = sub.add_parser("break", help="split an adapter into up and down halves")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-up", required=True)
    p.add_argument("--out-down", required=True)

    p = sub.add_parser("combine", help="join an up half with a down half")
    p.add_argument("--up", required=True)
    p.add_argument("--down", required=True)
    p.add_argument("--tag", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="briefly fine-tune a combined adapter")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--content", type=int, required=True)
    p.add_argument("--style", type=int, required=True)
    p.add_argument("--steps", type=int, default=FINETUNE_STEPS)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)

    p = sub.add_parser("eval", help="score an adapter or a weighted merge")
    p.add_argument("--adapter", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--content", type=int, required=True)
    p.add_argument("--style", type=int, required=True)
    p.add_argument("--merged-with", nargs="*", default=None, help="further adapters summed into the base")
    p.add_argument("--lambdas", nargs="*", type=float, default=None)
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--format", choices=("table", "jsonl"), default="table")

    for name in ("compare", "ablate"):
        p = sub.add_parser(name, help="method comparison" if name == "compare" else "ablation grids")
        if name == "ablate":
            p.add_argument("--which", choices=sorted(diag.ABLATIONS), required=True)
        p.add_argument("--task", required=True)
        p.add_argument("--content", type=int, default=0)
        p.add_argument("--style", type=int, default=0)
        p.add_argument("--seeds", nargs="+", type=int, default=[42])
        p.add_argument("--finetune-steps", type=int, default=FINETUNE_STEPS)
        _add_train_flags(p, with_seed=False)
        p.add_argument("--format", choices=("table", "jsonl"), default="table")
        p.add_argument("--out", default=None, help="also write line-delimited records here")

    p = sub.add_parser("export-params", help="2D projection of adapter factor vectors")
    p.add_argument("--adapters", nargs="+", required=True)
    p.add_argument("--out", default=None)
    return parser


# --- commands -------------------------------------------------------------------------


def _load_plp(path) -> PlpAdapter:
    obj = load_adapter(path)
    if not isinstance(obj, PlpAdapter):
        raise UsageError(f"{path} holds a {type(obj).__name__}, expected a full PLP adapter")
    return obj


def cmd_gen_task(args) -> int:
    task = gen_task(args.m, args.n, args.contents, args.styles, args.gt_rank, args.seed, args.base_scale)
    save_task(task, args.out)
    print(f"task m={task.m} n={task.n} contents={task.num_contents} styles={task.num_styles} "
          f"gt_rank={task.gt_rank} seed={task.seed} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    task = load_task(args.task)
    content = args.command == "train-content"
    cfg = _config(args, partner_id=args.partner)
    fn = train_content if content else train_style
    adapter, traces = fn(task, args.id, cfg, args.frozen_seed)
    save_adapter(adapter, args.out)
    if args.trace:
        write_trace(traces, args.trace)
    print(f"{adapter.tag} r={adapter.r} d={adapter.d} mode={adapter.init_mode} "
          f"final_loss={traces[-1].loss:.6g} -> {args.out}")
    return EXIT_OK


def cmd_break(args) -> int:
    up, down = break_adapter(_load_plp(args.inp))
    save_adapter(up, args.out_up)
    save_adapter(down, args.out_down)
    print(f"up -> {args.out_up}, down -> {args.out_down}")
    return EXIT_OK


def cmd_combine(args) -> int:
    up, down = load_adapter(args.up), load_adapter(args.down)
    if not isinstance(up, UpHalf) or not isinstance(down, DownHalf):
        raise UsageError("--up must be an up-half file and --down a down-half file")
    combined = make_adapter(up, down, args.tag)
    save_adapter(combined, args.out)
    print(f"{combined.tag} -> {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    task = load_task(args.task)
    adapter = _load_plp(args.inp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if adapter.tag.startswith("combined") else "default")
        tuned, traces = finetune_combined(adapter, task, args.content, args.style, args.steps, args.lr,
                                          args.batch, args.seed)
    save_adapter(tuned, args.out)
    if args.trace:
        write_trace(traces, args.trace)
    print(f"fine-tuned {args.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    task = load_task(args.task)
    adapter = load_adapter(args.adapter)
    if not isinstance(adapter, (PlpAdapter, PlainLoraAdapter)):
        raise UsageError("--adapter must hold a full adapter, not a half")
    if args.merged_with is None:
        if args.lambdas:
            raise UsageError("--lambdas requires --merged-with")
        report = diag.evaluate(adapter, task, args.content, args.style, with_oracle=not args.no_oracle,
                               label=adapter.tag)
    else:
        others = [load_adapter(p) for p in args.merged_with]
        adapters = [adapter, *others]
        lambdas = args.lambdas if args.lambdas else [1.0] * len(adapters)
        if len(lambdas) != len(adapters):
            raise UsageError(f"got {len(adapters)} adapters but {len(lambdas)} lambdas")
        W = merge_into_base(task.W0, adapters, lambdas)
        structure = None if args.no_oracle else PlainRank(min(sum(a.r for a in adapters), task.m, task.n))
        report = diag.evaluate(W, task, args.content, args.style, structure=structure, label="merged")
    rows = [diag.ResultRow(report.label or "adapter", 0, report)]
    sys.stdout.write(diag.format_table(rows) if args.format == "table" else diag.format_jsonl(rows))
    return EXIT_OK


def _emit(rows, args) -> None:
    sys.stdout.write(diag.format_table(rows) if args.format == "table" else diag.format_jsonl(rows))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(diag.format_jsonl(rows))


def cmd_compare(args) -> int:
    task = load_task(args.task)
    rows = []
    for seed in args.seeds:
        cfg = _config(args, seed=seed)
        rows += diag.compare_methods(task, args.content, args.style, cfg, args.frozen_seed, args.finetune_steps)
    _emit(rows, args)
    return EXIT_OK


def cmd_ablate(args) -> int:
    task = load_task(args.task)
    cfg = _config(args)
    fn = diag.ABLATIONS[args.which]
    kw = dict(seeds=args.seeds, frozen_seed=args.frozen_seed)
    if args.which != "finetune":
        kw["finetune_steps"] = args.finetune_steps
    if args.which == "d-ratio":
        log.info("ratio 1 is excluded from the grid: it leaves no trainable features")
        cfg = replace(cfg, d=None)
    rows = fn(task, args.content, args.style, cfg, **kw)
    _emit(rows, args)
    return EXIT_OK


def cmd_export(args) -> int:
    adapters = [load_adapter(p) for p in args.adapters]
    if not all(isinstance(a, (PlpAdapter, PlainLoraAdapter)) for a in adapters):
        raise UsageError("export-params needs full adapter files")
    proj = diag.export_params_2d(adapters)
    text = proj.to_dsv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"explained_variance={proj.explained:.6g}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "gen-task": cmd_gen_task,
    "train-content": cmd_train,
    "train-style": cmd_train,
    "break": cmd_break,
    "combine": cmd_combine,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "export-params": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (IncompatibleFrozenError, FrozenTamperError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
