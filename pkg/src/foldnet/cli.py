"""Command-line pipeline: train, unfold, shrink, eval, bench, inspect.

Every command is deterministic given --seed.  Exit codes: 0 success,
1 data/model error, 2 usage error.  Delimited outputs (model JSON,
report JSON, loss CSV) are accompanied by matplotlib figures unless
--no-figures is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import figures
from .evaluate import BenchResult, agreement_rate, benchmark, evaluate
from .network import (
    ARCH_ENCDEC,
    ARCH_FEEDFORWARD,
    ARCH_SEQ_CLASSIFIER,
    ModelFormatError,
    Network,
    build_encdec,
    build_feedforward,
    build_gru_classifier,
    layer_names,
    load_model,
    save_model,
)
from .shrink import (
    METHOD_DATABOUND,
    METHOD_DATAFREE,
    METHOD_SRINIVAS_BABU,
    METHOD_SVD,
    METHODS,
    ShrinkReport,
    shrink_layer_datafree,
    shrink_layer_svd,
    svd_max_rank,
)
from .train import (
    COMPENSATION_MODES,
    TASK_PARITY,
    TASKS,
    PruneSchedule,
    TrainConfig,
    make_task,
    shrink_databound,
    train_adagrad,
)
from .unfold import size_factor, unfold

# paper-default ordering of mixed-method pipelines
_METHOD_ORDER = {METHOD_SVD: 0, METHOD_DATAFREE: 1, METHOD_SRINIVAS_BABU: 1, METHOD_DATABOUND: 2}
_DEFAULT_ORDER_TEXT = "svd, then datafree, then databound"

ARCH_CHOICES = {"encdec": ARCH_ENCDEC, "gruclass": ARCH_SEQ_CLASSIFIER, "ff": ARCH_FEEDFORWARD}


def _say(args, message: str) -> None:
    if not args.quiet and not args.json:
        print(message)


def _emit(args, result: dict) -> None:
    if args.json:
        print(json.dumps(result))


def _sample_cap(args) -> int:
    env = os.environ.get("FOLDNET_SAMPLE_CAP")
    if env is not None:
        return int(env)
    return args.sample_cap


def _write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        writer.writerows(curve)


def _stem(path: str) -> str:
    return path[:-5] if path.endswith(".json") else path


# -- data plumbing -----------------------------------------------------------


def _add_data_opts(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--task", choices=TASKS, required=required, help="toy task for data-dependent steps")
    p.add_argument("--vocab", type=int, default=10, help="vocabulary size incl. EOS (default 10)")
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--n", type=int, default=2000, help="number of generated items")
    p.add_argument("--data-seed", type=int, default=None, help="dataset seed (default: --seed)")


def _dataset(args, seed_shift: int = 0):
    seed = (args.data_seed if args.data_seed is not None else args.seed) + seed_shift
    return make_task(args.task, args.vocab, (args.min_len, args.max_len), args.n, seed)


def _check_task_arch(parser, task: str, arch: str) -> None:
    if task in ("reverse", "copy") and arch != ARCH_ENCDEC:
        parser.error(f"task {task!r} requires --arch encdec")
    if task == TASK_PARITY and arch == ARCH_ENCDEC:
        parser.error("task 'parity' requires --arch ff or gruclass")


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    parser = args.parser
    arch = ARCH_CHOICES[args.arch]
    _check_task_arch(parser, args.task, arch)
    data = _dataset(args)
    if arch == ARCH_ENCDEC:
        net = build_encdec(args.vocab, args.embed, args.hidden, args.att or args.embed,
                           args.proj or args.embed, seed=args.seed)
    elif arch == ARCH_SEQ_CLASSIFIER:
        net = build_gru_classifier(data.vocab_size, args.hidden, 2, seed=args.seed)
    else:
        net = build_feedforward([args.max_len, args.hidden, args.hidden, 2], seed=args.seed)

    cfg = _train_config(args, iterations=args.iters)
    if args.iters > 0:
        net, curve = train_adagrad(net, data, cfg)
    else:
        curve = []
    save_model(net, args.out)
    stem = _stem(args.out)
    _write_loss_csv(curve, stem + ".loss.csv")
    if not args.no_figures:
        figures.loss_curve_figure(curve, stem + ".loss.png", title=f"{args.task} seed {args.seed}")

    held_out = make_task(args.task, args.vocab, (args.min_len, args.max_len), args.eval_n,
                         (args.data_seed if args.data_seed is not None else args.seed) + 7919)
    metrics = evaluate([net], held_out)
    _say(args, f"wrote {args.out}; held-out " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    _emit(args, {"out": args.out, "held_out": metrics, "loss_csv": stem + ".loss.csv"})
    return 0


def _train_config(args, iterations: int) -> TrainConfig:
    cfg = dict(
        learning_rate=args.lr,
        step_clip=args.clip,
        batch_size=args.batch,
        iterations=iterations,
        seed=args.seed,
    )
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    return TrainConfig(**cfg)


# -- unfold ------------------------------------------------------------------


def cmd_unfold(args) -> int:
    nets = [load_model(p) for p in args.models]
    combined = unfold(nets)
    save_model(combined, args.out)
    factor = size_factor(combined, nets[0])
    _say(args, f"wrote {args.out}; size_factor={factor:.4f} vs {args.models[0]}")
    _emit(args, {"out": args.out, "size_factor": factor, "members": len(nets)})
    return 0


# -- shrink ------------------------------------------------------------------


@dataclass
class Stage:
    method: str
    targets: dict[int, int]


def _resolve_layer(net: Network, name: str) -> int:
    names = layer_names(net)
    if name in names:
        return names[name]
    try:
        d = int(name)
    except ValueError:
        raise ValueError(f"unknown layer {name!r}; known: {', '.join(sorted(names))}") from None
    if not 0 <= d <= net.output_id:
        raise ValueError(f"layer id {d} out of range")
    return d


def _member_sizes(net: Network, reference: Network | None, k: int | None) -> dict[int, int]:
    if reference is not None:
        return {l.id: reference.layer(l.id).size for l in net.layers}
    if k is not None:
        sizes = {}
        for l in net.layers[2:-1]:
            if l.size % k:
                raise ValueError(f"layer {l.id} size {l.size} is not divisible by K={k}")
            sizes[l.id] = l.size // k
        return sizes
    raise ValueError("'member' targets need --reference or --k")


def _resolve_target(net: Network, d: int, spec, member: dict[int, int] | None) -> int:
    if spec == "member":
        if member is None or d not in member:
            raise ValueError(f"no member size known for layer {d}")
        return member[d]
    return int(spec)


def _default_stages(net: Network, member: dict[int, int]) -> list[Stage]:
    names = layer_names(net)
    if net.arch == ARCH_ENCDEC:
        groups = [
            (METHOD_SVD, ["enc_embed", "feedback_embed", "out_proj"]),
            (METHOD_DATAFREE, ["attention"]),
            (METHOD_DATABOUND, ["enc_gru", "dec_gru"]),
        ]
    elif net.arch == ARCH_SEQ_CLASSIFIER:
        groups = [(METHOD_DATABOUND, ["gru"])]
    else:
        linear = [n for n, d in names.items() if net.layer(d).activation == "Linear"]
        other = [n for n in names if n not in linear]
        groups = [(METHOD_SVD, linear), (METHOD_DATAFREE, other)]
    stages = []
    for method, group in groups:
        targets = {}
        for name in group:
            d = names[name]
            if d not in member:
                continue
            goal = member[d]
            if method == METHOD_SVD:
                # a linear layer cannot exceed the rank of its weight product
                goal = min(goal, svd_max_rank(net, d))
            if goal < net.layer(d).size:
                targets[d] = goal
        if targets:
            stages.append(Stage(method, targets))
    return stages


def _parse_stages(args, net: Network, member: dict[int, int] | None) -> list[Stage]:
    if args.pipeline and (args.method or args.layer):
        raise ValueError("use either --pipeline or --method/--layer/--target, not both")
    if args.pipeline == "default":
        if member is None:
            raise ValueError("--pipeline default needs --reference or --k to fix member sizes")
        return _default_stages(net, member)
    if args.pipeline:
        with open(args.pipeline) as fh:
            doc = json.load(fh)
        stages = []
        for entry in doc["stages"]:
            targets = {
                _resolve_layer(net, str(name)): _resolve_target(net, _resolve_layer(net, str(name)), t, member)
                for name, t in entry["targets"].items()
            }
            stages.append(Stage(entry["method"], targets))
        return stages
    if not args.method:
        raise ValueError("nothing to do: give --pipeline or --method")
    layers = args.layer or []
    targets = args.target or []
    if not layers or len(layers) != len(targets):
        raise ValueError("--layer and --target must be given the same number of times")
    resolved = {}
    for name, t in zip(layers, targets):
        d = _resolve_layer(net, name)
        resolved[d] = _resolve_target(net, d, t, member)
    return [Stage(args.method, resolved)]


def _validate_stages(stages: list[Stage]) -> None:
    seen = set()
    for stage in stages:
        if stage.method not in METHODS:
            raise ValueError(f"unknown method {stage.method!r}")
        for d in stage.targets:
            if (stage.method, d) in seen:
                raise ValueError(f"layer {d} targeted twice by method {stage.method}")
            seen.add((stage.method, d))
    order = [_METHOD_ORDER[s.method] for s in stages]
    if any(a > b for a, b in zip(order, order[1:])):
        print(
            f"warning: stage order deviates from the default pipeline ({_DEFAULT_ORDER_TEXT})",
            file=sys.stderr,
        )


def cmd_shrink(args) -> int:
    net = load_model(args.model)
    reference = load_model(args.reference) if args.reference else None
    member = None
    if args.reference or args.k:
        member = _member_sizes(net, reference, args.k)
    stages = _parse_stages(args, net, member)
    _validate_stages(stages)
    if any(s.method == METHOD_DATABOUND for s in stages) and not args.task:
        args.parser.error("data-bound shrinking needs --task data")

    ref_for_factor = reference if reference is not None else net
    factor_before = size_factor(net, ref_for_factor)
    reports: list[ShrinkReport] = []
    curves = []
    for stage in stages:
        if stage.method == METHOD_SVD:
            for d in sorted(stage.targets):
                net, rep = shrink_layer_svd(net, d, stage.targets[d], reference=ref_for_factor)
                reports.append(rep)
        elif stage.method in (METHOD_DATAFREE, METHOD_SRINIVAS_BABU):
            for d in sorted(stage.targets):
                net, rep = shrink_layer_datafree(
                    net, d, stage.targets[d], method=stage.method, reference=ref_for_factor
                )
                reports.append(rep)
        else:
            data = _dataset(args)
            schedule = PruneSchedule(
                target_sizes=dict(stage.targets),
                remove_per_event=args.remove_per_event,
                interval_iterations=args.interval,
                activity_sample_cap=_sample_cap(args),
            )
            cfg = _train_config(args, iterations=0)
            net, reps, curve = shrink_databound(net, data, schedule, cfg, mode=args.mode,
                                                reference=ref_for_factor)
            reports.extend(reps)
            curves.extend(curve)

    save_model(net, args.out)
    factor_after = size_factor(net, ref_for_factor)
    stem = _stem(args.out)
    report_doc = {
        "format_version": 1,
        "stages": [r.to_json_obj() for r in reports],
        "size_factor_before": factor_before,
        "size_factor_after": factor_after,
    }
    with open(stem + ".report.json", "w") as fh:
        json.dump(report_doc, fh, indent=1)
        fh.write("\n")
    if curves:
        _write_loss_csv(curves, stem + ".tune.csv")
    if not args.no_figures:
        figures.shrink_report_figure(reports, stem + ".report.png")
        if curves:
            figures.loss_curve_figure(curves, stem + ".tune.png", title="data-bound fine-tuning loss")
    _say(args, f"wrote {args.out}; size_factor {factor_before:.4f} -> {factor_after:.4f}")
    _emit(args, {"out": args.out, "report": stem + ".report.json",
                 "size_factor_before": factor_before, "size_factor_after": factor_after})
    return 0


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    nets = [load_model(p) for p in args.models]
    data = _dataset(args, seed_shift=7919)
    systems = nets if (args.ensemble or len(nets) > 1) else nets[:1]
    metrics = dict(evaluate(systems, data))
    if args.agree_with:
        if len(nets) != 1:
            raise ValueError("--agree-with expects exactly one candidate model")
        refs = [load_model(p) for p in args.agree_with]
        sources = [src for src, _ in data.items]
        metrics["agreement"] = agreement_rate(refs, nets[0], sources,
                                              max_len=args.max_len + 2)
    _say(args, ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    _emit(args, metrics)
    return 0


# -- bench -----------------------------------------------------------------------


def cmd_bench(args) -> int:
    net = load_model(args.model)
    if net.arch != ARCH_ENCDEC:
        raise ValueError("bench decodes sequences; model must be an EncDecAttention network")
    data = _dataset(args, seed_shift=104729)
    sources = [src for src, _ in data.items]
    factor = 1.0
    if args.reference:
        factor = size_factor(net, load_model(args.reference))
    result = benchmark(net, sources, reps=args.reps, threads=args.threads,
                       max_len=args.decode_len, size_factor=factor)
    _say(args, f"{result.tokens_per_second:.1f} tokens/s (median of {result.repetitions} reps, "
               f"{result.threads} thread(s), size_factor={result.size_factor:.3f})")
    if args.out:
        stem = _stem(args.out)
        with open(stem + ".bench.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "seconds"])
            writer.writerows(enumerate(result.per_rep_seconds, start=1))
        if not args.no_figures:
            figures.bench_figure({os.path.basename(args.model): result.tokens_per_second},
                                 stem + ".bench.png")
    _emit(args, {"tokens_per_second": result.tokens_per_second, "wall_time": result.wall_time,
                 "repetitions": result.repetitions, "size_factor": result.size_factor,
                 "threads": result.threads})
    return 0


# -- inspect -----------------------------------------------------------------------


def cmd_inspect(args) -> int:
    net = load_model(args.model)
    reference = load_model(args.reference) if args.reference else net
    names = {d: n for n, d in layer_names(net).items()}
    rows = []
    for l in net.layers:
        rows.append({"id": l.id, "kind": l.kind, "size": l.size,
                     "activation": l.activation, "name": names.get(l.id, "")})
    factor = size_factor(net, reference)
    if not args.json:
        print(f"arch={net.arch} vocab_size={net.vocab_size} params={net.param_count()}")
        for r in rows:
            act = r["activation"] or "-"
            print(f"  layer {r['id']:>2} {r['kind']:<15} size {r['size']:>5} act {act:<8} {r['name']}")
        print(f"size_factor={factor:.4f}" + (f" vs {args.reference}" if args.reference else ""))
    _emit(args, {"arch": net.arch, "vocab_size": net.vocab_size, "params": net.param_count(),
                 "layers": rows, "size_factor": factor})
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed (default 0)")
    common.add_argument("--quiet", action="store_true", help="suppress progress chatter")
    common.add_argument("--json", action="store_true", help="machine-readable result on stdout")
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib figure output")

    parser = argparse.ArgumentParser(prog="foldnet",
                                     description="unfold ensembles into one network and shrink it back")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one member on a toy task")
    _add_data_opts(p, required=True)
    p.add_argument("--arch", choices=sorted(ARCH_CHOICES), default="encdec")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--embed", type=int, default=16)
    p.add_argument("--att", type=int, default=0, help="attention score layer size (default: --embed)")
    p.add_argument("--proj", type=int, default=0, help="output projection size (default: --embed)")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.1, help="AdaGrad learning rate for fresh training")
    p.add_argument("--clip", type=float, default=0.05)
    p.add_argument("--config", help="JSON file with TrainConfig field overrides")
    p.add_argument("--eval-n", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unfold", parents=[common], help="stack member models into one network")
    p.add_argument("models", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unfold)

    p = sub.add_parser("shrink", parents=[common], help="shrink layers of a model")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--pipeline", help="'default' or a pipeline JSON file")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--layer", action="append", help="layer name or id (repeatable)")
    p.add_argument("--target", action="append", help="target size or 'member' (repeatable)")
    p.add_argument("--reference", help="member model fixing 'member' sizes and size factors")
    p.add_argument("--k", type=int, help="member count; 'member' sizes become size/K")
    _add_data_opts(p)
    p.add_argument("--mode", choices=COMPENSATION_MODES, default="both",
                   help="data-bound compensation mechanisms")
    p.add_argument("--interval", type=int, default=50, help="iterations between pruning events")
    p.add_argument("--remove-per-event", type=int, default=4)
    p.add_argument("--sample-cap", type=int, default=50_000,
                   help="activity row cap (FOLDNET_SAMPLE_CAP overrides)")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.02, help="fine-tuning learning rate")
    p.add_argument("--clip", type=float, default=0.05)
    p.add_argument("--config", help="JSON file with TrainConfig field overrides")
    p.set_defaults(func=cmd_shrink)

    p = sub.add_parser("eval", parents=[common], help="held-out metrics for model(s)")
    p.add_argument("models", nargs="+")
    _add_data_opts(p, required=True)
    p.add_argument("--ensemble", action="store_true", help="average member predictions")
    p.add_argument("--agree-with", nargs="+",
                   help="reference model(s); report argmax agreement with the candidate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="decoding throughput")
    p.add_argument("model")
    _add_data_opts(p, required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--decode-len", type=int, default=16, help="forced decode length per source")
    p.add_argument("--reference", help="model for the reported size factor")
    p.add_argument("--out", help="stem for bench CSV/figure output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", parents=[common], help="print layer sizes and size factor")
    p.add_argument("model")
    p.add_argument("--reference")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.parser = parser
    try:
        return args.func(args)
    except (ModelFormatError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
