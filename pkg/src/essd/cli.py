"""Command-line front end: build/analyze/train/eval/detect/bench/gradcheck.

Each subcommand is a thin wrapper over one library module.  Machine-readable
output (JSON or JSONL) goes to --out or stdout, never mixed with status text,
which goes to stderr.  Report-writing commands also render a PNG figure next
to the output file unless --no-figures is given.  Exit codes: 0 ok, 2 for
config or parse problems, 3 for a missing artifact, 4 for validation
failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import CLASS_NAMES, synth_dataset
from .depth import analyze
from .evaluate import bench, decode_predictions, evaluate
from .figures import ap_figure, bench_figure, depth_figure, figure_path, loss_figure
from .gradcheck import run_gradcheck
from .graph import (
    GraphError,
    NetGraph,
    ToyConfig,
    build_essd,
    build_ssd,
    forward,
    load_canonical,
    load_descriptor,
    save_descriptor,
)
from .train import (
    ModelConfig,
    TrainConfig,
    anchors_for,
    build_detector,
    canonical_phase_plan,
    train,
)
from .weights import init_weights, load_weights, save_weights

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INVALID = 4

# fixed variant names and their (variant, fusion, extra_pred_conv) triples
VARIANT_NAMES = {
    "ESSD-less": ("essd", "sum", False),
    "ESSD-sum": ("essd", "sum", True),
    "ESSD-prod": ("essd", "prod", True),
    "ESSD-concat": ("essd", "concat", True),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _resolve_variant(args) -> tuple[str, str, bool]:
    if args.model in VARIANT_NAMES:
        if args.fusion is not None or args.extra_pred_conv is not None:
            raise CliError(EXIT_CONFIG, f"model '{args.model}' already fixes fusion and extra-pred-conv")
        return VARIANT_NAMES[args.model]
    if args.model == "ssd":
        if args.fusion is not None or args.extra_pred_conv is not None:
            raise CliError(EXIT_CONFIG, "fusion/extra-pred-conv do not apply to the plain ssd model")
        return "ssd", "sum", False
    fusion = args.fusion if args.fusion is not None else "sum"
    extra = args.extra_pred_conv if args.extra_pred_conv is not None else True
    return "essd", fusion, extra


def _model_config(args) -> ModelConfig:
    if args.profile != "toy":
        raise CliError(EXIT_CONFIG, f"profile '{args.profile}' is topology-only; this command needs --profile toy")
    variant, fusion, extra = _resolve_variant(args)
    return ModelConfig(
        variant=variant,
        fusion=fusion,
        extra_pred_conv=extra,
        input_size=args.input_size,
        base_channels=args.base_channels,
    )


def _load_store(path: str, purpose: str):
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"missing weight file '{p}' ({purpose})")
    try:
        return load_weights(p)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, f"cannot read weight file '{p}': {e}") from e


def _write_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _write_lines(lines: list[str], out: str | None) -> None:
    if out:
        Path(out).write_text("".join(f"{l}\n" for l in lines))
    else:
        for l in lines:
            print(l)


def _status(msg: str) -> None:
    print(msg, file=sys.stderr)


def _wants_figures(args) -> bool:
    return bool(args.out) and not args.no_figures


def cmd_build(args) -> int:
    graph = build_detector(_model_config(args))
    if args.out:
        save_descriptor(graph, args.out)
        _status(f"wrote descriptor {args.out}")
    else:
        print(json.dumps(graph.to_json(), indent=2))
    return EXIT_OK


def _analyze_graph(args) -> NetGraph:
    if args.descriptor:
        p = Path(args.descriptor)
        if not p.exists():
            raise CliError(EXIT_MISSING, f"missing descriptor file '{p}'")
        try:
            return load_descriptor(p)
        except json.JSONDecodeError as e:
            raise CliError(EXIT_CONFIG, f"descriptor '{p}' is not valid JSON: {e}") from e
    variant, fusion, extra = _resolve_variant(args)
    if args.profile == "canonical300":
        if variant == "ssd":
            return load_canonical("ssd300")
        if (fusion, extra) == ("sum", True):
            return load_canonical("essd300")
        return build_essd("canonical300", fusion, extra)
    cfg = ToyConfig(input_size=args.input_size, base_channels=args.base_channels)
    return build_ssd(cfg) if variant == "ssd" else build_essd(cfg, fusion, extra)


def cmd_analyze(args) -> int:
    report = analyze(_analyze_graph(args))
    _write_json(report.to_json(), args.out)
    if _wants_figures(args):
        _status(f"wrote figure {depth_figure(report, figure_path(args.out, 'depth'))}")
    return EXIT_OK


def _phases_arg(args, model: ModelConfig) -> list[int]:
    if args.all_phases and args.phase is not None:
        raise CliError(EXIT_CONFIG, "choose either --phase or --all-phases, not both")
    if model.variant == "ssd":
        if args.phase not in (None, 1):
            raise CliError(EXIT_CONFIG, "the plain ssd model trains in a single phase; use --phase 1")
        return [1]
    if args.all_phases:
        return [1, 2, 3]
    if args.phase is None:
        raise CliError(EXIT_CONFIG, "train needs --phase {1,2,3} or --all-phases")
    return [args.phase]


def cmd_train(args) -> int:
    if not args.out:
        raise CliError(EXIT_CONFIG, "train requires --out (weight file to write)")
    model = _model_config(args)
    phases = _phases_arg(args, model)
    init_store = None
    if phases[0] > 1:
        if not args.init_weights:
            raise CliError(
                EXIT_MISSING,
                f"phase {phases[0]} resumes from phase {phases[0] - 1}; pass --init-weights <phase-{phases[0] - 1} weight file>",
            )
        init_store = _load_store(args.init_weights, f"phase {phases[0]} resume")
    elif args.init_weights:
        init_store = _load_store(args.init_weights, "warm start")
    config = TrainConfig(
        batch_size=args.batch_size,
        seed=args.seed,
        plan=canonical_phase_plan().scale(args.scale),
        n_images=args.n,
    )
    graph = build_detector(model)
    store, log = train(graph, config, model, phases=phases, init_store=init_store)
    save_weights(store, args.out)
    log_path = figure_path(args.out, "log").with_suffix(".jsonl")
    _write_lines([json.dumps(r) for r in log], str(log_path))
    _status(f"wrote weights {args.out} and log {log_path} ({len(log)} iterations)")
    if not args.no_figures:
        _status(f"wrote figure {loss_figure(log, figure_path(args.out, 'loss'))}")
    return EXIT_OK


def _check_store_matches(graph: NetGraph, store) -> None:
    # structural check: a fresh init names exactly the keys the graph needs
    ref = set(init_weights(graph, 0).keys())
    got = set(store.keys())
    if ref != got:
        missing = sorted(ref - got)[:4]
        extra = sorted(got - ref)[:4]
        raise CliError(
            EXIT_INVALID,
            f"weight file does not match the requested model (missing {missing}, unexpected {extra})",
        )


def cmd_eval(args) -> int:
    model = _model_config(args)
    if not args.init_weights:
        raise CliError(EXIT_CONFIG, "eval requires --init-weights (a trained weight file)")
    graph = build_detector(model)
    store = _load_store(args.init_weights, "trained detector")
    _check_store_matches(graph, store)
    samples = synth_dataset(args.dataset_seed if args.dataset_seed is not None else args.seed, args.n, model.input_size)
    try:
        report = evaluate(graph, store, samples, anchors_for(graph), method=args.method)
    except ValueError as e:
        raise CliError(EXIT_INVALID, str(e)) from e
    _write_json(report.to_json(), args.out)
    if _wants_figures(args):
        _status(f"wrote figure {ap_figure(report, list(CLASS_NAMES), figure_path(args.out, 'ap'))}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = _model_config(args)
    if not args.init_weights:
        raise CliError(EXIT_CONFIG, "detect requires --init-weights (a trained weight file)")
    graph = build_detector(model)
    store = _load_store(args.init_weights, "trained detector")
    _check_store_matches(graph, store)
    anchors = anchors_for(graph)
    if args.images:
        sources = []
        for path in args.images:
            p = Path(path)
            if not p.exists():
                raise CliError(EXIT_MISSING, f"missing image tensor file '{p}'")
            arr = np.load(p)
            want = (3, model.input_size, model.input_size)
            if arr.shape != want:
                raise CliError(EXIT_INVALID, f"'{p}' has shape {arr.shape}, expected {want}")
            sources.append((str(p), arr.astype(np.float32)))
    else:
        seed = args.dataset_seed if args.dataset_seed is not None else args.seed
        samples = synth_dataset(seed, args.n, model.input_size)
        sources = [(i, s.image) for i, s in enumerate(samples)]
    lines = []
    for name, image in sources:
        try:
            outs = forward(graph, store, T.Tensor(image[None]), mode="eval")
        except ValueError as e:
            raise CliError(EXIT_INVALID, str(e)) from e
        conf, loc = _head_outputs(graph, outs)
        dets = decode_predictions(conf, loc, anchors, score_thresh=args.score_thresh)
        lines.append(
            json.dumps(
                {
                    "image": name,
                    "detections": [
                        {**d.to_json(), "class": CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else str(d.class_id)}
                        for d in dets
                    ],
                }
            )
        )
    _write_lines(lines, args.out)
    return EXIT_OK


def _head_outputs(graph: NetGraph, outs):
    from .graph import head_predictions

    conf, loc = head_predictions(graph, outs)
    return conf.data[0], loc.data[0]


def cmd_bench(args) -> int:
    model = _model_config(args)
    graph = build_detector(model)
    if args.init_weights:
        store = _load_store(args.init_weights, "benchmark weights")
        _check_store_matches(graph, store)
    else:
        # latency does not depend on values; fresh init plus one train-mode
        # forward to fill the bn buffers stands in for a trained file
        store = init_weights(graph, args.seed)
        probe = synth_dataset(args.seed, 1, model.input_size)[0].image
        forward(graph, store, T.Tensor(probe[None]), mode="train")
    image = synth_dataset(args.seed, 1, model.input_size)[0].image
    try:
        report = bench(graph, store, anchors_for(graph), image, iterations=args.n, warmup=args.warmup)
    except ValueError as e:
        raise CliError(EXIT_INVALID, str(e)) from e
    _write_json(report.to_json(), args.out)
    if _wants_figures(args):
        _status(f"wrote figure {bench_figure(report, figure_path(args.out, 'latency'))}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(num_seeds=args.n, base_seed=args.seed)
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:.3e}    {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    lines.append(f"{'all ok' if ok else 'FAILURES PRESENT'} ({len(results)} ops, {args.n} seeds)")
    _write_lines(lines, args.out)
    return EXIT_OK if ok else EXIT_INVALID


def _apply_config_file(args, parser) -> None:
    """JSON config supplies values for flags the user left at their defaults."""
    if not getattr(args, "config", None):
        return
    p = Path(args.config)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"missing config file '{p}'")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"config '{p}' is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise CliError(EXIT_CONFIG, f"config '{p}' must be a JSON object")
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliError(EXIT_CONFIG, f"config '{p}' has unknown key '{key}'")
        if getattr(args, attr) == parser.get_default(attr):
            setattr(args, attr, value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="essd",
        description="Desk-scale single-shot detector toolkit: graph building, depth analysis, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument(
        "--model",
        default="essd",
        choices=["ssd", "essd", *VARIANT_NAMES],
        help="detector family or a fixed variant name (which fixes fusion and extra-pred-conv)",
    )
    model_opts.add_argument("--profile", default="toy", choices=["toy", "canonical300"])
    model_opts.add_argument("--fusion", default=None, choices=["sum", "prod", "concat"])
    model_opts.add_argument("--extra-pred-conv", default=None, action=argparse.BooleanOptionalAction)
    model_opts.add_argument("--input-size", type=int, default=96, help="toy input resolution (multiple of 16)")
    model_opts.add_argument("--base-channels", type=int, default=16, help="toy width multiplier")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    common.add_argument("--out", default=None, help="output file (default: stdout)")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering next to --out")
    common.add_argument("--config", default=None, help="JSON file supplying defaults for any flag")

    p = sub.add_parser("build", parents=[model_opts, common], help="write a validated graph descriptor")
    p.set_defaults(func=cmd_build, _parser=p)

    p = sub.add_parser("analyze", parents=[model_opts, common], help="weighted-depth report for a graph")
    p.add_argument("--descriptor", default=None, help="analyze this descriptor JSON instead of building one")
    p.set_defaults(func=cmd_analyze, _parser=p)

    p = sub.add_parser("train", parents=[model_opts, common], help="run the phase plan; writes weights + JSONL log")
    p.add_argument("--phase", type=int, choices=[1, 2, 3], default=None)
    p.add_argument("--all-phases", action="store_true")
    p.add_argument("--scale", type=float, default=1000.0, help="divide canonical iteration counts (1 = full schedule)")
    p.add_argument("--init-weights", default=None, help="weight file to resume from (required for phase 2/3)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--n", type=int, default=16, help="training images")
    p.set_defaults(func=cmd_train, _parser=p)

    p = sub.add_parser("eval", parents=[model_opts, common], help="mAP report over a synthetic set")
    p.add_argument("--init-weights", default=None, help="trained weight file")
    p.add_argument("--n", type=int, default=16, help="evaluation images")
    p.add_argument("--dataset-seed", type=int, default=None, help="sample stream for images (default: --seed)")
    p.add_argument("--method", default="11point", choices=["11point", "area"])
    p.set_defaults(func=cmd_eval, _parser=p)

    p = sub.add_parser("detect", parents=[model_opts, common], help="detections as JSONL, one line per image")
    p.add_argument("images", nargs="*", help="optional .npy tensors shaped (3, S, S); default: synthetic images")
    p.add_argument("--init-weights", default=None, help="trained weight file")
    p.add_argument("--n", type=int, default=4, help="synthetic images when no files are given")
    p.add_argument("--dataset-seed", type=int, default=None)
    p.add_argument("--score-thresh", type=float, default=0.6)
    p.set_defaults(func=cmd_detect, _parser=p)

    p = sub.add_parser("bench", parents=[model_opts, common], help="batch-1 latency of forward+decode+NMS")
    p.add_argument("--init-weights", default=None, help="weight file (default: fresh init)")
    p.add_argument("--n", type=int, default=100, help="timed iterations")
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_bench, _parser=p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--n", type=int, default=5, help="seeds per op")
    p.set_defaults(func=cmd_gradcheck, _parser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, args._parser)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except GraphError as e:
        for v in e.violations:
            print(f"validation: {v}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
