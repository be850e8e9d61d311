"""Command-line entry point: ``msnet <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from .analysis import count_params_macs
from .analysis.bench import KERNELS, STAGE_SPECS, bench_conv, to_csv
from .analysis.diversity import branch_diversity
from .analysis.erf import calibrate_batch_norm, erf_report, noise_inputs, write_pgm16
from .architecture import PARTS, VARIANTS, KernelProtocol, build_model, forward_features
from .core.tensor import Tensor, no_grad
from .gradsuite import run_suite
from .io.config import load_config, model_from_config
from .io.images import read_pnm, to_nchw
from .io.weights import load_weights, save_weights
from .training import overfit_toy


class UsageError(Exception):
    pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.replace("[", "").replace("]", "").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _size(text: str):
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected H or HxW, got {text!r}")
    return tuple(vals)


def _model_args(p: argparse.ArgumentParser, parts: str = "full", precision: str = "float32") -> None:
    p.add_argument("--config", help="JSON config file (overrides the model flags below)")
    p.add_argument("--variant", default="xs", choices=sorted(VARIANTS))
    p.add_argument("--protocol", type=_int_list, default=[3, 5, 7, 9], help="kernel per stage, e.g. 3,5,7,9")
    p.add_argument("--backbone-only-hks", action="store_true",
                   help="neck and head keep 3x3 depthwise kernels")
    p.add_argument("--parts", default=parts, choices=PARTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", default=precision, choices=["float32", "float64"])


def _build(args, parts: Optional[str] = None):
    if args.config:
        cfg = load_config(args.config)
        if parts is not None:
            cfg["parts"] = parts
        return model_from_config(cfg)
    if len(args.protocol) != 4:
        raise UsageError(f"--protocol needs 4 kernel sizes, got {len(args.protocol)}")
    hks = not args.backbone_only_hks
    protocol = KernelProtocol(tuple(args.protocol), neck=hks, head=hks)
    model = build_model(args.variant, protocol, parts or args.parts, args.seed)
    return model.astype(np.dtype(args.precision))


# ---------------------------------------------------------------------------
# commands


def cmd_describe(args, out) -> int:
    model = _build(args)
    report = count_params_macs(model, args.size)
    meta = model.metadata()
    for st in meta["stages"]:
        cost = report.stages.get(f"backbone.stage{st['stage']}", {"params": 0, "macs": 0})
        st.update(params=cost["params"], macs=cost["macs"])
    doc = {"model": meta, "input_size": list(args.size), "stages": report.stages,
           "total_params": report.total_params, "total_macs": report.total_macs}
    if args.json:
        out.write(dump_json(doc))
        return 0
    out.write(f"variant {meta['variant']}  protocol {meta['protocol']}  parts {meta['parts']}  "
              f"input {args.size[0]}x{args.size[1]}\n")
    out.write(f"{'stage':<8}{'channels':>9}{'kernel':>8}{'blocks':>8}{'type':>6}{'params':>12}{'MACs':>16}\n")
    for st in meta["stages"]:
        out.write(f"{st['stage']:<8}{st['channels']:>9}{st['kernel']:>8}{st['blocks']:>8}"
                  f"{st['module_type']:>6}{st['params']:>12,}{st['macs']:>16,}\n")
    for name, cost in report.stages.items():
        if not name.startswith("backbone.stage"):
            out.write(f"{name:<39}{cost['params']:>12,}{cost['macs']:>16,}\n")
    out.write(f"{'total':<39}{report.total_params:>12,}{report.total_macs:>16,}\n")
    return 0


def cmd_cost(args, out) -> int:
    report = count_params_macs(_build(args), args.size)
    doc = report.to_dict()
    if not args.layers:
        doc.pop("layers")
    out.write(dump_json(doc))
    return 0


def cmd_gradcheck(args, out) -> int:
    res = run_suite(args.seed, args.cases or None, args.eps)
    for name, r in res["cases"].items():
        out.write(f"{name:<28} {r['max_rel_err']:.6e}\n")
    out.write(f"max relative error: {res['max_rel_err']:.6e} (tolerance {res['tolerance']:.0e})\n")
    return 0 if res["passed"] else 1


def cmd_erf(args, out) -> int:
    inputs = noise_inputs(args.inputs, args.size, seed=args.input_seed)
    reports = []
    model = _build(args, parts="backbone")
    if not args.no_calibrate:
        calibrate_batch_norm(model, inputs)
    for stage in args.stages:
        rep = erf_report(model, stage, inputs, input_size=args.size, calibrated=not args.no_calibrate,
                         input_seed=args.input_seed)
        reports.append(rep.to_dict(include_matrix=args.matrix))
        if args.pgm_dir:
            os.makedirs(args.pgm_dir, exist_ok=True)
            write_pgm16(os.path.join(args.pgm_dir, f"erf_stage{stage}.pgm"), rep.A)
    out.write(dump_json({"model": model.metadata(), "reports": reports}))
    return 0


def cmd_diversity(args, out) -> int:
    model = _build(args, parts="backbone")
    rng = np.random.default_rng(args.input_seed)
    dtype = model.parameters()[0].dtype
    images = [rng.standard_normal((1, 3, args.size, args.size)).astype(dtype)
              for _ in range(args.images)]
    fwd = lambda m, x: m.backbone(x, m.query)  # noqa: E731
    report = branch_diversity(model, images, forward=fwd)
    out.write(dump_json(report.to_dict()))
    return 0


def cmd_bench(args, out) -> int:
    specs = STAGE_SPECS if not args.specs else [tuple(_size(s.replace(":", "x"))) for s in args.specs]
    cells = bench_conv(specs, args.kernels, args.repeats, args.warmup)
    text = to_csv(cells)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        out.write(text)
    return 0


def _stats(t: Tensor) -> dict:
    d = np.asarray(t.data, dtype=np.float64)
    return {"shape": list(d.shape), "mean": float(d.mean()), "std": float(d.std()),
            "min": float(d.min()), "max": float(d.max()), "finite": bool(np.all(np.isfinite(d)))}


def cmd_forward(args, out) -> int:
    model = _build(args)
    if args.weights:
        load_weights(args.weights, model)
    model.eval()
    if args.image:
        x = to_nchw(read_pnm(args.image))
    elif args.raw:
        if not args.raw_size:
            raise UsageError("--raw needs --raw-size HxW")
        h, w = args.raw_size
        blob = np.fromfile(args.raw, dtype="<f4")
        if blob.size % (3 * h * w):
            raise ValueError(f"raw blob has {blob.size} values, not a multiple of 3x{h}x{w}")
        x = blob.reshape(-1, 3, h, w)
    else:
        raise UsageError("give --image FILE.ppm or --raw FILE --raw-size HxW")
    dtype = model.parameters()[0].dtype
    with no_grad():
        feats = forward_features(model, Tensor(np.asarray(x, dtype=dtype)))
    doc = {k: [_stats(t) for t in v] for k, v in feats.items()}
    out.write(dump_json(doc))
    return 0


def cmd_overfit(args, out) -> int:
    res = overfit_toy(args.variant, tuple(args.protocol), steps=args.steps, lr=args.lr,
                      momentum=args.momentum, seed=args.seed, freeze_query=args.freeze_query)
    text = res.to_csv()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        out.write(text)
    sys.stderr.write(f"initial {res.initial:.6g} final {res.final:.6g} ratio {res.ratio:.4g}\n")
    if res.diverged:
        sys.stderr.write("error: training diverged\n")
        return 1
    return 0


def cmd_init_weights(args, out) -> int:
    model = _build(args)
    save_weights(model, args.out)
    out.write(dump_json({"path": args.out, "tensors": len(model.state_dict()),
                         "params": model.num_parameters()}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msnet", description="Multi-branch block models: cost, ERF, "
                                     "diversity, gradient checks and benchmarks.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("describe", help="per-stage channels, kernels, params and MACs")
    _model_args(p)
    p.add_argument("--size", type=_size, default=(640, 640))
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("cost", help="CostReport as JSON")
    _model_args(p)
    p.add_argument("--size", type=_size, default=(640, 640))
    p.add_argument("--layers", action="store_true", help="include the per-layer breakdown")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--cases", nargs="*", help="subset of case names")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("erf", help="contribution matrices and h-bar per stage")
    _model_args(p, parts="backbone")
    p.add_argument("--stages", type=_int_list, default=[2, 3, 4])
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--inputs", type=int, default=32)
    p.add_argument("--input-seed", type=int, default=0)
    p.add_argument("--no-calibrate", action="store_true", help="keep initial batch-norm statistics")
    p.add_argument("--pgm-dir", help="write 16-bit PGM dumps of A here")
    p.add_argument("--matrix", action="store_true", help="include A in the JSON")
    p.set_defaults(fn=cmd_erf)

    p = sub.add_parser("diversity", help="inter-branch diversity metric")
    _model_args(p, parts="backbone")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--input-seed", type=int, default=0)
    p.set_defaults(fn=cmd_diversity)

    p = sub.add_parser("bench", help="depthwise+pointwise timing table (CSV)")
    p.add_argument("--specs", nargs="*", help="SIZE:CHANNELS pairs; default: the four stages at 640")
    p.add_argument("--kernels", type=_int_list, default=list(KERNELS))
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("forward", help="run one image and print feature statistics")
    _model_args(p)
    p.add_argument("--image", help="binary PPM/PGM file")
    p.add_argument("--raw", help="raw little-endian float32 NCHW blob")
    p.add_argument("--raw-size", type=_size)
    p.add_argument("--weights", help="weight container to load before the forward pass")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("overfit", help="toy regression; loss curve as CSV")
    p.add_argument("--variant", default="tiny", choices=sorted(VARIANTS))
    p.add_argument("--protocol", type=_int_list, default=[3, 5, 7, 9])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-query", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_overfit)

    p = sub.add_parser("init-weights", help="seeded initialization to a weight container")
    _model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_weights)
    return parser


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        return args.fn(args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"msnet: error: {exc}\n")
        return 2
    except (ValueError, KeyError, OSError, TypeError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"msnet: error: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
