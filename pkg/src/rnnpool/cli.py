"""Command-line entry point: ``rnnpool <command> ...``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or schema error.
"""
from __future__ import annotations

import argparse
import json
import os
import struct
import sys

import numpy as np

from . import memplan
from .errors import (AnalysisError, NumericError, PlanningError, QuantizationError, ShapeError,
                     SizeCapError, SpecError, TrainingError)
from .tensor import MIB, to_mib

SCHEMA_VERSION = 1
DTYPE_ENV = "RNNPOOL_DTYPE"
_DTYPES = {"f32": "float32", "i8": "int8"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------------------
# raw image files

def write_raw(path, arr: np.ndarray) -> None:
    """12-byte header (H, W, C as little-endian uint32) then float32 little-endian data."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise ShapeError("raw images must be H x W x C")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *arr.shape) + arr.tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise ShapeError(f"{path}: missing 12-byte header")
    h, w, c = struct.unpack_from("<3I", buf)
    n = h * w * c
    if len(buf) != 12 + 4 * n:
        raise ShapeError(f"{path}: header says {h}x{w}x{c} ({4 * n} bytes) but payload has "
                         f"{len(buf) - 12} bytes")
    return np.frombuffer(buf, "<f4", n, 12).reshape(h, w, c).astype(np.float32)


# --------------------------------------------------------------------------------------
# output helpers

def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        doc = {"schema": SCHEMA_VERSION, "command": args.command}
        doc.update(payload)
        print(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))
    else:
        print("\n".join(lines))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _human(n: float) -> str:
    for unit, div in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= div:
            return f"{n / div:.1f}{unit}"
    return str(int(n))


def _table(rows, headers) -> list[str]:
    widths = [max(len(str(r[i])) for r in rows + [headers]) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return [fmt.format(*headers)] + [fmt.format(*map(str, r)) for r in rows]


def _load(ref):
    from .modelfile import load_model
    return load_model(ref)


def _weights(net, path, seed, **kw):
    from .graph import init_weights, load_weights, lower
    if path:
        return load_weights(path)
    return init_weights(lower(net), rng=seed, **kw)


# --------------------------------------------------------------------------------------
# commands

def cmd_analyze(args):
    net, _ = _load(args.model)
    dtype = _DTYPES[args.dtype or os.environ.get(DTYPE_ENV, "f32")]
    segment = tuple(args.segment) if args.segment else None
    report = memplan.analyze(net, args.convention, dtype, segment)
    rows = [(n, b, f"{to_mib(b):.4f}") for n, b in report.contributions]
    lines = [f"{net.name}: {report.convention} ({report.dtype})"]
    if rows:
        lines += _table(rows, ("layer", "bytes", "MiB"))
    if "closed_form_bytes" in report.extra:
        lines.append(f"closed form: {report.extra['closed_form_bytes'] / MIB:.2f} MiB")
    lines.append(f"peak: {report.peak_mib:.2f} MiB ({report.peak_bytes} bytes)")
    _emit(args, {"model": net.name, "report": report.to_dict()}, lines)
    return 0


def cmd_madds(args):
    from .graph import count_madds, count_params, lower
    net, _ = _load(args.model)
    g = lower(net)
    madds = count_madds(net, g)
    params = count_params(net, g)
    rows = [(n, m, p) for n, m, p in zip(madds.names, madds.per_layer, params.per_layer)]
    lines = _table(rows, ("layer", "madds", "params"))
    lines.append(f"total: {_human(madds.total)} MAdds, {_human(params.total)} params")
    payload = {"model": net.name, "madds": madds.to_dict(), "params": params.to_dict()}
    if args.budget_mib is not None:
        budget = args.budget_mib * MIB
        rec = memplan.recompute_madds(net, budget if np.isfinite(budget) else float("inf"))
        payload["recompute_madds"] = rec
        lines.append(f"with recomputation under {args.budget_mib} MiB: {_human(rec)} MAdds")
    _emit(args, payload, lines)
    return 0


def cmd_run(args):
    from . import executor
    net, wpath = _load(args.model)
    x = read_raw(args.input)
    weights = _weights(net, args.weights or wpath, args.seed)
    run = executor.run_naive if args.schedule == "naive" else executor.run_streaming
    out, stats = run(net, x, weights=weights)
    if args.out:
        write_raw(args.out, out)
    if args.arena_log:
        stats.to_csv(args.arena_log)
    flat = out.reshape(-1)
    lines = [f"output shape {out.shape}, argmax {int(flat.argmax())}",
             f"peak activation memory: {stats.peak_bytes} bytes "
             f"({to_mib(stats.peak_bytes):.4f} MiB)"]
    _emit(args, {"model": net.name, "schedule": args.schedule, "output_shape": list(out.shape),
                 "argmax": int(flat.argmax()), "output": flat[:args.show].tolist(),
                 "peak_bytes": stats.peak_bytes, "final_bytes": stats.current_bytes}, lines)
    return 0


def cmd_gradcheck(args):
    from .validation import gradcheck_rnnpool
    res = gradcheck_rnnpool(args.h1, args.h2, args.patch, channels=args.channels,
                            seed=args.seed, eps=args.eps)
    ok = res["max_rel_error"] < args.tol
    lines = [f"max relative error {res['max_rel_error']:.3e} over {res['checked']} entries "
             f"({'ok' if ok else 'FAILED'}, tolerance {args.tol:g})"]
    _emit(args, dict(res, ok=ok, tolerance=args.tol), lines)
    return 0 if ok else 1


def cmd_probe(args):
    from .probe import ProbeModel, generate, train_probe
    train = generate(args.task, args.train, args.size, args.noise, seed=args.seed)
    test = generate(args.task, args.test, args.size, args.noise, seed=args.seed + 1)
    if args.export:
        test.export(args.export)
    outputs = train.labels.shape[1] if train.multilabel else len(train.names)
    model = ProbeModel.create(args.size, outputs, args.h1, args.h2, seed=args.seed)
    log = (lambda e, l, a: print(f"epoch {e + 1}: loss {l:.4f} test acc {a:.4f}",
                                 file=sys.stderr)) if not args.json else None
    res = train_probe(model, train, test, lr=args.lr, epochs=args.epochs, seed=args.seed,
                      lr_decay=args.lr_decay, callback=log)
    lines = [f"{args.task} {args.size}x{args.size} h1={args.h1} h2={args.h2}: "
             f"test accuracy {res.final_test_accuracy:.4f}"]
    _emit(args, {"task": args.task, "size": args.size, "h1": args.h1, "h2": args.h2,
                 "curve": res.curve, "losses": res.losses,
                 "accuracy": res.final_test_accuracy}, lines)
    return 0


def cmd_quantize(args):
    from .graph import lower
    from .quant import quantize_weights, save_quantized
    net, wpath = _load(args.model)
    weights = _weights(net, args.weights or wpath, args.seed)
    tensors = quantize_weights(lower(net), weights)
    save_quantized(args.out, tensors)
    size = os.path.getsize(args.out)
    lines = [f"wrote {len(tensors)} tensors to {args.out} ({size} bytes)"]
    _emit(args, {"model": net.name, "out": args.out, "tensors": len(tensors), "bytes": size},
          lines)
    return 0


def cmd_enumerate(args):
    from .dag import Dag, enumerate_min_peak
    try:
        dag = Dag.load(args.dag)
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"{args.dag}: malformed DAG file ({exc})") from None
    peak, order = enumerate_min_peak(dag, args.eviction, args.count, args.max_nodes)
    labels = [dag.nodes[i].label or str(i) for i in order]
    _emit(args, {"peak": peak, "order": order, "labels": labels, "eviction": args.eviction},
          [f"minimum peak: {peak}", "order: " + " ".join(labels)])
    return 0


def cmd_presets(args):
    from .presets import PRESET_NAMES
    _emit(args, {"presets": list(PRESET_NAMES)}, list(PRESET_NAMES))
    return 0


# --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=0)
    p = argparse.ArgumentParser(prog="rnnpool", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[common], help="peak activation memory")
    a.add_argument("model", help="model JSON file or preset:<name>")
    a.add_argument("--convention", choices=("lower", "rowwise", "layerbylayer"),
                   default="layerbylayer")
    a.add_argument("--dtype", choices=tuple(_DTYPES), default=None,
                   help=f"element type (default from ${DTYPE_ENV}, else f32)")
    a.add_argument("--segment", nargs=2, metavar=("FIRST", "LAST"),
                   help="boundaries by layer name ('input' for the image)")
    a.set_defaults(fn=cmd_analyze)

    m = sub.add_parser("madds", parents=[common], help="multiply-accumulate and parameter counts")
    m.add_argument("model")
    m.add_argument("--budget-mib", type=float, default=None,
                   help="also report MAdds with recomputation under this RAM budget")
    m.set_defaults(fn=cmd_madds)

    r = sub.add_parser("run", parents=[common], help="execute a network on a raw image")
    r.add_argument("model")
    r.add_argument("input", help="raw float32 image with a 12-byte H,W,C header")
    r.add_argument("--schedule", choices=("naive", "stream"), default="naive")
    r.add_argument("--weights", help=".npz weights (random from --seed otherwise)")
    r.add_argument("--out", help="write the output map as a raw file")
    r.add_argument("--arena-log", help="write the allocation log as CSV")
    r.add_argument("--show", type=int, default=10, help="output values to include in JSON")
    r.set_defaults(fn=cmd_run)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of RNNPool")
    gc.add_argument("--h1", type=int, default=2)
    gc.add_argument("--h2", type=int, default=2)
    gc.add_argument("--patch", type=int, default=3)
    gc.add_argument("--channels", type=int, default=2)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)

    pr = sub.add_parser("probe", parents=[common], help="train RNNPool + FC on synthetic data")
    pr.add_argument("task", choices=("lines-multiclass", "lines-multilabel", "shapes-multilabel"))
    pr.add_argument("--size", type=int, default=32)
    pr.add_argument("--h1", type=int, default=32)
    pr.add_argument("--h2", type=int, default=32)
    pr.add_argument("--epochs", type=int, default=10)
    pr.add_argument("--train", type=int, default=3000)
    pr.add_argument("--test", type=int, default=1000)
    pr.add_argument("--lr", type=float, default=0.2)
    pr.add_argument("--lr-decay", type=float, default=0.9)
    pr.add_argument("--noise", type=float, default=0.1)
    pr.add_argument("--export", help="write the test images as PGM files here")
    pr.set_defaults(fn=cmd_probe)

    q = sub.add_parser("quantize", parents=[common], help="write 8-bit per-channel weights")
    q.add_argument("model")
    q.add_argument("out")
    q.add_argument("--weights")
    q.set_defaults(fn=cmd_quantize)

    e = sub.add_parser("enumerate", parents=[common], help="exact minimum peak of a small DAG")
    e.add_argument("dag", help="JSON file with a 'nodes' list")
    e.add_argument("--eviction", choices=("direct", "strict"), default="direct")
    e.add_argument("--count", choices=("all", "intermediate"), default="all")
    e.add_argument("--max-nodes", type=int, default=13)
    e.set_defaults(fn=cmd_enumerate)

    ps = sub.add_parser("presets", parents=[common], help="list built-in networks")
    ps.set_defaults(fn=cmd_presets)
    return p


_USAGE = (SpecError, ShapeError, SizeCapError, UsageError, KeyError, FileNotFoundError)
_RUNTIME = (NumericError, PlanningError, TrainingError, AnalysisError, QuantizationError,
            ArithmeticError, OSError, ValueError, RuntimeError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "analyze" and args.dtype is None:
        env = os.environ.get(DTYPE_ENV)
        if env and env not in _DTYPES:
            print(f"error: ${DTYPE_ENV} must be one of {sorted(_DTYPES)}", file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except _USAGE as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except _RUNTIME as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
