"""Command-line front end: inspect spectra, compress, evaluate, debug maxvol.

One binary with subcommands.  Flags may also be supplied through a JSON
config file (``--config``); explicit flags win over file values.  stdout
carries data (JSON), stderr carries diagnostics.  Exit codes: 0 success,
2 I/O or parse failure, 3 shape mismatch, 4 plan domain violation,
5 numerical failure.  Output payloads contain no timestamps, so identical
config and seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .compress import (
    DEFAULT_CALIBRATION_LIMIT,
    DEFAULT_MEMORY_CAP,
    CompressionPlan,
    build_student,
    load_plan,
    make_uniform_plan,
)
from .errors import FormatError, NumericalError, PlanError, RonError, ShapeError
from .linalg import maxvol_bound, rect_maxvol, sketched_pinv
from .metrics import (
    evaluate,
    flop_reduction,
    flops_student,
    flops_teacher,
    spectrum,
    time_forward,
)
from .modelio import load_dataset, load_model, save_student
from .network import DEFAULT_LOWERING_CAP, StudentNetwork, TeacherNetwork

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_SHAPE = 3
EXIT_PLAN = 4
EXIT_NUMERIC = 5


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file; explicit flags win")
    parser.add_argument("--seed", type=int, default=None, help="RNG/hash seed (default 0)")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker-thread hint; current kernels run single-threaded "
        "deterministically, the value is validated and recorded only",
    )
    parser.add_argument(
        "--memory-cap",
        type=int,
        default=None,
        help=f"activation-matrix entry cap before sketching (default {DEFAULT_MEMORY_CAP})",
    )
    parser.add_argument(
        "--lowering-cap",
        type=int,
        default=None,
        help=f"lowered-conv matrix entry cap (default {DEFAULT_LOWERING_CAP})",
    )
    parser.add_argument("-v", "--verbose", action="store_true")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ronkit",
        description="Compress feed-forward networks into dense reduced-order students.",
    )
    parser.add_argument("--version", action="version", version=f"ronkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="emit per-layer singular spectra")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--layers", default=None, help="comma-separated layer indices")
    _add_common(p)

    p = sub.add_parser("compress", help="build a student model with reports")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--plan", default=None, help="plan file (JSON)")
    p.add_argument("--rank-fraction", type=float, default=None)
    p.add_argument("--energy", type=float, default=None)
    p.add_argument("--oversample-factor", type=float, default=None, help="default 1.5")
    p.add_argument("--layers-from", type=int, default=None)
    p.add_argument(
        "--calibration-limit",
        type=int,
        default=None,
        help=f"max calibration samples (default {DEFAULT_CALIBRATION_LIMIT})",
    )
    _add_common(p)

    p = sub.add_parser("eval", help="accuracy and FLOP summary for a model")
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--baseline", default=None, help="teacher model for the FLOP ratio")
    p.add_argument("--time", action="store_true", help="median-of-11 wall-clock timing")
    _add_common(p)

    p = sub.add_parser("maxvol", help="debug row selection on a matrix file")
    p.add_argument("--matrix", default=None, help=".rond file holding the matrix")
    p.add_argument("--rank", type=int, default=None, help="use the first R columns")
    p.add_argument("--rows", type=int, default=None, help="P rows to select")
    p.add_argument("--tol", type=float, default=None, help="early-stop tolerance")
    _add_common(p)

    return parser


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the JSON config file (flags win over file)."""
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{args.config}: cannot read config: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{args.config}: config must be a JSON object")
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) in (None, False):
            setattr(args, attr, value)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise FormatError(f"missing required option --{name.replace('_', '-')}")


def _coerce(args, **casts):
    """Re-type values that may have bypassed argparse via the config file."""
    for name, cast in casts.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        try:
            setattr(args, name, cast(value))
        except (TypeError, ValueError) as exc:
            raise FormatError(
                f"--{name.replace('_', '-')}: cannot parse {value!r}: {exc}"
            ) from exc


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _say(args, msg: str) -> None:
    if getattr(args, "verbose", False):
        sys.stderr.write(msg + "\n")


def _check_threads(args) -> None:
    if getattr(args, "threads", None) is not None and args.threads < 1:
        raise PlanError(f"--threads must be >= 1, got {args.threads}")


def _load_data(path):
    if not os.path.exists(path):
        raise FormatError(f"dataset not found: {path}")
    return load_dataset(path)


def _load_net(path):
    if not os.path.exists(path):
        raise FormatError(f"model not found: {path}")
    return load_model(path)


def cmd_inspect(args) -> int:
    _require(args, "model", "data")
    _coerce(args, seed=int, threads=int, memory_cap=int)
    _check_threads(args)
    net = _load_net(args.model)
    if not isinstance(net, TeacherNetwork):
        raise FormatError(f"{args.model}: inspect needs a teacher model")
    data, _ = _load_data(args.data)
    layers = None
    if args.layers:
        try:
            layers = [int(v) for v in str(args.layers).split(",") if v.strip() != ""]
        except ValueError as exc:
            raise FormatError(f"--layers: cannot parse {args.layers!r}: {exc}") from exc
    report = spectrum(
        net,
        data,
        layers,
        seed=args.seed or 0,
        memory_cap=args.memory_cap,
    )
    out = _out_dir(args)
    files = []
    for entry in report.entries:
        path = os.path.join(out, f"spectrum_layer{entry['layer']}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("index\tsigma_normalized\n")
            for i, v in enumerate(entry["values"]):
                fh.write(f"{i}\t{format(v, '.12g')}\n")
        files.append(path)
    combined = os.path.join(out, "spectra.tsv")
    with open(combined, "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    files.append(combined)
    for note in report.notes:
        sys.stderr.write(f"note: {note}\n")
    _emit({"files": files, "notes": report.notes, "layers": [e["layer"] for e in report.entries]})
    return EXIT_OK


def _plan_from_args(args, net) -> CompressionPlan:
    sources = [
        args.plan is not None,
        args.rank_fraction is not None,
        args.energy is not None,
    ]
    if sum(sources) > 1:
        raise PlanError("give exactly one of --plan, --rank-fraction, --energy")
    oversample = 1.5 if args.oversample_factor is None else args.oversample_factor
    if args.plan is not None:
        plan = load_plan(args.plan)
        if args.seed is not None:
            plan.seed = args.seed
        return plan
    if args.rank_fraction is not None:
        strategy, value = "fraction", args.rank_fraction
    elif args.energy is not None:
        strategy, value = "energy", args.energy
    else:
        raise PlanError("no plan source: give --plan, --rank-fraction or --energy")
    return make_uniform_plan(
        net,
        strategy,
        value,
        oversample=oversample,
        layers_from=args.layers_from,
        seed=args.seed or 0,
    )


def cmd_compress(args) -> int:
    _require(args, "model", "data")
    _coerce(
        args,
        seed=int,
        threads=int,
        memory_cap=int,
        lowering_cap=int,
        calibration_limit=int,
        rank_fraction=float,
        energy=float,
        oversample_factor=float,
        layers_from=int,
    )
    _check_threads(args)
    net = _load_net(args.model)
    if not isinstance(net, TeacherNetwork):
        raise FormatError(f"{args.model}: compression needs a teacher model")
    data, _ = _load_data(args.data)
    plan = _plan_from_args(args, net)
    _say(args, f"plan: {[ (e.layer, e.strategy, e.value) for e in plan.entries ]}")
    student, report = build_student(
        net,
        data,
        plan,
        calibration_limit=args.calibration_limit or DEFAULT_CALIBRATION_LIMIT,
        memory_cap=args.memory_cap or DEFAULT_MEMORY_CAP,
        lowering_cap=args.lowering_cap or DEFAULT_LOWERING_CAP,
    )
    out = _out_dir(args)
    student_path = os.path.join(out, "student.ronm")
    save_student(student_path, student)

    t_flops = flops_teacher(net)
    s_flops = flops_student(student)
    ratio = flop_reduction(t_flops, s_flops)

    with open(os.path.join(out, "error_report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    with open(os.path.join(out, "error_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    flop_doc = {
        "teacher": t_flops.to_dict(),
        "student": s_flops.to_dict(),
        "flop_reduction": round(ratio, 2),
    }
    with open(os.path.join(out, "flop_report.json"), "w", encoding="utf-8") as fh:
        json.dump(flop_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "flop_report.tsv"), "w", encoding="utf-8") as fh:
        fh.write("# teacher\n" + t_flops.to_tsv())
        fh.write("# student\n" + s_flops.to_tsv())
        fh.write(f"# flop_reduction\t{ratio:.2f}\n")

    _emit(
        {
            "student": student_path,
            "flops_teacher": t_flops.total,
            "flops_student": s_flops.total,
            "flop_reduction": round(ratio, 2),
            "fit_samples": report.fit_samples,
            "holdout_samples": report.holdout_samples,
            "layers": [s.to_dict() for s in report.layers],
        }
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "model", "data")
    _coerce(args, seed=int, threads=int)
    _check_threads(args)
    model = _load_net(args.model)
    data, labels = _load_data(args.data)
    if labels is None:
        raise FormatError(f"{args.data}: evaluation needs a labeled dataset")
    acc = evaluate(model, data, labels)
    flops = (
        flops_student(model)
        if isinstance(model, StudentNetwork)
        else flops_teacher(model)
    )
    ratio = None
    if args.baseline:
        baseline = _load_net(args.baseline)
        base_flops = (
            flops_student(baseline)
            if isinstance(baseline, StudentNetwork)
            else flops_teacher(baseline)
        )
        ratio = round(flop_reduction(base_flops, flops), 2)
    payload = {
        "top1": acc["top1"],
        "top5": acc["top5"],
        "flops": flops.total,
        "flop_reduction": ratio,
    }
    if args.time:
        payload["time_seconds"] = time_forward(model, data)
    _emit(payload)
    return EXIT_OK


def cmd_maxvol(args) -> int:
    _require(args, "matrix", "rows")
    _coerce(args, rows=int, rank=int, tol=float, threads=int)
    _check_threads(args)
    if not os.path.exists(args.matrix):
        raise FormatError(f"matrix file not found: {args.matrix}")
    matrix, _ = load_dataset(args.matrix)
    rank = matrix.shape[1] if args.rank is None else args.rank
    if rank < 1 or rank > matrix.shape[1]:
        raise ShapeError(
            f"--rank must lie in [1, {matrix.shape[1]}], got {rank}"
        )
    a = np.ascontiguousarray(matrix[:, :rank])
    sel = rect_maxvol(a, args.rows, tol=args.tol or 0.0)
    coeff = maxvol_bound(a.shape[0], rank, sel.p)
    norm = float(np.linalg.norm(a @ sketched_pinv(a, sel), 2))
    _emit(
        {
            "indices": sel.indices.tolist(),
            "dim": a.shape[0],
            "rank": rank,
            "rows": sel.p,
            "bound_coefficient": coeff,
            "spectral_norm": norm,
        }
    )
    return EXIT_OK


_COMMANDS = {
    "inspect": cmd_inspect,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "maxvol": cmd_maxvol,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        return _COMMANDS[args.command](args)
    except FormatError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FORMAT
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FORMAT
    except json.JSONDecodeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FORMAT
    except ShapeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_SHAPE
    except PlanError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_PLAN
    except NumericalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    except RonError as exc:  # pragma: no cover - future subclasses
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
