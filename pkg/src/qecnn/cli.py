"""Command-line entry point: ``qecnn <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, pipeline
from .errors import ConfigurationError, FormatError, QecnnError, ValidationError
from .models import Kind, ModelZoo, build_network, train
from .nn import TrainConfig
from .tqeo import DEFAULT_RATIOS, SCHEDULABLE_QPS, CostModel, assign_p_frame, build_lut, get_model, solve_p_frame

EXIT_OK, EXIT_VALIDATION, EXIT_FORMAT, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4, 5


def _size_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--width", "--w", dest="width", type=int, required=required, help="frame width in pixels")
    p.add_argument("--height", "--h", dest="height", type=int, required=required, help="frame height in pixels")
    p.add_argument("--frames", type=int, default=None, help="frames to read (default: all in the file)")
    p.add_argument("--layout", choices=pipeline.LAYOUTS, default="YUV420",
                   help="raw layout: planar 8-bit Y only or YUV 4:2:0 (default YUV420)")


def _budget_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--budget-ms", type=float, help="per-frame time budget in milliseconds")
    g.add_argument("--budget-ratio", type=float, help="per-frame budget as a fraction of T_max = N * t2 (0..1)")
    p.add_argument("--t1", type=float, default=CostModel.t1, help="intra-net cost per CTU in ms (default %(default)s)")
    p.add_argument("--t2", type=float, default=CostModel.t2, help="inter-net cost per CTU in ms (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qecnn", description="CNN quality enhancement of decoded video under a time budget.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="enhance a raw sequence, fully or under a time budget")
    p.add_argument("--input", required=True, help="decoded raw video (planar 8-bit)")
    p.add_argument("--out", help="enhanced raw video, same layout as the input")
    p.add_argument("--ref", help="uncompressed raw reference for PSNR columns")
    p.add_argument("--sidecar", help="JSON with frame types, QPs and I-frame CTU bit counts")
    p.add_argument("--models-dir", help="directory of .qecn weight files")
    p.add_argument("--qp", type=int, help="QP when no sidecar is given")
    _size_flags(p)
    _budget_flags(p)
    p.add_argument("--mode", choices=("sim", "measured"), default="sim",
                   help="charge model cost (sim) or wall-clock time (measured)")
    p.add_argument("--workers", type=int, default=1, help="CTU worker threads (default 1)")
    p.add_argument("--report", help="report path (.json or .csv)")
    p.add_argument("--seed", type=int, default=0, help="seed for randomly initialised models (no --models-dir)")

    p = sub.add_parser("schedule", help="print (N1, N2) and optionally per-CTU assignments")
    p.add_argument("--qp", type=int, required=True, help=f"QP, one of {SCHEDULABLE_QPS}")
    p.add_argument("--ctus", type=int, help="CTUs per frame N (default 480)")
    _budget_flags(p)
    p.add_argument("--mads", help="file of per-CTU MAD values, one per line, to print assignments")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")

    p = sub.add_parser("lut", help="emit a (N1, N2) look-up table as JSON")
    p.add_argument("--qp", type=int, required=True, help=f"QP, one of {SCHEDULABLE_QPS}")
    p.add_argument("--ctus", type=int, default=480, help="CTUs per frame N (default 480)")
    p.add_argument("--ratios", help="comma-separated budget ratios (default 0.1..0.9)")
    p.add_argument("--t1", type=float, default=CostModel.t1, help="intra-net cost per CTU in ms")
    p.add_argument("--t2", type=float, default=CostModel.t2, help="inter-net cost per CTU in ms")
    p.add_argument("--out", help="output JSON path (default stdout)")

    p = sub.add_parser("metrics", help="PSNR, delta PSNR, BD-rate, RSD and time-control MAE")
    p.add_argument("--psnr", nargs=2, metavar=("REF", "TEST"), help="mean Y-PSNR (dB) of TEST against REF")
    p.add_argument("--delta-psnr", nargs=3, metavar=("REF", "BEFORE", "AFTER"), help="PSNR gain in dB")
    p.add_argument("--bd-rate", nargs=2, metavar=("ANCHOR", "TEST"),
                   help="CSV files of bitrate_kbps,psnr_db rows; prints BD-rate in percent")
    p.add_argument("--rsd", help="comma-separated values; prints relative standard deviation in percent")
    p.add_argument("--mae", help="report JSON/CSV; recomputes time-control MAE in percent of T_max")
    _size_flags(p, required=False)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--seed", type=int, default=0, help="seed for the toy networks")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error (default 1e-5)")

    p = sub.add_parser("train-toy", help="overfit the intra net on a few synthetic patch pairs")
    p.add_argument("--seed", type=int, default=0, help="seed for data and initial weights")
    p.add_argument("--steps", type=int, default=2000, help="SGD steps (default 2000)")
    p.add_argument("--pairs", type=int, default=8, help="number of 40x40 patch pairs (default 8)")
    p.add_argument("--batch-size", type=int, default=1, help="patches per step (default 1)")
    p.add_argument("--qp", type=int, default=42, help="QP tag of the trained graph")
    p.add_argument("--out", help="directory to save the trained weights in")
    return ap


# --------------------------------------------------------------------------


def _cost(args) -> CostModel:
    return CostModel(args.t1, args.t2)


def _frame_count(path, width, height, layout, frames) -> int:
    if frames is not None:
        return frames
    size = Path(path).stat().st_size
    per = pipeline.frame_bytes(width, height, layout)
    if size % per:
        raise FormatError(f"{path}: {size} bytes is not a whole number of {width}x{height} {layout} frames")
    return size // per


def _read(path, args, frames=None) -> list[np.ndarray]:
    if args.width is None or args.height is None:
        raise ValidationError("--width and --height are required to read raw video")
    n = _frame_count(path, args.width, args.height, args.layout, frames if frames is not None else args.frames)
    return pipeline.read_y_sequence(path, args.width, args.height, n, args.layout)


def _load_models(args, qps) -> ModelZoo:
    if args.models_dir:
        zoo = ModelZoo.load_dir(args.models_dir)
        if len(zoo) == 0:
            raise ConfigurationError(f"--models-dir: no .qecn files in {args.models_dir}")
        return zoo
    # untrained but deterministic graphs keep the plumbing testable
    zoo = ModelZoo()
    for qp in sorted(set(qps)):
        zoo.register(build_network(Kind.QECNN_I, qp, seed=args.seed))
        zoo.register(build_network(Kind.QECNN_P, qp, seed=args.seed + 1))
    return zoo


def cmd_enhance(args) -> int:
    planes = _read(args.input, args)
    if args.sidecar:
        side = pipeline.read_ctu_bits_sidecar(args.sidecar)
        if (side.width, side.height) != (args.width, args.height):
            raise ValidationError(f"--sidecar is {side.width}x{side.height}, --width/--height give "
                                  f"{args.width}x{args.height}")
        metas = side.frames
    elif args.qp is not None:
        metas = pipeline.default_metas(len(planes), args.qp)
    else:
        raise ValidationError("--qp is required without --sidecar")
    ref = _read(args.ref, args, len(planes)) if args.ref else None
    zoo = _load_models(args, [m.qp for m in metas])
    if args.budget_ms is None and args.budget_ratio is None:
        out = []
        for plane, meta in zip(planes, metas):
            level = 1 if meta.frame_type == "I" else 2
            n = pipeline.ctu_count(*plane.shape)
            out.append(pipeline.enhance_frame(plane, meta, [level] * n, zoo, args.workers))
        report = None
        if ref is not None:
            for i, (r, a, b) in enumerate(zip(ref, planes, out)):
                print(f"frame {i}: psnr {metrics.psnr(r, a):.4f} -> {metrics.psnr(r, b):.4f} dB")
    else:
        if args.budget_ratio is not None:
            budget = pipeline.Budget(ratio=args.budget_ratio)
        else:
            budget = pipeline.Budget(per_frame_ms=args.budget_ms)
        mode = "simulated" if args.mode == "sim" else "measured"
        out, report = pipeline.run_budgeted(planes, metas, budget, mode, zoo, _cost(args), args.workers, ref,
                                            sequence_name=Path(args.input).stem)
        print(f"frames {len(out)}  mae {report.mae_percent:.4f}%"
              + (f"  delta_psnr {report.delta_psnr:.4f} dB" if report.delta_psnr is not None else ""))
    if args.out:
        chroma = pipeline.read_chroma(args.input, args.width, args.height, len(planes)) \
            if args.layout == "YUV420" else None
        pipeline.write_sequence(args.out, out, args.layout, chroma)
    if args.report:
        if report is None:
            raise ValidationError("--report needs a budgeted run (--budget-ms or --budget-ratio)")
        pipeline.emit_report(report, args.report)
    return EXIT_OK


def cmd_schedule(args) -> int:
    model = get_model(args.qp)
    cost = _cost(args)
    mads = None
    if args.mads:
        mads = np.loadtxt(args.mads, ndmin=1)
    n = args.ctus if args.ctus is not None else (len(mads) if mads is not None else 480)
    if mads is not None and len(mads) != n:
        raise ValidationError(f"--mads has {len(mads)} values, --ctus is {n}")
    if n < 1:
        raise ValidationError(f"--ctus must be positive, got {n}")
    if args.budget_ratio is not None:
        ratio = args.budget_ratio
    elif args.budget_ms is not None:
        ratio = args.budget_ms / cost.t_max(n)
    else:
        raise ValidationError("give --budget-ratio or --budget-ms")
    if not 0 <= ratio <= 1:
        raise ValidationError(f"--budget-ratio must be within [0, 1], got {ratio}")
    n1, n2 = solve_p_frame(ratio, n, model, cost)
    print(f"n1={n1} n2={n2}")
    if mads is not None:
        print(" ".join(str(int(k)) for k in assign_p_frame(mads, n1, n2)))
    return EXIT_OK


def cmd_lut(args) -> int:
    ratios = DEFAULT_RATIOS
    if args.ratios:
        try:
            ratios = [float(r) for r in args.ratios.split(",")]
        except ValueError:
            raise ValidationError(f"--ratios: not a comma-separated list of numbers: {args.ratios!r}") from None
    lut = build_lut(args.qp, args.ctus, ratios, _cost(args))
    text = lut.to_json(indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def _rd_csv(path) -> list[metrics.RdPoint]:
    pts = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                pts.append(metrics.RdPoint(float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if pts:
                    raise FormatError(f"{path}: bad row {row!r}") from None
                # header line
    return pts


def _report_rows(path) -> list[dict]:
    if str(path).endswith(".csv"):
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    try:
        return json.loads(Path(path).read_text())["frames"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: not a budget report ({exc})") from None


def cmd_metrics(args) -> int:
    did = False
    if args.psnr:
        ref, test = (_read(p, args) for p in args.psnr)
        print(f"psnr {metrics.sequence_psnr(ref, test):.4f} dB")
        did = True
    if args.delta_psnr:
        ref, before, after = (_read(p, args) for p in args.delta_psnr)
        gain = metrics.sequence_psnr(ref, after) - metrics.sequence_psnr(ref, before)
        print(f"delta_psnr {gain:.4f} dB")
        did = True
    if args.bd_rate:
        print(f"bd_rate {metrics.bd_rate(_rd_csv(args.bd_rate[0]), _rd_csv(args.bd_rate[1])):.4f}%")
        did = True
    if args.rsd:
        try:
            values = [float(v) for v in args.rsd.split(",")]
        except ValueError:
            raise ValidationError(f"--rsd: not a comma-separated list of numbers: {args.rsd!r}") from None
        print(f"rsd {metrics.rsd(values):.4f}%")
        did = True
    if args.mae:
        rows = _report_rows(args.mae)
        value = metrics.time_control_mae([float(r["actual_ms"]) for r in rows],
                                         [float(r["target_ms"]) for r in rows],
                                         [float(r["t_max_ms"]) for r in rows])
        print(f"mae {value:.4f}%")
        did = True
    if not did:
        raise ValidationError("give at least one of --psnr, --delta-psnr, --bd-rate, --rsd, --mae")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(args.seed)
    for r in reports:
        print(f"{r.name:12s} params {r.checked:4d}  max rel err {r.worst:.3e}  {'ok' if r.ok(args.tol) else 'FAIL'}")
    return EXIT_OK if all(r.ok(args.tol) for r in reports) else 1


def cmd_train_toy(args) -> int:
    from .synth import toy_patch_pairs

    pairs = toy_patch_pairs(args.pairs, seed=args.seed)
    net = build_network(Kind.QECNN_I, args.qp, seed=args.seed)
    cfg = TrainConfig(batch_size=args.batch_size)

    def progress(epoch, log):
        if epoch % 20 == 0:
            print(f"epoch {epoch:4d}  step {log.steps:5d}  loss {log.epoch_losses[-1]:.6g}", flush=True)

    trained, log = train(net, pairs, cfg, args.steps, seed=args.seed, callback=progress)
    print(f"steps {log.steps}  loss {log.initial_loss:.6g} -> {log.final_loss:.6g}  reduction {log.reduction:.1f}x")
    if args.out:
        ModelZoo([trained]).save_dir(args.out)
    return EXIT_OK


COMMANDS = {
    "enhance": cmd_enhance,
    "schedule": cmd_schedule,
    "lut": cmd_lut,
    "metrics": cmd_metrics,
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (QecnnError, OSError) as exc:
        code = _exit_code(exc)
        text = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"qecnn {args.command}: error: {text}", file=sys.stderr)
        return code


def _exit_code(exc: BaseException) -> int:
    for kind, code in ((ValidationError, EXIT_VALIDATION), (FormatError, EXIT_FORMAT),
                       (ConfigurationError, EXIT_CONFIG), (OSError, EXIT_IO)):
        if isinstance(exc, kind):
            return code
    return getattr(exc, "exit_code", 1)

if __name__ == "__main__":
    sys.exit(main())
