"""Command-line interface.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 bad arguments, 3 unreadable or inconsistent input,
4 numerical failure, 5 field inversion did not converge.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (STRUCTURES, ContainerError, DegenerateInputError, LabelMaskSet, NonFiniteError,
                   RegistrationConfig, read_container, write_container)

log = logging.getLogger("cinegroup")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_INVERSION = 5


class InputError(Exception):
    """Input file missing, unreadable or inconsistent with the other inputs."""


class NumericalError(Exception):
    pass


class InversionNotConverged(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command, out, args):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.arguments = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
        self.inputs = {}
        self.outputs = []
        self.config = None
        self.extra = {}
        self.started = _dt.datetime.now(_dt.timezone.utc)
        self.t0 = time.perf_counter()

    def input(self, path):
        p = Path(path)
        if not p.is_file():
            raise InputError(f"input file not found: {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def output(self, name):
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self, status="ok"):
        doc = {
            "command": self.command,
            "arguments": self.arguments,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "status": status,
            "version": __version__,
            "timestamp": {
                "started": self.started.isoformat(),
                "wall_clock_s": time.perf_counter() - self.t0,
            },
        }
        doc.update(self.extra)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _read(run, path, dtype=None):
    return read_container(run.input(path), dtype)


def _read_masks(run, path):
    labels = _read(run, path, "u8")
    try:
        return LabelMaskSet(labels)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_fields(run, path, shape=None):
    f = _read(run, path, "f32").astype(np.float64)
    if f.ndim != 4 or f.shape[-1] != 2:
        raise InputError(f"{path}: expected a T x H x W x 2 field container, got shape {f.shape}")
    if shape is not None and f.shape[:3] != tuple(shape):
        raise InputError(f"{path}: fields {f.shape[:3]} do not match {tuple(shape)}")
    return f


def _read_anatomy(run, path, shape=None):
    from .anatomy import read_anatomy_json
    try:
        return read_anatomy_json(run.input(path), shape)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return f"{float(v):.10g}"


def _threads(args):
    n = args.threads
    if n is None:
        env = os.environ.get("CINEGROUP_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise argparse.ArgumentTypeError(f"CINEGROUP_THREADS must be an integer, got {env!r}") from None
    if n is not None:
        if n < 1:
            raise argparse.ArgumentTypeError("--threads must be >= 1")
        import torch
        torch.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args, run):
    from .anatomy import extract_contour
    from .phantom import PhantomSpec, generate

    h = args.height or args.size
    w = args.width or args.size
    try:
        spec = PhantomSpec(height=h, width=w, frames=args.frames, amplitude=args.amplitude, noise=args.noise,
                           gain=args.gain, offset=args.offset, seed=args.seed)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    ph = generate(spec)
    run.config = {"phantom": ph.metadata()["spec"]}
    write_container(ph.sequence.frames.astype(np.float32), run.output("sequence.cgt"))
    write_container(ph.masks.labels, run.output("masks.cgt"))
    write_container(ph.fields.fields.astype(np.float32), run.output("fields_gt.cgt"))
    contours = {}
    for n in range(spec.frames):
        contours[n] = {}
        for name in STRUCTURES:
            try:
                contours[n][name] = extract_contour(ph.masks.labels[n], name, n)
            except ValueError:
                pass
    from .anatomy import write_anatomy_json
    write_anatomy_json(run.output("anatomy.json"), ph.landmarks, contours)
    ph.write_metadata(run.output("phantom.json"))
    return EXIT_OK


def _config_from(args):
    base = {}
    if args.config:
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise InputError(f"{args.config}: expected a JSON object")
    flags = {
        "lambda0": args.lambda0, "lambda1": args.lambda1, "w0": args.w0, "w1": args.w1, "w2": args.w2,
        "lncc_window": args.window, "pyramid_levels": args.levels, "iterations_per_level": args.iterations,
        "learning_rate": args.lr, "template_mode": args.template, "inversion_tol": args.inversion_tol,
        "inversion_max_iters": args.inversion_max_iters,
    }
    if args.guide_full_resolution:
        flags["guide_full_resolution"] = True
    merged = {**base, **{k: v for k, v in flags.items() if v is not None}}
    try:
        return RegistrationConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise argparse.ArgumentTypeError(f"invalid configuration: {exc}") from None


def cmd_register(args, run):
    from .gwreg import RegistrationDiverged, register_groupwise

    config = _config_from(args)
    run.config = config.to_dict()
    frames = _read(run, args.sequence, "f32").astype(np.float64)
    masks = _read_masks(run, args.masks) if args.masks else None
    if masks is not None and masks.labels.shape != frames.shape:
        raise InputError(f"masks {masks.labels.shape} do not match sequence {frames.shape}")
    gt = _read_fields(run, args.ground_truth, frames.shape) if args.ground_truth else None
    try:
        fields, trace = register_groupwise(frames, config, masks)
    except RegistrationDiverged as exc:
        exc.trace.write_csv(run.output("trace.csv"))
        raise NumericalError(str(exc)) from None
    except (NonFiniteError, DegenerateInputError) as exc:
        raise NumericalError(str(exc)) from None
    except ValueError as exc:
        raise InputError(str(exc)) from None

    write_container(fields.astype(np.float32), run.output("fields.cgt"))
    trace.write_csv(run.output("trace.csv"))
    final = trace.levels[-1][-1] if trace.levels and trace.levels[-1] else None
    rows = [["final_total_loss", _fmt(final.total) if final else ""],
            ["max_inversion_residual_px", _fmt(np.max(trace.inversion_residuals))]]
    if gt is not None:
        epe = np.linalg.norm(fields.astype(np.float32).astype(np.float64) - gt, axis=-1)
        rows.append(["mean_epe_px", _fmt(epe.mean())])
        rows.append(["max_epe_px", _fmt(epe.max())])
    from .evaluation import jacobian_stats
    std, fold = jacobian_stats(fields)
    rows += [["jacobian_std", _fmt(std)], ["folding_fraction", _fmt(fold)]]
    _write_rows(run.output("summary.csv"), ["quantity", "value"], rows)
    run.extra["timings_s"] = {"levels": list(trace.wall_clock)}
    if not trace.inversion_converged:
        raise InversionNotConverged("inverse of the estimated fields did not converge")
    return EXIT_OK


def cmd_invert(args, run):
    from .warp import invert_field

    fields = _read_fields(run, args.fields)
    res = invert_field(fields, args.tol, args.max_iters)
    run.config = {"tol": args.tol, "max_iters": args.max_iters}
    write_container(res.field.astype(np.float32), run.output("inverse.cgt"))
    _write_rows(run.output("inversion.csv"), ["frame", "residual_px"],
                [[n, _fmt(r)] for n, r in enumerate(res.residuals)])
    run.extra["inversion"] = {"iterations": res.iterations, "residual_px": res.residual, "converged": res.converged}
    if not res.converged:
        raise InversionNotConverged(f"inversion did not converge (residual {res.residual:.3g} px)")
    return EXIT_OK


def _source_frame(labels, requested):
    from .anatomy import find_ed_es
    if requested is not None:
        if not 0 <= requested < labels.shape[0]:
            raise argparse.ArgumentTypeError(f"--source {requested} out of range for {labels.shape[0]} frames")
        return requested
    try:
        return find_ed_es(labels)[0]
    except ValueError:
        return 0


def cmd_propagate(args, run):
    from .anatomy import build_dictionary, propagate_masks

    masks = _read_masks(run, args.masks)
    fields = _read_fields(run, args.fields, masks.labels.shape)
    run.config = {"tol": args.tol, "max_iters": args.max_iters}
    if args.dictionary:
        d = build_dictionary(masks, fields, tol=args.tol, max_iters=args.max_iters)
        write_container(d, run.output("dictionary.cgt"))
    else:
        src = _source_frame(masks.labels, args.source)
        run.extra["source_frame"] = src
        out = propagate_masks(masks.labels[src], src, fields, tol=args.tol, max_iters=args.max_iters)
        write_container(out.labels, run.output("propagated.cgt"))
    return EXIT_OK


def cmd_vote(args, run):
    from .anatomy import build_dictionary, majority_vote

    if args.dictionary:
        d = _read(run, args.dictionary, "u8")
        if d.ndim != 4 or d.shape[0] != d.shape[1]:
            raise InputError(f"{args.dictionary}: expected a T x T x H x W dictionary, got {d.shape}")
    elif args.masks and args.fields:
        masks = _read_masks(run, args.masks)
        fields = _read_fields(run, args.fields, masks.labels.shape)
        d = build_dictionary(masks, fields, tol=args.tol, max_iters=args.max_iters)
    else:
        raise argparse.ArgumentTypeError("vote needs --dictionary, or --masks together with --fields")
    write_container(majority_vote(d), run.output("voted.cgt"))
    return EXIT_OK


def _landmarks_for(run, path, shape, what):
    landmarks, _ = _read_anatomy(run, path, shape[1:])
    if landmarks is None or len(landmarks.points) != shape[0]:
        raise InputError(f"{path}: {what} needs landmarks for all {shape[0]} frames")
    return landmarks


def cmd_strain(args, run):
    from .anatomy import gls_curve

    masks = _read_masks(run, args.masks)
    landmarks = _landmarks_for(run, args.anatomy, masks.labels.shape, "strain")
    fields = _read_fields(run, args.fields, masks.labels.shape) if args.fields else None
    run.config = {"chambers": args.chamber, "segments": args.segments, "spacing": args.spacing}
    rows, seg_rows = [], []
    for chamber in args.chamber:
        try:
            curve = gls_curve(masks, landmarks, chamber, tuple(args.spacing), fields, args.segments,
                              ed_index=args.ed)
        except ValueError as exc:
            raise InputError(f"strain for {chamber}: {exc}") from None
        rows += [[n, chamber, _fmt(e)] for n, e in enumerate(curve.strain)]
        if curve.segment_strain is not None:
            for n in range(len(curve.strain)):
                seg_rows += [[n, chamber, i, _fmt(e)] for i, e in enumerate(curve.segment_strain[n])]
                seg_rows += [[n, chamber, "sum", _fmt(curve.gls_sum[n])], [n, chamber, "mean", _fmt(curve.gls_mean[n])]]
    _write_rows(run.output("strain.csv"), ["frame", "chamber", "epsilon"], rows)
    if seg_rows:
        _write_rows(run.output("strain_segments.csv"), ["frame", "chamber", "segment", "epsilon"], seg_rows)
    return EXIT_OK


def cmd_volume(args, run):
    from .anatomy import HINGES, chamber_area, find_ed_es, long_axis_length, lvef, volume_area_length

    rows = []
    if args.edv is not None or args.esv is not None:
        if args.edv is None or args.esv is None or args.masks:
            raise argparse.ArgumentTypeError("give both --edv and --esv, or --masks")
        edv, esv = args.edv, args.esv
    elif args.masks:
        labels = _read_masks(run, args.masks).labels
        hinges = None
        if args.anatomy:
            lm = _landmarks_for(run, args.anatomy, labels.shape, "volume")
            ia, ib = HINGES["LV"]
            hinges = lm.points[:, [ia, ib]]
        try:
            ed, es = find_ed_es(labels)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if args.ed is not None:
            ed = args.ed
        if args.es is not None:
            es = args.es
        sp = tuple(args.spacing)
        vols = {}
        for tag, n in (("ed", ed), ("es", es)):
            area = chamber_area(labels[n], "LV", sp)
            length = long_axis_length(labels[n], "LV", sp, None if hinges is None else hinges[n])
            vols[tag] = volume_area_length(area, length)
            rows += [[f"{tag}_frame", n], [f"{tag}_area_mm2", _fmt(area)], [f"{tag}_long_axis_mm", _fmt(length)]]
        edv, esv = vols["ed"], vols["es"]
    else:
        raise argparse.ArgumentTypeError("volume needs --masks or both --edv and --esv")
    run.config = {"spacing": args.spacing}
    rows += [["edv_ml", _fmt(edv)], ["esv_ml", _fmt(esv)], ["lvef_percent", _fmt(lvef(edv, esv))]]
    _write_rows(run.output("volume.csv"), ["quantity", "value"], rows)
    return EXIT_OK


def cmd_metrics(args, run):
    from .evaluation import evaluate

    pred = _read_masks(run, args.pred).labels
    gt = _read_masks(run, args.gt).labels
    if pred.shape != gt.shape:
        raise InputError(f"mask stacks differ: {pred.shape} vs {gt.shape}")
    fields = _read_fields(run, args.fields, gt.shape) if args.fields else None
    landmarks = _landmarks_for(run, args.anatomy, gt.shape, "landmark error") if args.anatomy else None
    if landmarks is not None and fields is None:
        raise argparse.ArgumentTypeError("landmark error needs --fields")
    run.config = {"spacing": args.spacing, "reference_frame": args.reference_frame, "es": args.es}
    report = evaluate(pred, gt, tuple(args.spacing), fields, landmarks, args.reference_frame, args.es)
    report.write_csv(run.output("metrics.csv"))
    report.write_json(run.output("metrics.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _nonneg(v):
    x = float(v)
    if not x >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {v}")
    return x


def _positive_int(v):
    x = int(v)
    if x < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return x


def build_parser():
    p = _Parser(prog="cinegroup", description="Groupwise registration and cardiac function analysis of cine stacks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (env CINEGROUP_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")
    spacing = argparse.ArgumentParser(add_help=False)
    spacing.add_argument("--spacing", type=float, nargs=2, default=[1.0, 1.0], metavar=("SX", "SY"),
                         help="pixel spacing in mm (default 1 1)")
    inv = argparse.ArgumentParser(add_help=False)
    inv.add_argument("--tol", type=float, default=0.01, help="inversion tolerance in px")
    inv.add_argument("--max-iters", type=_positive_int, default=100)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", parents=[common], help="render a synthetic phantom")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--frames", type=int, default=25)
    s.add_argument("--amplitude", type=_nonneg, default=8.0, help="peak displacement in px")
    s.add_argument("--noise", type=_nonneg, default=0.01)
    s.add_argument("--gain", type=float, default=1.0)
    s.add_argument("--offset", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("register", parents=[common], help="groupwise registration of a sequence")
    s.add_argument("--sequence", required=True)
    s.add_argument("--masks")
    s.add_argument("--ground-truth", help="reference fields for an endpoint-error summary")
    s.add_argument("--config", help="JSON configuration; flags override it")
    s.add_argument("--lambda0", type=float)
    s.add_argument("--lambda1", type=float)
    s.add_argument("--w0", type=float)
    s.add_argument("--w1", type=float)
    s.add_argument("--w2", type=float)
    s.add_argument("--window", type=int)
    s.add_argument("--levels", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--template", choices=["average", "pca"])
    s.add_argument("--inversion-tol", type=float)
    s.add_argument("--inversion-max-iters", type=int)
    s.add_argument("--guide-full-resolution", action="store_true")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("invert", parents=[common, inv], help="invert displacement fields")
    s.add_argument("--fields", required=True)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("propagate", parents=[common, inv], help="carry masks across frames")
    s.add_argument("--fields", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--source", type=int, help="source frame (default: end-diastole)")
    s.add_argument("--dictionary", action="store_true", help="propagate every frame to every frame")
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("vote", parents=[common, inv], help="majority vote over a mask dictionary")
    s.add_argument("--dictionary")
    s.add_argument("--masks")
    s.add_argument("--fields")
    s.set_defaults(func=cmd_vote)

    s = sub.add_parser("strain", parents=[common, spacing], help="longitudinal strain curves")
    s.add_argument("--masks", required=True)
    s.add_argument("--anatomy", required=True, help="JSON with per-frame landmarks")
    s.add_argument("--chamber", action="append", choices=sorted(STRUCTURES), default=None)
    s.add_argument("--fields", help="needed for --segments > 1")
    s.add_argument("--segments", type=_positive_int, default=1)
    s.add_argument("--ed", type=int)
    s.set_defaults(func=cmd_strain)

    s = sub.add_parser("volume", parents=[common, spacing], help="LV volumes and ejection fraction")
    s.add_argument("--masks")
    s.add_argument("--anatomy")
    s.add_argument("--edv", type=float)
    s.add_argument("--esv", type=float)
    s.add_argument("--ed", type=int)
    s.add_argument("--es", type=int)
    s.set_defaults(func=cmd_volume)

    s = sub.add_parser("metrics", parents=[common, spacing], help="overlap, contour and field metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--fields")
    s.add_argument("--anatomy", help="JSON with reference landmarks")
    s.add_argument("--reference-frame", type=int, default=0)
    s.add_argument("--es", type=int)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "strain" and not args.chamber:
        args.chamber = ["LV"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads(args)
        run = Run(args.command, args.out, args)
    except argparse.ArgumentTypeError as exc:
        parser.exit(EXIT_USAGE, f"cinegroup {args.command}: error: {exc}\n")
    except OSError as exc:
        print(f"cinegroup {args.command}: cannot use output directory: {exc}", file=sys.stderr)
        return EXIT_INPUT

    try:
        code = args.func(args, run)
        status = "ok"
    except argparse.ArgumentTypeError as exc:
        print(f"cinegroup {args.command}: error: {exc}", file=sys.stderr)
        code, status = EXIT_USAGE, "argument error"
    except (InputError, ContainerError, OSError) as exc:
        print(f"cinegroup {args.command}: input error: {exc}", file=sys.stderr)
        code, status = EXIT_INPUT, "input error"
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"cinegroup {args.command}: numerical failure: {exc}", file=sys.stderr)
        code, status = EXIT_NUMERIC, "numerical failure"
    except InversionNotConverged as exc:
        print(f"cinegroup {args.command}: {exc}", file=sys.stderr)
        code, status = EXIT_INVERSION, "inversion not converged"
    except ValueError as exc:
        print(f"cinegroup {args.command}: input error: {exc}", file=sys.stderr)
        code, status = EXIT_INPUT, "input error"
    run.write_manifest(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
