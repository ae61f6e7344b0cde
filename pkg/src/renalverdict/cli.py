"""Command-line entry point: ``renalverdict {fit,simulate,optimize,stats,compare}``.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.

A flat ``key=value`` file given with ``--config`` supplies defaults for the
chosen command; keys are flag names without the leading dashes (``-`` or
``_`` both accepted). Flags on the command line win.

All randomness derives from ``--seed``. Each subsystem gets its own stream,
``SeedSequence(seed, spawn_key=(crc32(name),))``, so one subsystem's seed
does not move when unrelated options change.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import (SchemeError, calibrate_seconds_per_volume, estimate_duration,
                          kidney_protocol, read_scheme, scheme_to_csv)
from .feature_select import (SelectionConfig, SelectionError, extract_protocol, train_selector)
from .fitting import (FitError, FitResult, SsFitConfig, compare_vascular_variants, fit_adc,
                      fit_ivim, fit_verdict_lsq, goodness_of_fit)
from .models import FixedDiffusivities
from .nn import save_checkpoint
from .phantom import PhantomSpec, generate_phantom, planted_subjects
from .stats import (DegenerateTestError, RoiMask, export_group_data, paired_values,
                    read_group_data, wilcoxon_signed_rank)
from .volume_io import (VolumeContainer, VolumeError, mask_indices, read_volume, table_to_maps,
                        volume_to_table, write_volume)

log = logging.getLogger("renalverdict")

LOCK_NAME = ".renalverdict.lock"
VALIDATION_ERRORS = (ValueError, FileNotFoundError, SchemeError, VolumeError, FitError,
                     SelectionError, DegenerateTestError)


class UsageError(ValueError):
    pass


def subsystem_seed(root: int, name: str) -> int:
    """Seed for one subsystem, derived from the root seed and its name."""
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# small file helpers

def _write_text(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)


def _write_json(path: Path, doc):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(x):
    """JSON-safe copy: NaN and inf become null, numpy scalars become floats."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


@contextmanager
def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out} is in use (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _scheme_for(volume_path, explicit):
    if explicit:
        return read_scheme(explicit)
    vol_dir = Path(volume_path).parent
    side = Path(volume_path).with_suffix(".json")
    ref = json.loads(side.read_text(encoding="utf-8")).get("scheme") if side.exists() else None
    if ref is None:
        raise UsageError("no --scheme given and the volume sidecar names none")
    return read_scheme(vol_dir / ref)


def _load_mask(path, volume):
    if path is None:
        return np.ones(volume.shape[:3], dtype=np.uint8)
    m = read_volume(path)
    if m.kind != "mask":
        raise VolumeError(f"{path}: expected a mask volume, got kind {m.kind!r}")
    return m


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args):
    if args.n_voxels < 1:
        raise UsageError("--n-voxels must be >= 1")
    out = Path(args.out)
    seed = subsystem_seed(args.seed, "phantom")
    scheme = read_scheme(args.scheme) if args.scheme else kidney_protocol()
    with _locked(out):
        _write_text(out / "scheme.csv", scheme_to_csv(scheme))
        if args.planted_subjects:
            tables, planted = planted_subjects(args.planted_subjects, args.n_voxels, scheme=scheme,
                                               seed=seed)
            dw, b0 = scheme.dw_indices, scheme.b0_indices
            for s, t in enumerate(tables):
                raw = np.ones((t.shape[0], len(scheme)))
                raw[:, dw] = t
                raw[:, b0] = 1.0
                vol = VolumeContainer(raw.reshape(t.shape[0], 1, 1, -1), "signal", scheme="scheme.csv")
                write_volume(vol, out / f"subject_{s:02d}")
            _write_json(out / "planted.json", {"planted_dw_indices": [int(i) for i in planted],
                                               "b_values": sorted({scheme.points[scheme.dw_indices[i]].b
                                                                   for i in planted}),
                                               "seed": args.seed})
            return 0
        fixed = FixedDiffusivities(d_vasc=args.d_vasc, vascular=args.vascular)
        spec = PhantomSpec(args.n_voxels, (args.radius_min, args.radius_max), scheme, args.snr, seed,
                           fixed)
        _, truth, raw = generate_phantom(spec, return_raw=True)
        vol = VolumeContainer(raw.reshape(args.n_voxels, 1, 1, -1), "signal", scheme="scheme.csv")
        write_volume(vol, out / "signal")
        write_volume(VolumeContainer(np.ones((args.n_voxels, 1, 1), np.uint8), "mask"), out / "mask")
        _write_text(out / "ground_truth.csv", truth.to_csv())
    return 0


def _ss_config(args, seed):
    return SsFitConfig(learning_rate=args.lr, dropout_p=args.dropout, max_epochs=args.epochs,
                       patience=args.patience, batch_size=args.batch_size, seed=seed,
                       fixed=FixedDiffusivities(d_vasc=args.d_vasc, vascular=args.vascular),
                       lr_schedule=args.lr_schedule)


def _roi_masks(specs, dims):
    """Parse ``label=path`` ROI arguments into RoiMask objects."""
    rois = []
    for spec in specs or []:
        if "=" not in spec:
            raise UsageError(f"ROI must be label=path, got {spec!r}")
        label, path = spec.split("=", 1)
        m = read_volume(path)
        if m.shape[:3] != tuple(dims):
            raise VolumeError(f"ROI {label}: mask shape {m.shape[:3]} does not match {tuple(dims)}")
        rois.append(RoiMask(label, mask_indices(m)))
    return rois


def cmd_fit(args):
    volume = read_volume(args.volume)
    scheme = _scheme_for(args.volume, args.scheme)
    table = volume_to_table(volume, _load_mask(args.mask, volume), scheme)
    rois = _roi_masks(args.roi, table.dims)
    seed = subsystem_seed(args.seed, "fit")
    out = Path(args.out)
    with _locked(out):
        t0 = time.perf_counter()
        net = None
        if args.model == "adc":
            result = fit_adc(table, scheme)
        elif args.model == "ivim":
            result = fit_ivim(table, scheme)
        elif args.method == "lsq":
            result = fit_verdict_lsq(table, scheme, FixedDiffusivities(d_vasc=args.d_vasc,
                                                                       vascular=args.vascular))
        else:
            from .fitting import SelfSupervisedVerdict, _with_indices
            cfg = _ss_config(args, seed)
            est = SelfSupervisedVerdict(scheme, learning_rate=cfg.learning_rate,
                                        dropout_p=cfg.dropout_p, max_epochs=cfg.max_epochs,
                                        patience=cfg.patience, batch_size=cfg.batch_size,
                                        seed=cfg.seed, fixed=cfg.fixed, lr_schedule=cfg.lr_schedule)
            est.fit(table.signals)
            result = _with_indices(est.fit_result(table.signals), table)
            net = est.net_
        runtime = time.perf_counter() - t0
        log.info("fit took %.1f s", runtime)
        for name, vol in table_to_maps(result, table.dims, volume.voxel_size_mm).items():
            write_volume(vol, out / name)
        roi_rows = {}
        for roi in rois:
            rows = np.flatnonzero(np.isin(result.voxel_indices, roi.indices))
            if rows.size:
                roi_rows[roi.label] = rows
        mse, roi_mse = goodness_of_fit(result, table, scheme, roi_rows)
        info = {k: v for k, v in result.info.items()}
        report = {"model": result.model, "n_voxels": result.n_voxels, "seed": args.seed,
                  "mean_mse": float(np.nanmean(mse)), "roi_mse": roi_mse,
                  "loss_curve": info.pop("loss_curve", []),
                  "railed_fraction": info.pop("railed_fraction", None), "info": info,
                  "parameters": list(result.params)}
        if args.report_runtime:
            report["runtime_s"] = round(runtime, 3)
        _write_json(out / "fit_report.json", _clean(report))
        if net is not None:
            save_checkpoint(net, out / "network.vknn")
    return 0


def _subject_tables(paths, masks, scheme_arg):
    if masks and len(masks) != len(paths):
        raise UsageError("give one --mask per subject volume, or none")
    tables, scheme = [], None
    for i, p in enumerate(paths):
        vol = read_volume(p)
        sch = _scheme_for(p, scheme_arg)
        if scheme is None:
            scheme = sch
        elif scheme_to_csv(sch) != scheme_to_csv(scheme):
            raise UsageError(f"{p}: scheme differs from the first subject's")
        mask = _load_mask(masks[i] if masks else None, vol)
        tables.append(volume_to_table(vol, mask, sch, average=False).signals)
    return tables, scheme


def cmd_optimize(args):
    tables, scheme = _subject_tables(args.subjects, args.mask, args.scheme)
    holdout = not args.no_holdout
    if holdout and len(tables) < 2:
        raise UsageError("need at least 2 subjects for a held-out split (or pass --no-holdout)")
    if not holdout:
        log.warning("training without held-out subjects; test MSE is not reported")
    n_test = min(args.n_test, len(tables) - 1) if holdout else 0
    cfg = SelectionConfig(k_selected=args.k, epochs=args.epochs, learning_rate=args.lr,
                          dropout_p=args.dropout, seed=subsystem_seed(args.seed, "selector"),
                          n_test=n_test, batch_size=args.batch_size, explore=args.explore)
    out = Path(args.out)
    with _locked(out):
        report = train_selector(tables, cfg, scheme, holdout=holdout)
        report.seed = args.seed
        reduced = extract_protocol(report, scheme, args.n_bvalues)
        _write_text(out / "score_report.json", report.to_json())
        _write_text(out / "reduced_scheme.csv", scheme_to_csv(reduced))
        spv = calibrate_seconds_per_volume(scheme, args.full_minutes)
        _write_json(out / "duration.json", {
            "seconds_per_volume": spv, "full_minutes": estimate_duration(scheme, spv),
            "reduced_minutes": estimate_duration(reduced, spv),
            "full_volumes": scheme.n_image_volumes, "reduced_volumes": reduced.n_image_volumes,
            "reduced_b_values": sorted({float(p.b) for p in reduced.points if not p.is_b0})})
    return 0


def _fit_from_maps(fit_dir):
    fit_dir = Path(fit_dir)
    rep_path = fit_dir / "fit_report.json"
    if not rep_path.exists():
        raise FileNotFoundError(f"fit report not found: {rep_path}")
    rep = json.loads(rep_path.read_text(encoding="utf-8"))
    params, dims = {}, None
    for name in rep["parameters"]:
        vol = read_volume(fit_dir / name)
        dims = vol.shape[:3]
        params[name] = vol.data[..., 0].ravel(order="F").astype(float)
    return FitResult(rep["model"], params), dims


def cmd_stats(args):
    if args.group_csv:
        rows = read_group_data(Path(args.group_csv).read_text(encoding="utf-8"))
    else:
        if not args.fit:
            raise UsageError("give --group-csv or at least one --fit subject=dir")
        fits, masks = {}, {}
        for spec in args.fit:
            subject, d = spec.split("=", 1) if "=" in spec else (None, None)
            if subject is None:
                raise UsageError(f"--fit must be subject=dir, got {spec!r}")
            fits[subject], dims = _fit_from_maps(d)
            masks[subject] = []
        groups = dict(g.split("=", 1) for g in args.group or [])
        for spec in args.roi or []:
            head, _, path = spec.partition("=")
            subject, _, label = head.partition(":")
            if not path or not label or subject not in fits:
                raise UsageError(f"--roi must be subject:label=mask for a known subject, got {spec!r}")
            m = read_volume(path)
            masks[subject].append(RoiMask(label, mask_indices(m), {"group": groups.get(label, "")}))
        text = export_group_data(fits, masks, parameters=args.parameter or None)
        rows = read_group_data(text)
    out = Path(args.out)
    with _locked(out):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("subject", "roi_label", "group", "parameter", "value"))
        for r in rows:
            w.writerow((r["subject"], r["roi_label"], r["group"], r["parameter"], f"{r['value']:.9g}"))
        _write_text(out / "violin.csv", buf.getvalue())
        table = io.StringIO()
        w = csv.writer(table, lineterminator="\n")
        w.writerow(("parameter", "x_label", "y_label", "n_pairs", "n_effective", "W", "p_value",
                    "method", "band"))
        params = args.parameter or sorted({r["parameter"] for r in rows})
        for x_label, y_label in (c.split(",", 1) for c in args.compare or []):
            for name in params:
                subjects, x, y = paired_values(rows, name, x_label, y_label, key=args.pair_key)
                if not subjects:
                    raise UsageError(f"no subject has both {x_label!r} and {y_label!r} for {name}")
                res = wilcoxon_signed_rank(x, y)
                w.writerow((name, x_label, y_label, len(subjects), res.n_effective,
                            f"{res.statistic:.9g}", f"{res.p_value:.9g}", res.method, res.band))
        _write_text(out / "wilcoxon.csv", table.getvalue())
    return 0


def cmd_compare(args):
    volume = read_volume(args.volume)
    scheme = _scheme_for(args.volume, args.scheme)
    table = volume_to_table(volume, _load_mask(args.mask, volume), scheme)
    kwargs = None
    if args.method == "ss":
        kwargs = dict(seed=subsystem_seed(args.seed, "fit"), learning_rate=args.lr,
                      dropout_p=args.dropout, max_epochs=args.epochs, patience=args.patience,
                      lr_schedule=args.lr_schedule)
    rows = compare_vascular_variants(table, scheme, method=args.method, ss_kwargs=kwargs)
    out = Path(args.out)
    with _locked(out):
        _write_json(out / "compare.json", _clean({"n_voxels": table.n_voxels, "method": args.method,
                                                  "best_aic": rows[0]["variant"],
                                                  "best_bic": next(r["variant"] for r in rows
                                                                   if r["best_bic"]),
                                                  "variants": rows}))
    return 0


# ---------------------------------------------------------------------------
# parser

def _float_or_inf(text):
    v = float(text)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("NaN is not allowed")
    return v


def _add_fit_options(p):
    p.add_argument("--lr", type=float, default=1e-4, help="learning rate (default 1e-4)")
    p.add_argument("--dropout", type=float, default=0.5, help="dropout probability (default 0.5)")
    p.add_argument("--epochs", type=int, default=500, help="maximum epochs (default 500)")
    p.add_argument("--patience", type=int, default=10, help="early-stopping patience (default 10)")
    p.add_argument("--batch-size", type=int, default=128, help="mini-batch size (default 128)")
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant",
                   help="learning-rate schedule (default constant)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--config", help="key=value file supplying option defaults")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="renalverdict", description="Renal VERDICT diffusion-MRI pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic phantom")
    p.add_argument("--n-voxels", type=int, default=1000)
    p.add_argument("--snr", type=_float_or_inf, default=math.inf, help="b0 SNR, 'inf' for none")
    p.add_argument("--radius-min", type=float, default=5.0)
    p.add_argument("--radius-max", type=float, default=15.0)
    p.add_argument("--vascular", choices=("astrosticks", "ball"), default="astrosticks")
    p.add_argument("--d-vasc", type=float, default=50.0)
    p.add_argument("--scheme", help="scheme CSV (default: kidney protocol)")
    p.add_argument("--planted-subjects", type=int, default=0,
                   help="write this many planted-information subjects instead")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a model voxel by voxel")
    p.add_argument("volume", help="signal volume (sidecar .json or stem)")
    p.add_argument("--mask", help="mask volume (default: every voxel)")
    p.add_argument("--scheme", help="scheme CSV (default: the sidecar's reference)")
    p.add_argument("--model", choices=("verdict", "ivim", "adc"), default="verdict")
    p.add_argument("--method", choices=("ss", "lsq"), default="ss",
                   help="VERDICT estimator: self-supervised network or least squares")
    p.add_argument("--vascular", choices=("astrosticks", "ball"), default="astrosticks")
    p.add_argument("--d-vasc", type=float, default=50.0)
    p.add_argument("--roi", action="append", help="label=mask for per-ROI MSE (repeatable)")
    p.add_argument("--report-runtime", action="store_true",
                   help="record wall time in fit_report.json (makes it run-dependent)")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("optimize", parents=[common], help="select a reduced protocol")
    p.add_argument("subjects", nargs="+", help="per-subject signal volumes")
    p.add_argument("--mask", action="append", help="per-subject mask, in subject order")
    p.add_argument("--scheme", help="scheme CSV (default: the sidecar's reference)")
    p.add_argument("--k", type=int, default=12, help="measurements kept (default 12)")
    p.add_argument("--n-bvalues", type=int, default=4, help="shells in the reduced scheme")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--explore", type=float, default=1.0, help="ranking jitter early in training")
    p.add_argument("--n-test", type=int, default=3, help="held-out subjects (the last ones)")
    p.add_argument("--no-holdout", action="store_true", help="train on every subject")
    p.add_argument("--full-minutes", type=float, default=40.0,
                   help="scan time the full scheme is calibrated to")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("stats", parents=[common], help="ROI exports and Wilcoxon tests")
    p.add_argument("--group-csv", help="previously exported group CSV")
    p.add_argument("--fit", action="append", help="subject=fit output directory (repeatable)")
    p.add_argument("--roi", action="append", help="subject:label=mask (repeatable)")
    p.add_argument("--group", action="append", help="label=group tag (repeatable)")
    p.add_argument("--parameter", action="append", help="parameter to test (default: all)")
    p.add_argument("--compare", action="append", help="x_label,y_label pair to test")
    p.add_argument("--pair-key", choices=("roi_label", "group"), default="roi_label")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("compare", parents=[common], help="rank vascular model variants")
    p.add_argument("volume")
    p.add_argument("--mask")
    p.add_argument("--scheme")
    p.add_argument("--method", choices=("lsq", "ss"), default="lsq")
    _add_fit_options(p)
    p.set_defaults(func=cmd_compare)
    return parser


def _read_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _apply_config(parser, argv):
    """Install config-file values as defaults on the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subparsers.choices:
        return
    sp = subparsers.choices[command]
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, text in _read_config(known.config).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [s.strip() for s in text.split(";") if s.strip()]
        else:
            conv = action.type or str
            try:
                value = conv(text)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"config key {key}: {e}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
            defaults[key] = value
    sp.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except VALIDATION_ERRORS as e:
        print(f"renalverdict: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"renalverdict {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"renalverdict {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
