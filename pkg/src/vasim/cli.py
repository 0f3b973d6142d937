"""
Command-line entry point.

    vasim dataset gen   render a labelled training/testing corpus
    vasim train         train the CNN observer on a corpus
    vasim eval          accuracy and confusion matrix on a corpus split
    vasim va            one acuity measurement for a Zernike file
    vasim sweep         acuity across added spherical defocus
    vasim pal map       VA and blur-strength maps over a lens grid
    vasim pal lines     horizontal zone profiles and good-VA widths
    vasim validate      Bland-Altman report for paired acuity data
    vasim plot          re-plot saved maps, sweeps or agreement data

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .agreement import apply_offset_correction, bland_altman, read_pairs_csv
from .cnn import MODEL_FORMAT_VERSION, TrainConfig, evaluate, init_model, load_model, save_model, train
from .dataset import CORPUS_FORMAT_VERSION, DatasetSpec, generate_dataset, plan_dataset, read_corpus, write_corpus
from .engine import SimConfig, defocus_sweep, parse_range, read_sweep_csv, simulate_va, write_va_csv, VaResult
from .pal import (VaMap, blur_strength_map, extract_profile, good_va_width, grid_row, load_pal_grid,
                  normalize_mean_sphere, save_pal_grid, simulate_pal_map, synthesize_generic_pal)
from .plotting import plot_bland_altman, plot_heatmap, plot_profiles, plot_sweep
from .profiles import get_profile
from .zernike import ZernikeCoefficients

log = logging.getLogger("vasim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _settings(args, **flag_keys) -> dict:
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    overrides = cfgmod.parse_assignments(args.set)
    for key in ("profile", "seed", "workers"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    for key, value in flag_keys.items():
        if value is not None:
            overrides[key] = value
    return cfgmod.resolve(file_values, overrides)


def _echo(settings: dict, target: Path, argv) -> None:
    header = [f"vasim {__version__}", "command: vasim " + " ".join(argv)]
    target.write_text(cfgmod.format_config(settings, header), encoding="utf-8")


def _echo_path(out: Path) -> Path:
    return out.parent / (out.name + ".config.txt")


def _sim_config(s: dict) -> SimConfig:
    return SimConfig(profile=s["profile"], repetitions=s["repetitions"], trials=s["trials"],
                     pupil_radius_mm=s["pupil_radius_mm"], wavelength_nm=s["wavelength_nm"],
                     pupil_grid_n=s["pupil_grid_n"], seed=s["seed"], beta=s["beta"],
                     guess_rate=s["guess_rate"], lapse_rate=s["lapse_rate"])


def _load_observer(path, s: dict):
    data = Path(path).read_bytes()
    model = load_model(path, input_size=get_profile(s["profile"]).image_size)
    model.metadata["id"] = hashlib.sha256(data).hexdigest()[:12]
    return model


def _zernike_or_zero(path, s: dict) -> ZernikeCoefficients:
    if path:
        return ZernikeCoefficients.load(path)
    return ZernikeCoefficients(s["pupil_radius_mm"], s["wavelength_nm"], {})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset_gen(args, argv) -> int:
    s = _settings(args, images_per_orientation=args.images_per_orientation,
                  train_per_orientation=args.train_per_orientation)
    prof = get_profile(s["profile"])
    spec = DatasetSpec(s["images_per_orientation"], s["train_per_orientation"], s["gap_min"], s["gap_max"],
                       s["defocus_max_d"], s["defocus_step_d"], s["seed"], prof.gap_step)
    if args.count_only:
        plan = plan_dataset(spec)
        print(f"train={int(plan.is_train.sum())} test={int((~plan.is_train).sum())} "
              f"defocus_levels={len(spec.defocus_levels)}")
        return 0
    if not args.out:
        raise UsageError("dataset gen: --out is required unless --count-only")
    corpus = generate_dataset(spec, prof.image_size, prof.pixel_angle_arcmin, s["pupil_radius_mm"],
                              s["wavelength_nm"], s["pupil_grid_n"])
    root = write_corpus(corpus, args.out)
    _echo(s, root / "effective_config.txt", argv)
    print(f"wrote {spec.n_train} train + {spec.n_test} test images to {root}")
    return 0


def cmd_train(args, argv) -> int:
    s = _settings(args, max_epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size)
    corpus = read_corpus(args.data)
    n = corpus.images.shape[1]
    if n != get_profile(s["profile"]).image_size:
        raise ValueError(f"corpus images are {n} px but profile {s['profile']!r} expects "
                         f"{get_profile(s['profile']).image_size} px")
    tcfg = TrainConfig(learning_rate=s["learning_rate"], momentum=s["momentum"], l2_coefficient=s["l2"],
                       batch_size=s["batch_size"], max_epochs=s["max_epochs"], seed=s["seed"])
    x, y = corpus.split("train")
    val = corpus.split("test")
    model = init_model(n, s["seed"])
    out = Path(args.model)
    log_rows = []

    def progress(e):
        log_rows.append(e)
        print(f"epoch {e.epoch:3d}  loss {e.loss:.4f}  train {e.train_accuracy:.3f}  "
              f"test {e.val_accuracy:.3f}  lr {e.learning_rate:.2g}"
              + ("  diverged, rolled back" if e.rolled_back else ""), flush=True)

    model, _ = train(model, x, y, tcfg, val=val, progress=progress)
    save_model(model, out)
    with open(out.parent / (out.name + ".log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy", "test_accuracy", "learning_rate", "rolled_back"])
        for e in log_rows:
            w.writerow([e.epoch, f"{e.loss:.6f}", f"{e.train_accuracy:.6f}",
                        f"{e.val_accuracy:.6f}", f"{e.learning_rate:.6g}", int(e.rolled_back)])
    _echo(s, _echo_path(out), argv)
    print(f"saved model to {out} (weights of epoch {model.metadata['best_epoch']}, lowest training loss)")
    return 0


def cmd_eval(args, argv) -> int:
    _settings(args)                    # validates --config / --set
    corpus = read_corpus(args.data)
    model = load_model(args.model, input_size=corpus.images.shape[1])
    acc, conf = evaluate(model, *corpus.split(args.split))
    print(f"accuracy {acc:.4f} on {conf.sum()} {args.split} images")
    print("confusion (rows: true 0..315 deg, columns: predicted)")
    for row in conf:
        print(" ".join(f"{v:5d}" for v in row))
    if args.out:
        Path(args.out).write_text(json.dumps({"accuracy": acc, "confusion": conf.tolist()}, indent=2) + "\n")
    return 0


def cmd_va(args, argv) -> int:
    s = _settings(args, repetitions=args.repetitions)
    cfg = _sim_config(s)
    observer = _load_observer(args.model, s)
    z = _zernike_or_zero(args.zernike, s)
    result = simulate_va(z, observer, cfg)
    out = Path(args.out)
    write_va_csv([(None, result)], out, first_column=None)
    _echo(s, _echo_path(out), argv)
    print(f"VA {result.mean_logmar:.3f} logMAR (SD {result.sd_logmar:.3f}, n={len(result.logmars)})")
    return 0


def cmd_sweep(args, argv) -> int:
    s = _settings(args, repetitions=args.repetitions)
    cfg = _sim_config(s)
    observer = _load_observer(args.model, s)
    base = _zernike_or_zero(args.zernike, s)
    levels = parse_range(args.defocus)
    rows = defocus_sweep(base, levels, observer, cfg, workers=s["workers"])
    out = Path(args.out)
    write_va_csv(rows, out)
    _echo(s, _echo_path(out), argv)
    if args.plot:
        plot_sweep(rows, args.plot)
    for d, r in rows:
        print(f"{d:+.2f} D  VA {r.mean_logmar:.3f} +/- {r.sd_logmar:.3f}")
    return 0


def cmd_pal_map(args, argv) -> int:
    s = _settings(args, repetitions=args.repetitions)
    cfg = _sim_config(s)
    if bool(args.synthetic) == bool(args.grid):
        raise UsageError("pal map: give exactly one of --synthetic or --grid")
    if args.synthetic:
        design = synthesize_generic_pal(args.synthetic, s["addition_d"], s["grid_extent_mm"], s["grid_step_mm"],
                                        s["pupil_radius_mm"], s["wavelength_nm"])
    else:
        design = load_pal_grid(args.grid)
    design = normalize_mean_sphere(design)
    observer = _load_observer(args.model, s)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(done, total):
        print(f"row {done}/{total}", flush=True)

    va_map = simulate_pal_map(design, observer, cfg, workers=s["workers"], progress=progress)
    va_map.to_csv(out / "va_map.csv")
    blur = blur_strength_map(design)
    with open(out / "blur_strength.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_mm", "y_mm", "blur_strength_d"])
        for iy, y in enumerate(design.ys):
            for ix, x in enumerate(design.xs):
                w.writerow([f"{x:g}", f"{y:g}", f"{blur[iy, ix]:.6f}"])
    save_pal_grid(design, out / "design.csv")
    (out / "va_map.json").write_text(json.dumps(va_map.provenance, indent=2, sort_keys=True) + "\n")
    plot_heatmap(va_map, out / "va_map.png", s["heatmap_vmin"], s["heatmap_vmax"],
                 title=f"{design.label} ({design.n_points} points)")
    _echo(s, out / "effective_config.txt", argv)
    failed = int(np.sum(va_map.status != "ok"))
    print(f"wrote {design.n_points}-point map to {out} ({failed} failed points)")
    return 0


def _read_blur(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    xs = np.array(sorted({float(r["x_mm"]) for r in rows}))
    ys = np.array(sorted({float(r["y_mm"]) for r in rows}))
    grid = np.zeros((len(ys), len(xs)))
    xi = {x: i for i, x in enumerate(xs)}
    yi = {y: i for i, y in enumerate(ys)}
    for r in rows:
        grid[yi[float(r["y_mm"])], xi[float(r["x_mm"])]] = float(r["blur_strength_d"])
    return xs, ys, grid


def cmd_pal_lines(args, argv) -> int:
    s = _settings(args)
    rows_req = [float(v) for v in args.rows.split(",")]
    profiles, blur_rows, widths = {}, {}, []
    for run in args.run:
        run = Path(run)
        label = json.loads((run / "va_map.json").read_text()).get("design", run.name)
        va_map = VaMap.from_csv(run / "va_map.csv")
        bx, by, blur = _read_blur(run / "blur_strength.csv")
        profiles[label], blur_rows[label] = {}, {}
        for y in rows_req:
            y_grid = float(va_map.ys[np.argmin(np.abs(va_map.ys - y))])
            if y_grid != y:
                print(f"note: y = {y:g} mm is off-grid for {label}; using nearest row {y_grid:g} mm")
            prof = extract_profile(va_map, y_grid)
            sd_row = grid_row(va_map.sd_logmar, va_map.ys, y_grid)
            profiles[label][y] = [(x, v, sd) for (x, v), sd in zip(prof, sd_row)]
            blur_rows[label][y] = list(zip(bx, grid_row(blur, by, y_grid)))
            width = good_va_width(prof, s["good_va_threshold"])
            widths.append((label, y, y_grid, width))
            print(f"{label:>8s}  y = {y:6.1f} mm  good-VA width {width:5.1f} mm")
    out = Path(args.out)
    plot_profiles(profiles, blur_rows, out, s["good_va_threshold"])
    widths_path = Path(args.widths) if args.widths else out.with_suffix(".widths.csv")
    with open(widths_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["design", "y_requested_mm", "y_mm", "good_va_width_mm", "threshold_logmar"])
        for label, y, yg, width in widths:
            w.writerow([label, f"{y:g}", f"{yg:g}", f"{width:g}", f"{s['good_va_threshold']:g}"])
    return 0


def cmd_validate(args, argv) -> int:
    sim, ref = read_pairs_csv(args.pairs)
    report = bland_altman(sim, ref)
    doc = report.to_dict()
    if args.correct:
        corrected = bland_altman(apply_offset_correction(sim, report.bias), ref)
        doc["corrected"] = corrected.to_dict()
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        plot_bland_altman(report, args.plot)
    return 0


def cmd_plot(args, argv) -> int:
    s = _settings(args)
    if args.kind == "heatmap":
        va_map = VaMap.from_csv(args.input)
        plot_heatmap(va_map, args.out, s["heatmap_vmin"], s["heatmap_vmax"])
    elif args.kind == "sweep":
        rows = []
        for r in read_sweep_csv(args.input):
            reps = [v for k, v in r.items() if k.startswith("rep")]
            rows.append((r["defocus_d"], VaResult(r["mean_logmar"], reps, r["sd_logmar"], [])))
        plot_sweep(rows, args.out)
    else:
        sim, ref = read_pairs_csv(args.input)
        plot_bland_altman(bland_altman(sim, ref), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--profile", choices=("desk", "full"))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel worker processes (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vasim", description="Simulated-observer visual acuity.")
    p.add_argument("--version", action="version",
                   version=f"vasim {__version__} (model format {MODEL_FORMAT_VERSION}, "
                           f"corpus format {CORPUS_FORMAT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="corpus generation")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    gen = ds_sub.add_parser("gen", help="render a labelled corpus")
    _common(gen)
    gen.add_argument("--out")
    gen.add_argument("--images-per-orientation", type=int)
    gen.add_argument("--train-per-orientation", type=int)
    gen.add_argument("--count-only", action="store_true", help="print split sizes without rendering")
    gen.set_defaults(func=cmd_dataset_gen)

    tr = sub.add_parser("train", help="train the CNN observer")
    _common(tr)
    tr.add_argument("--data", required=True)
    tr.add_argument("--model", required=True, help="output model file")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a model on a corpus split")
    _common(ev)
    ev.add_argument("--data", required=True)
    ev.add_argument("--model", required=True)
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--out", help="optional JSON report")
    ev.set_defaults(func=cmd_eval)

    va = sub.add_parser("va", help="single acuity measurement")
    _common(va)
    va.add_argument("--zernike", help="Zernike JSON (default: no aberrations)")
    va.add_argument("--model", required=True)
    va.add_argument("--out", required=True)
    va.add_argument("--repetitions", type=int)
    va.set_defaults(func=cmd_va)

    sw = sub.add_parser("sweep", help="acuity across added defocus")
    _common(sw)
    sw.add_argument("--defocus", default="-1.5:0.5:1.5", help="start:step:stop or comma list (D)")
    sw.add_argument("--zernike", help="base Zernike JSON (default: no aberrations)")
    sw.add_argument("--model", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--plot")
    sw.add_argument("--repetitions", type=int)
    sw.set_defaults(func=cmd_sweep)

    pal = sub.add_parser("pal", help="progressive addition lens analysis")
    pal_sub = pal.add_subparsers(dest="action", required=True)
    pm = pal_sub.add_parser("map", help="VA map over the lens")
    _common(pm)
    pm.add_argument("--synthetic", choices=("hard", "soft"))
    pm.add_argument("--grid", help="PAL grid CSV with JSON sidecar")
    pm.add_argument("--model", required=True)
    pm.add_argument("--out-dir", required=True)
    pm.add_argument("--repetitions", type=int)
    pm.set_defaults(func=cmd_pal_map)
    pl = pal_sub.add_parser("lines", help="zone profiles from map runs")
    _common(pl)
    pl.add_argument("--run", action="append", required=True, help="output dir of 'pal map' (repeatable)")
    pl.add_argument("--rows", default="0,-9,-18", help="y positions in mm")
    pl.add_argument("--out", required=True)
    pl.add_argument("--widths", help="CSV of good-VA widths (default: next to --out)")
    pl.set_defaults(func=cmd_pal_lines)

    vd = sub.add_parser("validate", help="Bland-Altman agreement report")
    vd.add_argument("--pairs", required=True, help="CSV with sim_logmar,ref_logmar")
    vd.add_argument("--out")
    vd.add_argument("--correct", action="store_true", help="also report after removing the bias")
    vd.add_argument("--plot")
    vd.set_defaults(func=cmd_validate)

    pt = sub.add_parser("plot", help="re-plot saved outputs")
    _common(pt)
    pt.add_argument("kind", choices=("heatmap", "sweep", "bland-altman"))
    pt.add_argument("--input", required=True)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_plot)
    return p


# options whose values may start with a minus sign (argparse reads those as flags)
_SIGNED_VALUE_OPTIONS = ("--defocus", "--rows")


def _glue_signed_values(argv: list[str]) -> list[str]:
    out, k = [], 0
    while k < len(argv):
        tok = argv[k]
        nxt = argv[k + 1] if k + 1 < len(argv) else ""
        if tok in _SIGNED_VALUE_OPTIONS and nxt[:1] == "-" and nxt[1:2] in tuple("0123456789."):
            out.append(f"{tok}={argv[k + 1]}")
            k += 2
        else:
            out.append(tok)
            k += 1
    return out


def dispatch(argv=None) -> int:
    argv = _glue_signed_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"vasim: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"vasim: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
