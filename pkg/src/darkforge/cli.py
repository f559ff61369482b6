"""Command-line surface binding the pipeline into workflows.

Exit codes: 0 on success, 1 on any operational failure, 2 on usage errors.
Parallelism inside dataset builds is capped by DARKFORGE_THREADS; every
output (manifests, reports, CSVs) is byte-stable for fixed seeds and inputs.
"""

import argparse
import json
import os
import pathlib
import sys

import numpy as np

from .diffusion import (
    DEFAULT_SAMPLE_STEPS,
    DEFAULT_T,
    GaussianMixture,
    gmm_posterior_denoiser,
    linear_schedule,
    sample,
)
from .enhance import finite_diff_check, loss_ccl, loss_cdl, loss_con, loss_icl
from .errors import DarkforgeError, InvalidRange, IoFailure, MissingFile
from .illumination import DEFAULT_BINS, IlluminanceBand, luma_histogram
from .imaging import load_bayer, load_ppm, render_reference_isp, write_ppm
from .metrics import MetricReport, PairMetrics, psnr, ssim
from .noise import (
    NoiseModel,
    RngStream,
    calibrate_gaussian,
    calibrate_poisson_gain,
    fit_iso_model,
    ingest_dark_frame,
    load_model,
    save_model,
)
from .synth import (
    DEFAULT_CROP,
    SynthConfig,
    build_dataset,
    load_manifest,
    load_source_manifest,
    verify_dataset,
)


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise MissingFile(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: invalid JSON: {exc}") from exc


def _load_array(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except FileNotFoundError as exc:
        raise MissingFile(f"no such tensor file: {path}") from exc
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot load tensor {path}: {exc}") from exc


def _load_image(path) -> np.ndarray:
    if str(path).endswith(".ppm"):
        return load_ppm(path).data.astype(np.float64)
    return np.asarray(_load_array(path), dtype=np.float64)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _by_iso(frames):
    groups = {}
    for frame in frames:
        groups.setdefault(frame.iso, []).append(frame)
    return groups


def _cmd_calibrate(args) -> int:
    flats = [load_bayer(p) for p in args.flats]
    darks = [load_bayer(p) for p in args.darks]
    gain_points = sorted((iso, calibrate_poisson_gain(group))
                         for iso, group in _by_iso(flats).items())
    read_points = sorted((iso, calibrate_gaussian(group))
                         for iso, group in _by_iso(darks).items())
    model = fit_iso_model(tuple(gain_points), tuple(read_points))
    if args.ingest_darks:
        for path, frame in zip(args.darks, darks):
            model = ingest_dark_frame(model, frame, str(path))
    save_model(model, args.out)
    print(f"calibrated {len(gain_points)} gain / {len(read_points)} read "
          f"points -> {args.out}")
    return 0


def _parse_crop(token: str):
    try:
        w, h = (int(t) for t in token.lower().split("x"))
    except ValueError:
        raise InvalidRange(f"crop must look like 3840x2160, got {token!r}") \
            from None
    return (w, h)


def _cmd_synth(args) -> int:
    if len(args.standard) != len(args.band):
        raise InvalidRange(
            f"{len(args.band)} band(s) but {len(args.standard)} standard(s); "
            "pass one --standard per --band in the same order")
    sources = load_source_manifest(args.sources)
    model = load_model(args.noise) if args.noise else NoiseModel()
    crop = _parse_crop(args.crop)
    configs = [SynthConfig(band=IlluminanceBand.parse(band),
                           standard_refs=(std,), crop=crop, seed=args.seed,
                           bins=args.bins)
               for band, std in zip(args.band, args.standard)]
    manifest = build_dataset(sources, configs, model, args.out)
    print(f"wrote {len(manifest.entries)} pairs "
          f"({len(manifest.failures)} failed) -> "
          f"{os.path.join(args.out, 'manifest.json')}")
    return 0


def _cmd_verify(args) -> int:
    manifest = load_manifest(args.manifest)
    standards = {}
    for band in sorted({e.band for e in manifest.entries},
                       key=lambda b: b.value):
        path = pathlib.Path(args.standards) / f"{band.value}.raw"
        if not path.exists():
            raise MissingFile(f"no standard for band {band.value} at {path}")
        standards[band] = load_bayer(path)
    root = os.path.dirname(os.path.abspath(args.manifest))
    report = verify_dataset(manifest, standards, root=root,
                            threshold=args.threshold)
    sys.stdout.write(report.render_json() if args.json
                     else report.render_text())
    return 0 if report.all_within else 1


def _cmd_diffuse_demo(args) -> int:
    gmm = GaussianMixture.from_dict(_load_json(args.gmm))
    schedule = linear_schedule(T=args.T)
    out = sample(lambda xt, t, cond: gmm_posterior_denoiser(gmm, xt, t,
                                                            schedule),
                 None, (args.chains, gmm.dim), args.steps, schedule,
                 RngStream(args.seed))
    lines = [",".join(f"x{i}" for i in range(gmm.dim))]
    lines.extend(",".join(f"{v:.17g}" for v in row) for row in out)
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
        print(f"wrote {args.chains} chains -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_losses(args) -> int:
    arity = {"icl": 3, "ccl": 2, "cdl": 2, "con": 2}[args.name]
    if len(args.tensors) != arity:
        raise InvalidRange(
            f"loss {args.name} takes {arity} tensor files, "
            f"got {len(args.tensors)}")
    tensors = [_load_array(p) for p in args.tensors]
    if args.name == "icl":
        value, grad = loss_icl(tensors[0], tensors[1], tensors[2])
        objective = lambda z: loss_icl(z, tensors[1], tensors[2])[0]
    elif args.name == "ccl":
        value, grad = loss_ccl(tensors[0], tensors[1])
        objective = lambda z: loss_ccl(z, tensors[1])[0]
    elif args.name == "cdl":
        value, grad = loss_cdl(tensors[0], tensors[1])
        objective = lambda z: loss_cdl(z, tensors[1])[0]
    else:
        value, grad, objective = loss_con(tensors[0], tensors[1]), None, None
    doc = {"loss": args.name, "value": value}
    if args.gradcheck:
        if grad is None:
            raise InvalidRange("loss con reports a value only; "
                               "no gradient surface to check")
        doc["fd_max_rel"] = float(finite_diff_check(objective, tensors[0],
                                                    grad))
    print(json.dumps(doc, sort_keys=True))
    return 0


def _cmd_metrics(args) -> int:
    rows = _load_json(args.pairs)
    if not isinstance(rows, list) or not rows:
        raise IoFailure(f"{args.pairs}: expected a non-empty JSON list")
    pairs = []
    for row in rows:
        try:
            name, a_path, b_path = row["name"], row["a"], row["b"]
        except (TypeError, KeyError) as exc:
            raise IoFailure(
                f"{args.pairs}: each row needs name/a/b keys: {exc}") from exc
        a = _load_image(a_path)
        b = _load_image(b_path)
        pairs.append(PairMetrics(name=name,
                                 psnr_db=psnr(a, b, peak=args.peak),
                                 ssim=ssim(a, b, peak=args.peak,
                                           window=args.window)))
    report = MetricReport(pairs=tuple(pairs))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
        print(f"scored {len(pairs)} pairs -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_isp(args) -> int:
    frame = load_bayer(args.input)
    gains = tuple(args.gains)
    write_ppm(render_reference_isp(frame, gains), args.out)
    if args.dump_histogram:
        hist = luma_histogram(frame, bins=args.bins, gains=gains)
        _write_text(args.dump_histogram,
                    json.dumps(hist.dump(), indent=2, sort_keys=True) + "\n")
    print(f"rendered {args.input} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darkforge",
        description="Low-light RAW synthesis, verification, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate",
                         help="fit a noise model from flat/dark frames")
    cal.add_argument("--flats", nargs="+", required=True,
                     help="SIEDRAW1 flat-field frames (grouped by ISO tag)")
    cal.add_argument("--darks", nargs="+", required=True,
                     help="SIEDRAW1 capped-lens frames (grouped by ISO tag)")
    cal.add_argument("--out", required=True, help="noise model JSON path")
    cal.add_argument("--ingest-darks", action="store_true",
                     help="attach dark residuals to the model's bank")
    cal.set_defaults(func=_cmd_calibrate)

    syn = sub.add_parser("synth", help="build a synthetic low-light dataset")
    syn.add_argument("--sources", required=True,
                     help="JSON manifest of capture/reference pairs")
    syn.add_argument("--band", action="append", required=True,
                     choices=[b.value for b in IlluminanceBand],
                     help="illuminance band; repeat for multiple bands")
    syn.add_argument("--standard", action="append", required=True,
                     help="band-standard SIEDRAW1 frame, one per --band")
    syn.add_argument("--noise", help="noise model JSON (omit for noiseless)")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True, help="output dataset directory")
    syn.add_argument("--crop", default=f"{DEFAULT_CROP[0]}x{DEFAULT_CROP[1]}",
                     help="centered crop WxH (default %(default)s)")
    syn.add_argument("--bins", type=int, default=DEFAULT_BINS)
    syn.set_defaults(func=_cmd_synth)

    ver = sub.add_parser("verify",
                         help="re-measure dataset KL against band standards")
    ver.add_argument("--manifest", required=True)
    ver.add_argument("--standards", required=True,
                     help="directory holding <band>.raw standard frames")
    ver.add_argument("--threshold", type=float, default=0.06)
    ver.add_argument("--json", action="store_true",
                     help="emit the report as JSON instead of a table")
    ver.set_defaults(func=_cmd_verify)

    dif = sub.add_parser("diffuse-demo",
                         help="sample a GMM through the reverse process")
    dif.add_argument("--gmm", required=True, help="mixture spec JSON")
    dif.add_argument("--T", type=int, default=DEFAULT_T)
    dif.add_argument("--steps", type=int, default=DEFAULT_SAMPLE_STEPS)
    dif.add_argument("--seed", type=int, default=0)
    dif.add_argument("--chains", type=int, default=256)
    dif.add_argument("--out", help="CSV path (default: stdout)")
    dif.set_defaults(func=_cmd_diffuse_demo)

    los = sub.add_parser("losses",
                         help="evaluate a loss (optionally FD-check it)")
    los.add_argument("--name", required=True,
                     choices=["icl", "ccl", "cdl", "con"])
    los.add_argument("--tensors", nargs="+", required=True,
                     help=".npy inputs in the loss's argument order")
    los.add_argument("--gradcheck", action="store_true")
    los.set_defaults(func=_cmd_losses)

    met = sub.add_parser("metrics", help="PSNR/SSIM report for image pairs")
    met.add_argument("--pairs", required=True,
                     help='JSON list of {"name", "a", "b"} path rows')
    met.add_argument("--peak", type=float, default=1.0)
    met.add_argument("--window", default="gaussian",
                     choices=["gaussian", "blocks"])
    met.add_argument("--out", help="report path (default: stdout)")
    met.set_defaults(func=_cmd_metrics)

    isp = sub.add_parser("isp", help="render a RAW frame through the "
                                     "reference ISP")
    isp.add_argument("input", help="SIEDRAW1 frame")
    isp.add_argument("--out", required=True, help="PPM output path")
    isp.add_argument("--gains", type=float, nargs=3, default=[1.0, 1.0, 1.0],
                     metavar=("R", "G", "B"))
    isp.add_argument("--dump-histogram",
                     help="also write the Y-channel histogram JSON here")
    isp.add_argument("--bins", type=int, default=DEFAULT_BINS)
    isp.set_defaults(func=_cmd_isp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code is None else int(exc.code)
    try:
        return args.func(args)
    except DarkforgeError as exc:
        print(f"darkforge: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"darkforge: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
