"""Command-line front end: simulate -> count -> fit-fringe / reconstruct -> report, plus HOM calibration."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .counting import CountTable, MalformedRecordError, count_jsonl
from .montecarlo import FringeDataset
from .pipeline import ConfigError, Protocol, assemble_data, simulate
from .states import channel_index
from .tomography import DegenerateFitError, MissingPairError, fit_fringe, hom_analyze, hom_from_depth, reconstruct, render_report

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_STRICT = 0, 1, 2, 3


class InputError(Exception):
    pass


def _clean(obj):
    """NaN/inf -> null so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _protocol(args) -> Protocol:
    if not args.config:
        raise InputError("--config is required")
    proto = Protocol.load(args.config)
    return proto.with_overrides(
        seed=args.seed, shots=args.shots, phases=args.phases, project_psd=True if getattr(args, "project_psd", False) else None
    )


# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    proto = _protocol(args)
    out = Path(args.out)
    events = simulate(proto, args.threads)
    suffix = ".jsonl.gz" if args.gzip else ".jsonl"
    files = {}
    try:
        (out / "events").mkdir(parents=True, exist_ok=True)
        for name, ev in events.items():
            path = out / "events" / f"{name}{suffix}"
            ev.write_jsonl(path)
            files[name] = {"events": str(path.relative_to(out)), "config_digest": ev.header["config_digest"]}
    except OSError as exc:
        raise InputError(f"cannot write into {out}: {exc.strerror}") from None
    _write(out / "manifest.json", dumps({"format": "pathtomo-manifest/1", "protocol": proto.doc, "runs": files}))
    print(f"wrote {len(files)} event files to {out / 'events'}")
    return EXIT_OK


def _count_one(path: Path) -> CountTable:
    try:
        return count_jsonl(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except MalformedRecordError as exc:
        raise InputError(f"{path}: {exc}") from None


def _table_text(table: CountTable, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        table.to_csv(buf)
        return buf.getvalue()
    return dumps(table.to_json())


def cmd_count(args) -> int:
    fmt = args.format or "json"
    ext = ".csv" if fmt == "csv" else ".json"
    for inp in args.inputs:
        src = Path(inp)
        if src.is_dir():
            manifest = _load_json(src / "manifest.json")
            dest = Path(args.out) if args.out else src / "counts"
            for name, entry in manifest["runs"].items():
                table = _count_one(src / entry["events"])
                _write(dest / f"{name}{ext}", _table_text(table, fmt))
            print(f"counted {len(manifest['runs'])} runs into {dest}")
        else:
            table = _count_one(src)
            text = _table_text(table, fmt)
            if args.out and len(args.inputs) == 1:
                _write(Path(args.out), text)
            elif args.out:
                _write(Path(args.out) / (src.name.split(".")[0] + ext), text)
            else:
                sys.stdout.write(text)
    return EXIT_OK


def _tables_from_dir(src: Path) -> tuple[dict, dict]:
    """Count tables for every run of a simulate output directory (counts/ if present, else events)."""
    manifest = _load_json(src / "manifest.json")
    tables = {}
    for name, entry in manifest["runs"].items():
        cpath = src / "counts" / f"{name}.json"
        tables[name] = CountTable.from_json(_load_json(cpath)) if cpath.exists() else _count_one(src / entry["events"])
    return manifest, tables


def _fit_rows(ds: FringeDataset, fit) -> list:
    scale = ds.shots / ds.shots_background
    y = ds.coincidences - ds.background * scale
    rows = []
    for k in range(len(ds)):
        x = float(ds.relative_phase[k])
        rows.append([f"{x:.12g}", f"{float(ds.coincidences[k]):.12g}", f"{float(ds.background[k]):.12g}",
                     f"{float(y[k]):.12g}", f"{float(fit.model(x)):.12g}"])
    return rows


def _write_fit_csv(path: Path, ds, fit):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["relative_phase", "coincidences", "background", "subtracted", "fit"])
    w.writerows(_fit_rows(ds, fit))
    _write(path, buf.getvalue())


def _fit_doc(ds, fit) -> dict:
    return {
        "pair": list(ds.pair),
        "amplitude": fit.amplitude,
        "offset": fit.offset,
        "theta0": fit.theta0,
        "visibility": fit.visibility,
        "sigma_visibility": fit.sigma_visibility,
        "sigma_theta": fit.sigma_theta,
        "raw_visibility": fit.raw_visibility,
        "chi2": fit.chi2,
        "dof": fit.dof,
    }


def cmd_fit_fringe(args) -> int:
    if args.signal and args.background:
        sig = CountTable.from_json(_load_json(args.signal))
        bg = CountTable.from_json(_load_json(args.background))
        pair = tuple(sig.header.get("run", {}).get("pair", ()))
        if args.pair:
            pair = tuple(sorted(channel_index(c) for c in args.pair))
        if len(pair) != 2:
            raise InputError("channel pair unknown; pass --pair")
        datasets = {"fit": FringeDataset.from_tables(pair, sig, bg)}
    elif args.input:
        _, tables = _tables_from_dir(Path(args.input))
        datasets = {n[: -len("_signal")]: FringeDataset.from_tables(tuple(t.header["run"]["pair"]), t, tables[n[: -len("_signal")] + "_background"])
                    for n, t in sorted(tables.items()) if n.endswith("_signal")}
    else:
        raise InputError("pass either a simulate output directory or --signal and --background")
    docs = {name: _fit_doc(ds, fit_fringe(ds)) for name, ds in datasets.items()}
    fmt = args.format or "json"
    if fmt == "csv":
        out = Path(args.out or ".")
        for name, ds in datasets.items():
            _write_fit_csv(out / f"{name}.csv", ds, fit_fringe(ds))
    else:
        text = dumps(docs)
        if args.out:
            _write(Path(args.out), text)
        else:
            sys.stdout.write(text)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    src = Path(args.input)
    manifest, tables = _tables_from_dir(src)
    proto = Protocol.from_json(manifest["protocol"])
    if args.config:
        # reconstruction settings may be overridden by another protocol document
        proto = Protocol.load(args.config)
    if args.project_psd:
        proto = proto.with_overrides(project_psd=True)
    data = assemble_data(tables, proto.num_modes)
    result = reconstruct(data, proto.det, replace(proto.options, threads=args.threads), proto.targets)
    out = Path(args.out) if args.out else src / "reconstruction"
    doc = result.to_json()
    _write(out / "result.json", dumps(doc))
    _write(out / "report.txt", render_report(_clean(doc)))
    for pair, fit in result.fits.items():
        name = "".join(chr(ord("A") + k) for k in pair)
        _write_fit_csv(out / f"fit_{name}.csv", data.fringes[pair], fit)
    sys.stdout.write(render_report(_clean(doc)))
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.strict and result.warnings:
        return EXIT_STRICT
    return EXIT_OK


def cmd_hom(args) -> int:
    if args.gap is not None and args.depth is not None:
        res = hom_from_depth(args.gap, args.depth)
    elif args.input:
        try:
            data = np.loadtxt(args.input, delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.input}: {exc}") from None
        if data.shape[1] < 3:
            raise InputError(f"{args.input}: need columns delay,counts,baseline")
        res = hom_analyze(data[:, 0], data[:, 1], data[:, 2])
    else:
        raise InputError("pass --gap and --depth, or a CSV file of delay,counts,baseline")
    doc = {"n_ph": res.n_ph, "gap": res.gap, "depth": res.depth, "M_dip": res.M_dip, "center": res.center, "width": res.width}
    text = dumps(doc)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.input)
    if path.is_dir():
        path = path / "reconstruction" / "result.json" if (path / "reconstruction").exists() else path / "result.json"
    doc = _load_json(path)
    sys.stdout.write(render_report(doc))
    if args.strict and doc.get("warnings"):
        return EXIT_STRICT
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathtomo", description="Local-oscillator tomography of single-photon path-entangled states.")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: PATHTOMO_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="sample event files for every run of a protocol")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--shots", type=int, help="heralds per phase point")
    s.add_argument("--phases", type=int, help="phase points per sweep")
    s.add_argument("--gzip", action="store_true", help="compress event files")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("count", help="fold event files into count tables")
    c.add_argument("inputs", nargs="+", help="event files or simulate output directories")
    c.add_argument("--out")
    c.add_argument("--format", choices=("json", "csv"))
    c.set_defaults(func=cmd_count)

    f = sub.add_parser("fit-fringe", help="cosine fits of background-subtracted fringes")
    f.add_argument("input", nargs="?", help="simulate output directory")
    f.add_argument("--signal")
    f.add_argument("--background")
    f.add_argument("--pair", help="channel pair, e.g. AB")
    f.add_argument("--out")
    f.add_argument("--format", choices=("json", "csv"))
    f.set_defaults(func=cmd_fit_fringe)

    r = sub.add_parser("reconstruct", help="reconstruct the density matrix from a simulate output directory")
    r.add_argument("input")
    r.add_argument("--config", help="protocol whose reconstruction settings replace the recorded ones")
    r.add_argument("--out")
    r.add_argument("--project-psd", action="store_true")
    r.add_argument("--strict", action="store_true", help="exit 3 on model-violation warnings")
    r.set_defaults(func=cmd_reconstruct)

    h = sub.add_parser("hom", help="mode overlap from a HOM dip")
    h.add_argument("input", nargs="?", help="CSV with columns delay,counts,baseline")
    h.add_argument("--gap", type=float)
    h.add_argument("--depth", type=float)
    h.add_argument("--out")
    h.set_defaults(func=cmd_hom)

    rp = sub.add_parser("report", help="print the text report of a reconstruction")
    rp.add_argument("input")
    rp.add_argument("--strict", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, MissingPairError, DegenerateFitError, MalformedRecordError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (KeyError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
