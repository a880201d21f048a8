"""Command-line entry point: ``ecgmon <command> [options]``.

Exit status is 0 on success, 1 on an operational error and 2 on a usage
error. Operational errors print one line to stderr::

    error code=<code> stage=<stage> message="<text>"
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import dataset as ds
from . import metrics as mt
from . import nn
from .config import AppConfig, add_config_flags, resolve_config
from .errors import DataIOError, EcgMonError, InvalidInput
from .features import extract_features
from .seeding import derive_seed
from .signal import BiquadCascade, apply_filter, apply_zero_phase, design_butterworth_lowpass
from .synth import write_corpus
from .telemetry import DeviceSimulator, FaultConfig, IngestServer, ServiceConfig, export_session, make_id

log = logging.getLogger("ecgmon")

CLASS_NAMES = ("Normal", "Abnormal")
SPLIT_FILES = (("train", "train.csv"), ("validation", "val.csv"), ("test", "test.csv"))


def _filter(cfg: AppConfig, sample_rate_hz: int | None = None) -> BiquadCascade:
    s = cfg.signal
    return design_butterworth_lowpass(s.order, s.cutoff_hz, sample_rate_hz or s.sample_rate_hz)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_manifest(dataset_dir: Path) -> dict:
    path = dataset_dir / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise InvalidInput(f"no manifest.json in {dataset_dir}; run 'dataset build' first") from None


def _load_split(dataset_dir: Path, manifest: dict, name: str):
    rows = ds.read_split_csv(dataset_dir / manifest["files"][name])
    return ds.xy(rows, manifest["feature_columns"])


# -- dataset -----------------------------------------------------------------

def cmd_dataset_synth(args, cfg: AppConfig) -> int:
    out = Path(args.out or cfg.paths.data_root)
    write_corpus(out, args.n_normal, args.n_abnormal, derive_seed(cfg.seed, "synth"),
                 duration_s=args.duration, sample_rate_hz=cfg.signal.sample_rate_hz)
    _emit({"root": str(out), "n_normal": args.n_normal, "n_abnormal": args.n_abnormal})
    return 0


def cmd_dataset_build(args, cfg: AppConfig) -> int:
    root = Path(cfg.paths.data_root)
    demographics = Path(args.demographics) if args.demographics else root / "demographics.csv"
    ecg_root = Path(args.ecg_root) if args.ecg_root else root / "ecg"
    out = Path(args.out or cfg.paths.dataset_dir)
    sp = cfg.split
    split = ds.SplitConfig(sp.train_fraction, sp.test_fraction, sp.validation_fraction_of_train)
    manifest = ds.build_dataset(demographics, ecg_root, out, _filter(cfg), split, derive_seed(cfg.seed, "dataset"))
    for w in manifest["warnings"]:
        log.warning("%s", w)
    _emit({"out": str(out), "counts": manifest["counts"]})
    return 0


# -- model -------------------------------------------------------------------

def cmd_train(args, cfg: AppConfig) -> int:
    data_dir = Path(args.dataset or cfg.paths.dataset_dir)
    model_path = Path(args.model or cfg.paths.model_path)
    manifest = _load_manifest(data_dir)
    X, y = _load_split(data_dir, manifest, "train")
    Xv, yv = _load_split(data_dir, manifest, "val")
    if len(yv) == 0:
        Xv = yv = None
    seed = derive_seed(cfg.seed, "train")
    model = nn.init_model(X.shape[1], tuple(cfg.model.widths), cfg.model.dropout, seed=derive_seed(seed, "init"))
    model, history = nn.fit(model, X, y, Xv, yv, cfg.train.to_train_config(derive_seed(seed, "fit")))
    model_path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_weights(model, model_path)
    log_path = model_path.with_suffix(".history.json")
    _write_json(log_path, {
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "epochs": [e.__dict__ for e in history.epochs],
    })
    last = history.epochs[-1]
    _emit({"model": str(model_path), "history": str(log_path), "epochs": len(history.epochs),
           "best_epoch": history.best_epoch, "final_lr": last.lr})
    return 0


def _split_report(model, X, y) -> tuple[dict, str]:
    p = nn.predict_proba(model, X)
    cm = mt.confusion(y, (p >= 0.5).astype(int), CLASS_NAMES)
    rep = mt.report(cm)
    try:
        auc = mt.auc(y, p)
    except InvalidInput:
        auc = None
    doc = {"confusion": [list(r) for r in cm.counts], "report": rep.to_dict(), "auc": auc}
    return doc, mt.render_text(rep) + "\n" + mt.render_confusion(cm)


def _from_confusion(args) -> int:
    try:
        counts = [int(v) for v in args.from_confusion.split(",")]
    except ValueError:
        raise InvalidInput("--from-confusion expects four integers a,b,c,d") from None
    if len(counts) != 4:
        raise InvalidInput("--from-confusion expects four integers a,b,c,d")
    names = tuple(args.class_names.split(",")) if args.class_names else ("0", "1")
    if len(names) != 2:
        raise InvalidInput("--class-names expects two comma-separated names")
    cm = mt.ConfusionMatrix2(((counts[0], counts[1]), (counts[2], counts[3])), names)
    if args.swap:
        cm = cm.swapped()
    rep = mt.report(cm)
    if args.format == "json":
        sys.stdout.buffer.write(mt.render(rep, "json"))
    else:
        sys.stdout.write(mt.render_text(rep) + "\n" + mt.render_confusion(cm))
    return 0


def cmd_evaluate(args, cfg: AppConfig) -> int:
    if args.from_confusion:
        return _from_confusion(args)
    data_dir = Path(args.dataset or cfg.paths.dataset_dir)
    model = nn.load_weights(Path(args.model or cfg.paths.model_path))
    manifest = _load_manifest(data_dir)
    out = Path(args.out or cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {}
    texts = []
    for name, _ in SPLIT_FILES:
        key = "val" if name == "validation" else name
        X, y = _load_split(data_dir, manifest, key)
        if len(y) == 0:
            continue
        doc[name], text = _split_report(model, X, y)
        texts.append(f"{name.capitalize()} data\n{text}")
        (out / f"{name}_report.txt").write_text(text)
    _write_json(out / "report.json", doc)
    if args.format == "json":
        sys.stdout.write((out / "report.json").read_text())
    else:
        sys.stdout.write("\n".join(texts))
    return 0


def _patient_row(manifest: dict, demographics: Path | None, patient_id: str | None) -> dict:
    """Raw demographic inputs for one patient, in the training column space."""
    if demographics is None or patient_id is None:
        return {}
    df = pd.read_csv(demographics, dtype=str)
    hit = df[df["patient_id"] == patient_id]
    if hit.empty:
        raise InvalidInput(f"patient {patient_id!r} not in {demographics}")
    rec = hit.iloc[0]
    row = {}
    for col in manifest["feature_columns"]:
        if "=" in col:
            base, value = col.split("=", 1)
            if base in rec.index and not pd.isna(rec[base]):
                row[col] = 1.0 if str(rec[base]) == value else 0.0
        elif col in rec.index and not pd.isna(rec[col]):
            try:
                row[col] = float(rec[col])
            except ValueError:
                pass
    return row


def cmd_infer(args, cfg: AppConfig) -> int:
    data_dir = Path(args.dataset or cfg.paths.dataset_dir)
    manifest = _load_manifest(data_dir)
    model = nn.load_weights(Path(args.model or cfg.paths.model_path))
    fs = args.sample_rate or manifest["filter"]["sample_rate_hz"]
    record = ds.read_trace_csv(args.trace, fs)
    filt = design_butterworth_lowpass(manifest["filter"]["order"], manifest["filter"]["cutoff_hz"], fs)
    feats = extract_features(record, filt).to_row()
    raw = _patient_row(manifest, Path(args.demographics) if args.demographics else None, args.patient_id)
    raw.update({k: v for k, v in feats.items() if k in manifest["feature_columns"]})
    stats = ds.NormStats.from_dict(manifest["norm_stats"])
    x = np.zeros((1, len(stats.columns)))
    imputed = []
    for j, (c, m, s) in enumerate(zip(stats.columns, stats.mean, stats.std)):
        if c in raw:
            x[0, j] = (raw[c] - m) / s
        else:
            imputed.append(c)  # left at 0, the training mean after normalization
    p = float(nn.predict_proba(model, x)[0])
    label = int(p >= args.threshold)
    _emit({"trace": str(args.trace), "probability": p, "class": label, "class_name": CLASS_NAMES[label],
           "imputed_columns": imputed})
    return 0


# -- signal ------------------------------------------------------------------

def cmd_filter(args, cfg: AppConfig) -> int:
    fs = args.sample_rate or cfg.signal.sample_rate_hz
    record = ds.read_trace_csv(args.trace, fs)
    filt = _filter(cfg, fs)
    y = apply_filter(filt, record.samples) if args.causal else apply_zero_phase(filt, record.samples)
    ds.write_trace_csv(args.out, y)
    _emit({"out": str(args.out), "samples": int(y.size), "zero_phase": not args.causal,
           "cutoff_hz": filt.cutoff_hz, "order": filt.order})
    return 0


def cmd_stats(args, cfg: AppConfig) -> int:
    path = Path(args.input)
    if path.is_dir():
        parts = [ds.read_split_csv(path / f) for _, f in SPLIT_FILES if (path / f).exists()]
        parts = [p for p in parts if not p.empty] or parts[:1]
        if not parts:
            raise DataIOError(f"no split files in {path}")
        rows = pd.concat(parts, ignore_index=True)
    else:
        rows = pd.read_csv(path)
    summary = ds.summarize(rows).to_dict()
    if args.out:
        _write_json(Path(args.out), summary)
    _emit(summary)
    return 0


# -- telemetry ----------------------------------------------------------------

def cmd_simulate(args, cfg: AppConfig) -> int:
    sim_cfg = cfg.simulate
    fs = args.sample_rate or cfg.signal.sample_rate_hz
    record = ds.read_trace_csv(args.trace, fs)
    name = args.device or record.record_id
    fault = FaultConfig(sim_cfg.corrupt_prob, sim_cfg.drop_prob, derive_seed(cfg.seed, f"simulate:{name}"))
    sim = DeviceSimulator(record, sim_cfg.chunk, device_id=make_id(f"device:{name}"),
                          session_id=make_id(f"session:{name}:{record.record_id}"),
                          gain_uv_per_lsb=sim_cfg.gain_uv_per_lsb, fault=fault)
    if args.out:
        Path(args.out).write_bytes(b"".join(sim.stream(sim_cfg.pacing)))
    else:
        sim.send(cfg.service.host, cfg.service.port, sim_cfg.pacing)
    rep = sim.report
    _emit({"session_id": sim.session_id.hex(), "frames_total": rep.frames_total, "sent": len(rep.sent),
           "corrupted": rep.corrupted, "dropped": rep.dropped, "bytes_sent": rep.bytes_sent})
    return 0


def cmd_serve(args, cfg: AppConfig) -> int:
    s = cfg.service
    server = IngestServer(ServiceConfig(s.host, s.port, cfg.paths.storage_dir, s.max_sessions, s.max_frame_size))
    server.start()
    host, port = server.address
    print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
    deadline = time.monotonic() + args.duration if args.duration else None
    try:
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.1)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    _emit(server.stats())
    return 0


def cmd_export(args, cfg: AppConfig) -> int:
    record, gaps = export_session(args.log)
    ds.write_trace_csv(args.out, record.samples)
    doc = {"out": str(args.out), "samples": int(record.samples.size), "sample_rate_hz": record.sample_rate_hz,
           "gaps": gaps.to_dict()}
    if args.gaps:
        _write_json(Path(args.gaps), gaps.to_dict())
    _emit(doc)
    return 0


# -- parser ------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    add_config_flags(common)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="ecgmon", description="ECG monitoring pipeline: telemetry, features, training, reports.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    dset = sub.add_parser("dataset", help="build or synthesize datasets")
    dsub = dset.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    b = dsub.add_parser("build", parents=[common], help="load, merge, clean, oversample, split and normalize")
    b.add_argument("--demographics", help="demographics CSV (default <data_root>/demographics.csv)")
    b.add_argument("--ecg-root", help="folder with normal/ and abnormal/ traces (default <data_root>/ecg)")
    b.add_argument("--out", help="output folder (default paths.dataset_dir)")
    b.set_defaults(func=cmd_dataset_build)
    s = dsub.add_parser("synth", parents=[common], help="write a synthetic labeled corpus")
    s.add_argument("--out", help="corpus root (default paths.data_root)")
    s.add_argument("--n-normal", type=int, default=60)
    s.add_argument("--n-abnormal", type=int, default=40)
    s.add_argument("--duration", type=float, default=20.0, help="seconds per trace")
    s.set_defaults(func=cmd_dataset_synth)

    t = sub.add_parser("train", parents=[common], help="train the classifier on a built dataset")
    t.add_argument("--dataset", help="dataset folder (default paths.dataset_dir)")
    t.add_argument("--model", help="weights file to write (default paths.model_path)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="classification reports and confusion matrices")
    e.add_argument("--dataset")
    e.add_argument("--model")
    e.add_argument("--out", help="report folder (default paths.report_dir)")
    e.add_argument("--format", choices=("text", "json"), default="text", help="stdout format")
    e.add_argument("--from-confusion", metavar="A,B,C,D",
                   help="render a report from row-major counts (rows true, columns predicted)")
    e.add_argument("--class-names", metavar="N0,N1", help="names for --from-confusion rows")
    e.add_argument("--swap", action="store_true", help="reverse the class order of --from-confusion")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("infer", parents=[common], help="probability and class for one trace")
    i.add_argument("trace", help="trace CSV (index,millivolts)")
    i.add_argument("--dataset", help="dataset folder holding manifest.json")
    i.add_argument("--model")
    i.add_argument("--sample-rate", type=int)
    i.add_argument("--demographics", help="demographics CSV for --patient-id")
    i.add_argument("--patient-id")
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("filter", parents=[common], help="lowpass a trace and write it as CSV")
    f.add_argument("trace")
    f.add_argument("--out", required=True)
    f.add_argument("--sample-rate", type=int)
    f.add_argument("--causal", action="store_true", help="single forward pass instead of zero phase")
    f.set_defaults(func=cmd_filter)

    st = sub.add_parser("stats", parents=[common], help="summaries of a CSV table or dataset folder")
    st.add_argument("input")
    st.add_argument("--out", help="also write the summary JSON here")
    st.set_defaults(func=cmd_stats)

    sm = sub.add_parser("simulate", parents=[common], help="stream a trace as a simulated device")
    sm.add_argument("trace")
    sm.add_argument("--sample-rate", type=int)
    sm.add_argument("--device", help="device name (ids are derived from it)")
    sm.add_argument("--out", help="write the byte stream to a file instead of connecting")
    sm.set_defaults(func=cmd_simulate)

    sv = sub.add_parser("serve", parents=[common], help="run the ingestion service")
    sv.add_argument("--duration", type=float, help="stop after this many seconds (default: until Ctrl-C)")
    sv.set_defaults(func=cmd_serve)

    ex = sub.add_parser("export", parents=[common], help="reassemble a session log into a trace CSV")
    ex.add_argument("log", help="<session>.eclog file")
    ex.add_argument("--out", required=True)
    ex.add_argument("--gaps", help="also write the gap report JSON here")
    ex.set_defaults(func=cmd_export)
    return p


def _error_line(exc: BaseException, code: str, stage: str | None) -> str:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    return f'error code={code} stage={stage or "-"} message="{msg}"'


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    stage = args.command if args.command != "dataset" else f"dataset {args.dataset_command}"
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except EcgMonError as exc:
        print(_error_line(exc, exc.code, exc.stage or stage), file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(_error_line(exc, "io-error" if isinstance(exc, OSError) else "invalid-input", stage), file=sys.stderr)
    return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
