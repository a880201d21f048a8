"""Dataset assembly: load, merge demographics with ECG features, clean,
rebalance, split and normalize.

Rows are carried in :class:`pandas.DataFrame` objects. Identifier columns
(``patient_id``, ``record_id``) travel with the rows but are never model
inputs; ``label`` is 1 for abnormal and 0 for normal.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    ClassMismatch,
    DataIOError,
    EcgMonError,
    EmptyDataset,
    InvalidInput,
    InvalidParameter,
    SchemaError,
    StratificationError,
)
from .features import extract_features
from .seeding import derive_seed
from .signal import BiquadCascade, ClassLabel, EcgRecord

log = logging.getLogger(__name__)

ID_COLUMNS = ("patient_id", "record_id")
LABEL = "label"
CLASS_DIRS = {"normal": ClassLabel.NORMAL, "abnormal": ClassLabel.ABNORMAL}
DEFAULT_SAMPLE_RATE_HZ = 360
MODIFIED_Z_LIMIT = 3.5


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.70
    test_fraction: float = 0.30
    validation_fraction_of_train: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "test_fraction", "validation_fraction_of_train"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidParameter(f"{name} must lie in (0, 1), got {v}")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-12:
            raise InvalidParameter("train_fraction + test_fraction must equal 1")


@dataclass
class Sources:
    patients: pd.DataFrame
    records: list[EcgRecord]
    warnings: list[str] = field(default_factory=list)


def _read_trace(path: Path, fs: int, label: ClassLabel) -> EcgRecord:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["index", "millivolts"]:
            raise SchemaError(f"{path.name}: expected header 'index,millivolts'")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise InvalidInput(f"{path.name}:{lineno}: expected two columns")
            try:
                v = float(row[1])
            except ValueError:
                raise InvalidInput(f"{path.name}:{lineno}: non-numeric sample {row[1]!r}") from None
            values.append(v)
    stem = path.stem
    patient_ref = stem.split("__", 1)[0] if "__" in stem else ""
    return EcgRecord(stem, patient_ref, fs, np.asarray(values), label)


def read_trace_csv(path, sample_rate_hz: int, label=None) -> EcgRecord:
    rec = _read_trace(Path(path), sample_rate_hz, ClassLabel.NORMAL)
    return EcgRecord(rec.record_id, rec.patient_ref, sample_rate_hz, rec.samples, label)


def write_trace_csv(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "millivolts"])
        for i, v in enumerate(np.asarray(samples, dtype=np.float64)):
            w.writerow([i, repr(float(v))])


def load_sources(demographics_path, ecg_root) -> Sources:
    """Read the demographics table and every trace under ``normal/`` and ``abnormal/``.

    Unreadable traces are reported in ``warnings`` and skipped.
    """
    demographics_path = Path(demographics_path)
    ecg_root = Path(ecg_root)
    if not demographics_path.is_file():
        raise DataIOError(f"demographics file not found: {demographics_path}")
    patients = pd.read_csv(demographics_path, dtype={"patient_id": str}, keep_default_na=True)
    if len(patients.columns) == 0 or patients.columns[0] != "patient_id":
        raise SchemaError("demographics header must start with 'patient_id'")
    for required in ("age", "sex"):
        if required not in patients.columns:
            raise SchemaError(f"demographics missing column {required!r}")
    if LABEL in patients.columns:
        patients[LABEL] = [
            None if pd.isna(v) else int(ClassLabel.parse(v)) for v in patients[LABEL]
        ]

    warnings: list[str] = []
    age = pd.to_numeric(patients["age"], errors="coerce")
    bad_age = age.notna() & ~((age > 0) & (age < 130))
    if bad_age.any():
        warnings.append(f"{int(bad_age.sum())} patient(s) with age outside (0, 130) treated as missing")
    patients["age"] = age.where(~bad_age)
    records: list[EcgRecord] = []
    for name, label in CLASS_DIRS.items():
        d = ecg_root / name
        if not d.is_dir():
            raise DataIOError(f"missing trace directory: {d}")
        fs = DEFAULT_SAMPLE_RATE_HZ
        meta = d / "meta.json"
        if meta.is_file():
            fs = int(json.loads(meta.read_text())["sample_rate_hz"])
        else:
            warnings.append(f"{name}: no meta.json, assuming {fs} Hz")
        files = sorted(d.glob("*.csv"))
        if not files:
            warnings.append(f"{name}: no traces found")
        for f in files:
            try:
                records.append(_read_trace(f, fs, label))
            except (EcgMonError, OSError, UnicodeDecodeError) as exc:
                warnings.append(f"{name}/{f.name}: rejected ({exc})")
    for w in warnings:
        log.warning(w)
    return Sources(patients, records, warnings)


def featurize(records, filt: BiquadCascade) -> tuple[pd.DataFrame, list[str]]:
    """Feature table for all records; records that fail extraction are skipped."""
    rows = []
    failures = []
    for rec in records:
        try:
            fv = extract_features(rec, filt)
        except EcgMonError as exc:
            failures.append(f"{rec.record_id}: {exc.code} at {exc.stage}: {exc}")
            continue
        row = {"record_id": rec.record_id, "patient_ref": rec.patient_ref, LABEL: int(rec.label)}
        row.update(fv.to_row())
        rows.append(row)
    return pd.DataFrame(rows), failures


def _one_hot(patients: pd.DataFrame) -> pd.DataFrame:
    out = pd.DataFrame({"patient_id": patients["patient_id"].astype(str)})
    for col in patients.columns:
        if col in ("patient_id", LABEL):
            continue
        numeric = pd.to_numeric(patients[col], errors="coerce")
        if numeric.notna().sum() == patients[col].notna().sum():
            out[col] = numeric.astype(np.float64)
            continue
        values = patients[col].astype(object)
        cats = sorted({str(v) for v in values if not pd.isna(v)})
        missing = values.isna().to_numpy()
        for cat in cats:
            enc = (values.astype(str) == cat).astype(np.float64).to_numpy()
            enc[missing] = np.nan
            out[f"{col}={cat}"] = enc
    return out


def merge_and_label(patients: pd.DataFrame, feature_rows: pd.DataFrame, seed: int) -> pd.DataFrame:
    """Pair ECG feature rows with patients of the same class.

    Traces whose ``patient_ref`` names a known patient are linked directly.
    The rest are paired cyclically against a seeded shuffle of the class's
    patients, after shuffling the traces with the same seed. The merged set
    is shuffled once more and re-indexed.
    """
    if len(feature_rows) == 0 or len(patients) == 0:
        raise ClassMismatch("both patients and feature rows must be nonempty")
    encoded = _one_hot(patients)
    has_label = LABEL in patients.columns
    patient_labels = (
        [None if pd.isna(v) else int(v) for v in patients[LABEL]] if has_label else [None] * len(patients)
    )
    by_id = {pid: i for i, pid in enumerate(encoded["patient_id"])}
    rng = np.random.default_rng(seed)

    pieces = []
    for label in (ClassLabel.NORMAL, ClassLabel.ABNORMAL):
        feats = feature_rows[feature_rows[LABEL] == int(label)].reset_index(drop=True)
        pool = [i for i, lab in enumerate(patient_labels) if lab is None or lab == int(label)]
        if len(feats) == 0:
            continue
        pool = [pool[i] for i in rng.permutation(len(pool))]
        feats = feats.iloc[rng.permutation(len(feats))].reset_index(drop=True)
        assigned = []
        cyclic = 0
        for ref, lab in zip(feats["patient_ref"], feats[LABEL]):
            if ref and ref in by_id:
                i = by_id[ref]
                if patient_labels[i] is not None and patient_labels[i] != lab:
                    raise ClassMismatch(f"patient {ref} labelled {patient_labels[i]} but trace folder says {lab}")
                assigned.append(i)
            else:
                if not pool:
                    raise ClassMismatch(f"no {label.name.lower()} patients to pair with trace rows")
                assigned.append(pool[cyclic % len(pool)])
                cyclic += 1
        demo = encoded.iloc[assigned].reset_index(drop=True)
        merged = pd.concat([demo, feats.drop(columns=["patient_ref", LABEL])], axis=1)
        merged[LABEL] = int(label)
        pieces.append(merged)

    rows = pd.concat(pieces, ignore_index=True)
    rows = rows.iloc[rng.permutation(len(rows))].reset_index(drop=True)
    front = [c for c in ID_COLUMNS if c in rows.columns]
    rest = [c for c in rows.columns if c not in front and c != LABEL]
    return rows[front + rest + [LABEL]]


def feature_columns(rows: pd.DataFrame) -> list[str]:
    return [c for c in rows.columns if c not in ID_COLUMNS and c != LABEL]


def _continuous_columns(rows: pd.DataFrame) -> list[str]:
    return [c for c in feature_columns(rows) if "=" not in c]


def _outlier_mask(rows: pd.DataFrame) -> np.ndarray:
    """Modified z-score test, with median and MAD taken within each class.

    Pooling the classes would flag the tail of the smaller class as
    outlying simply because it sits away from the majority's median.
    """
    bad = np.zeros(len(rows), dtype=bool)
    if LABEL in rows.columns:
        groups = [np.flatnonzero((rows[LABEL] == v).to_numpy()) for v in pd.unique(rows[LABEL])]
    else:
        groups = [np.arange(len(rows))]
    for col in _continuous_columns(rows):
        values = rows[col].to_numpy(dtype=np.float64)
        for idx in groups:
            x = values[idx]
            med = np.median(x)
            mad = np.median(np.abs(x - med))
            if mad == 0.0:
                continue
            bad[idx] |= np.abs(0.6745 * (x - med) / mad) > MODIFIED_Z_LIMIT
    return bad


def clean(rows: pd.DataFrame) -> tuple[pd.DataFrame, dict]:
    """Drop missing, duplicate and outlying rows until nothing changes.

    Outliers are rows where any continuous column has a modified z-score
    (median/MAD based, per class) above 3.5; columns with zero MAD are
    skipped.
    Repeating until a fixed point makes the operation idempotent.
    """
    counts = {"missing": 0, "duplicate": 0, "outlier": 0}
    cur = rows.reset_index(drop=True)
    while True:
        before = len(cur)
        missing = cur.isna().any(axis=1).to_numpy()
        counts["missing"] += int(missing.sum())
        cur = cur[~missing]
        dup = cur.duplicated(keep="first").to_numpy()
        counts["duplicate"] += int(dup.sum())
        cur = cur[~dup].reset_index(drop=True)
        if len(cur) == 0:
            break
        out = _outlier_mask(cur)
        counts["outlier"] += int(out.sum())
        cur = cur[~out].reset_index(drop=True)
        if len(cur) == before:
            break
    if len(cur) == 0:
        raise EmptyDataset("cleaning removed every row")
    counts["remaining"] = len(cur)
    return cur, counts


@dataclass
class NormStats:
    columns: list[str]
    mean: list[float]
    std: list[float]
    constant: list[str]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(list(d["columns"]), [float(v) for v in d["mean"]], [float(v) for v in d["std"]], list(d["constant"]))


def normalize_fit(train_rows: pd.DataFrame) -> NormStats:
    """Per-column mean and population std from the training rows only.

    Constant columns are flagged and left untouched by ``normalize_apply``.
    """
    if len(train_rows) == 0:
        raise EmptyDataset("cannot fit normalization on an empty training set")
    cols = feature_columns(train_rows)
    means, stds, constant = [], [], []
    for c in cols:
        x = train_rows[c].to_numpy(dtype=np.float64)
        sd = float(np.std(x))
        if sd == 0.0:
            constant.append(c)
            means.append(0.0)
            stds.append(1.0)
        else:
            means.append(float(np.mean(x)))
            stds.append(sd)
    return NormStats(cols, means, stds, constant)


def normalize_apply(stats: NormStats, rows: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in stats.columns if c not in rows.columns]
    if missing:
        raise SchemaError(f"rows lack normalized columns: {missing}")
    out = rows.copy()
    for c, m, s in zip(stats.columns, stats.mean, stats.std):
        out[c] = (out[c].to_numpy(dtype=np.float64) - m) / s
    return out


def oversample_minority(rows: pd.DataFrame, seed: int) -> pd.DataFrame:
    """Duplicate randomly chosen minority rows (with replacement) until classes balance."""
    counts = rows[LABEL].value_counts()
    if len(counts) < 2 or counts.iloc[0] == counts.iloc[-1]:
        return rows.reset_index(drop=True)
    minority = int(counts.idxmin())
    deficit = int(counts.max() - counts.min())
    pool = np.flatnonzero(rows[LABEL].to_numpy() == minority)
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool, size=deficit, replace=True)
    return pd.concat([rows, rows.iloc[picks]], ignore_index=True)


@dataclass
class Splits:
    train: pd.DataFrame
    validation: pd.DataFrame
    test: pd.DataFrame


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(rows: pd.DataFrame, config: SplitConfig) -> Splits:
    """Per-class train/test split, then a per-class validation slice of train.

    The train share of each class is floored; the validation share of each
    class's training rows is rounded half up.
    """
    labels = rows[LABEL].to_numpy()
    classes = sorted(set(int(v) for v in labels))
    if len(classes) < 2:
        raise StratificationError("stratified split needs both classes present")
    rng = np.random.default_rng(config.seed)
    parts = {"train": [], "validation": [], "test": []}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(math.floor(config.train_fraction * idx.size))
        n_val = _round_half_up(config.validation_fraction_of_train * n_train)
        if n_train - n_val < 1 or idx.size - n_train < 1:
            raise StratificationError(f"class {c} has too few rows ({idx.size}) to split")
        parts["validation"].append(idx[:n_val])
        parts["train"].append(idx[n_val:n_train])
        parts["test"].append(idx[n_train:])
    out = {}
    for name, chunks in parts.items():
        idx = np.concatenate(chunks)
        idx = idx[rng.permutation(idx.size)]
        out[name] = rows.iloc[idx].reset_index(drop=True)
    return Splits(out["train"], out["validation"], out["test"])


@dataclass
class DatasetSummary:
    n_rows: int = 0
    categorical: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(rows: pd.DataFrame) -> DatasetSummary:
    """Value counts for categorical columns and min/max/mean/std for numeric ones.

    One-hot groups (``col=value``) are folded back into a single categorical.
    """
    if len(rows) == 0:
        return DatasetSummary()
    summary = DatasetSummary(n_rows=len(rows))
    for col in rows.columns:
        if col in ID_COLUMNS:
            continue
        series = rows[col]
        if "=" in col:
            base, value = col.split("=", 1)
            n = int((series.to_numpy(dtype=np.float64) == 1.0).sum())
            summary.categorical.setdefault(base, {})[value] = n
        elif col == LABEL or not pd.api.types.is_numeric_dtype(series):
            vc = series.astype(str).value_counts()
            summary.categorical[col] = {str(k): int(vc[k]) for k in sorted(vc.index)}
        else:
            x = series.to_numpy(dtype=np.float64)
            x = x[np.isfinite(x)]
            if x.size == 0:
                continue
            summary.numeric[col] = {
                "min": float(x.min()),
                "max": float(x.max()),
                "mean": float(x.mean()),
                "std": float(x.std()),
            }
    return summary


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def read_split_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"patient_id": str, "record_id": str}, float_precision="round_trip")


def build_dataset(
    demographics_path,
    ecg_root,
    out_dir,
    filt: BiquadCascade,
    split: SplitConfig,
    seed: int,
) -> dict:
    """Run load, featurize, merge, clean, oversample, split and normalize; write outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = load_sources(demographics_path, ecg_root)
    feats, failures = featurize(sources.records, filt)
    if len(feats) == 0:
        raise EmptyDataset("no record yielded features")
    merged = merge_and_label(sources.patients, feats, seed=_sub(seed, "merge"))
    cleaned, clean_counts = clean(merged)
    balanced = oversample_minority(cleaned, seed=_sub(seed, "oversample"))
    splits = stratified_split(
        balanced,
        SplitConfig(split.train_fraction, split.test_fraction, split.validation_fraction_of_train, _sub(seed, "split")),
    )
    stats = normalize_fit(splits.train)
    files = {}
    for name, part in (("train", splits.train), ("val", splits.validation), ("test", splits.test)):
        path = out_dir / f"{name}.csv"
        _write_csv(normalize_apply(stats, part), path)
        files[name] = path.name
    manifest = {
        "seed": int(seed),
        "counts": {
            "records_loaded": len(sources.records),
            "records_featurized": int(len(feats)),
            "merged": int(len(merged)),
            "clean": clean_counts,
            "after_oversampling": int(len(balanced)),
            "train": int(len(splits.train)),
            "val": int(len(splits.validation)),
            "test": int(len(splits.test)),
            "train_by_class": _class_counts(splits.train),
            "val_by_class": _class_counts(splits.validation),
            "test_by_class": _class_counts(splits.test),
        },
        "feature_columns": stats.columns,
        "norm_stats": stats.to_dict(),
        "filter": {"order": filt.order, "cutoff_hz": filt.cutoff_hz, "sample_rate_hz": filt.sample_rate_hz},
        "split": {
            "train_fraction": split.train_fraction,
            "test_fraction": split.test_fraction,
            "validation_fraction_of_train": split.validation_fraction_of_train,
        },
        "files": files,
        "warnings": sources.warnings + failures,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _class_counts(df: pd.DataFrame) -> dict:
    vc = df[LABEL].value_counts()
    return {str(int(k)): int(vc[k]) for k in sorted(vc.index)}


def _sub(seed: int, label: str) -> int:
    return derive_seed(seed, label)


def xy(rows: pd.DataFrame, columns=None) -> tuple[np.ndarray, np.ndarray]:
    """Model matrix and label vector from split rows."""
    columns = feature_columns(rows) if columns is None else list(columns)
    X = rows[columns].to_numpy(dtype=np.float64)
    y = rows[LABEL].to_numpy(dtype=np.float64)
    return X, y
