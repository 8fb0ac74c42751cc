"""Patient records, JSONL ingestion, synthetic generation and batching."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DAYS_PER_UNIT = {"day": 1.0, "year": 365.25}


class SchemaError(ValueError):
    """A record or config violates the documented schema."""


@dataclass
class DatasetConfig:
    n_codes: int
    indicators: list[str]
    time_unit: str = "year"
    n_classes: int = 2
    n_u_max: int = 8

    @property
    def n_indicators(self) -> int:
        return len(self.indicators)

    def validate(self) -> None:
        if self.n_codes < 1 or self.n_classes < 2 or self.n_u_max < 1:
            raise SchemaError("n_codes, n_u_max must be >= 1 and n_classes >= 2")
        if not self.indicators:
            raise SchemaError("indicators must be a nonempty list")
        if self.time_unit not in DAYS_PER_UNIT:
            raise SchemaError(f"time_unit must be one of {sorted(DAYS_PER_UNIT)}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        try:
            cfg = cls(n_codes=int(d["n_codes"]), indicators=[str(s) for s in d["indicators"]],
                      time_unit=d.get("time_unit", "year"),
                      n_classes=int(d.get("n_classes", 2)), n_u_max=int(d.get("n_u_max", 8)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"dataset config: {exc}") from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Visit:
    time: float
    diagnoses: list[int]
    labs: list[list[float]]


@dataclass
class PatientRecord:
    patient_id: str
    visits: list[Visit]
    label: int

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    def deltas(self, time_unit: str) -> np.ndarray:
        """Gap to the previous visit in ``time_unit``; the first entry is 0."""
        t = np.array([v.time for v in self.visits], dtype=np.float64)
        d = np.diff(t, prepend=t[0])
        return d / DAYS_PER_UNIT[time_unit]

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "label": self.label,
                "visits": [{"time": v.time, "diagnoses": list(v.diagnoses),
                            "labs": [list(w) for w in v.labs]} for v in self.visits]}


def validate_record(rec: PatientRecord, cfg: DatasetConfig) -> None:
    pid = rec.patient_id

    def fail(fld: str, msg: str):
        raise SchemaError(f"patient {pid}: {fld}: {msg}")

    if not isinstance(rec.label, int) or not 0 <= rec.label < cfg.n_classes:
        fail("label", f"must be an int in [0, {cfg.n_classes})")
    if not rec.visits:
        fail("visits", "must be nonempty")
    prev = None
    for i, v in enumerate(rec.visits):
        if not math.isfinite(v.time):
            fail(f"visits[{i}].time", "must be finite")
        if prev is not None and v.time <= prev:
            fail(f"visits[{i}].time", "visits must be strictly increasing in time")
        prev = v.time
        if not v.diagnoses:
            fail(f"visits[{i}].diagnoses", "at least one code is required")
        if len(set(v.diagnoses)) != len(v.diagnoses):
            fail(f"visits[{i}].diagnoses", "codes must be unique within a visit")
        for c in v.diagnoses:
            if not isinstance(c, int) or not 0 <= c < cfg.n_codes:
                fail(f"visits[{i}].diagnoses", f"code {c!r} outside [0, {cfg.n_codes})")
        if len(v.labs) != cfg.n_indicators:
            fail(f"visits[{i}].labs", f"expected {cfg.n_indicators} waveforms, got {len(v.labs)}")
        for j, w in enumerate(v.labs):
            if not all(isinstance(x, (int, float)) and math.isfinite(x) for x in w):
                fail(f"visits[{i}].labs[{j}]", "samples must be finite numbers")


def record_from_dict(d: dict) -> PatientRecord:
    pid = str(d.get("patient_id", "?")) if isinstance(d, dict) else "?"
    try:
        visits = [Visit(time=float(v["time"]), diagnoses=list(v["diagnoses"]),
                        labs=[[float(x) for x in w] for w in v["labs"]])
                  for v in d["visits"]]
        label = d["label"]
        if isinstance(label, bool):
            raise TypeError("label must be an int")
        return PatientRecord(patient_id=str(d["patient_id"]), visits=visits, label=label)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"patient {pid}: malformed record ({exc})") from None


def cap_diagnoses(records: list[PatientRecord], n_u_max: int) -> list[PatientRecord]:
    """Keep at most ``n_u_max`` codes per visit, preferring dataset-frequent ones."""
    freq = Counter(c for r in records for v in r.visits for c in v.diagnoses)
    for r in records:
        for v in r.visits:
            if len(v.diagnoses) > n_u_max:
                keep = sorted(v.diagnoses, key=lambda c: (-freq[c], c))[:n_u_max]
                v.diagnoses = [c for c in v.diagnoses if c in set(keep)]
    return records


def load_jsonl(path, cfg: DatasetConfig) -> list[PatientRecord]:
    """Read and validate one patient per line. Blank lines are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            rec = record_from_dict(obj)
            validate_record(rec, cfg)
            records.append(rec)
    return cap_diagnoses(records, cfg.n_u_max)


def dump_jsonl(records: list[PatientRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    n_patients: int = 2000
    n_codes: int = 60
    n_indicators: int = 4
    max_visits: int = 6
    n_u_max: int = 8
    zipf_a: float = 1.1
    gap_days_min: float = 14.0
    gap_days_max: float = 1500.0
    wave_len_min: int = 12
    wave_len_max: int = 48
    walk_step: float = 0.3
    missing_rate: float = 0.0
    marker_code: int = 5
    marker_indicator: int = 0
    marker_rate: float = 0.4
    beta: float = 10.0
    prevalence: float = 0.5
    time_unit: str = "year"
    n_classes: int = 2
    indicator_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.indicator_names:
            self.indicator_names = [f"ind{i}" for i in range(self.n_indicators)]

    def validate(self) -> None:
        ints = (self.n_patients, self.n_codes, self.n_indicators, self.max_visits,
                self.n_u_max, self.wave_len_min)
        if min(ints) < 1 or self.max_visits < 2:
            raise SchemaError("synthetic config: sizes must be positive and max_visits >= 2")
        if self.wave_len_max < self.wave_len_min or self.gap_days_max < self.gap_days_min \
                or self.gap_days_min <= 0:
            raise SchemaError("synthetic config: invalid length or gap range")
        if not 0 <= self.marker_code < self.n_codes \
                or not 0 <= self.marker_indicator < self.n_indicators:
            raise SchemaError("synthetic config: marker code/indicator out of range")
        if not 0 < self.prevalence < 1 or self.n_classes != 2:
            raise SchemaError("synthetic config: prevalence must be in (0,1) and n_classes == 2")
        if len(self.indicator_names) != self.n_indicators:
            raise SchemaError("synthetic config: indicator_names length mismatch")
        if self.time_unit not in DAYS_PER_UNIT:
            raise SchemaError(f"time_unit must be one of {sorted(DAYS_PER_UNIT)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        try:
            cfg = cls(**known)
        except TypeError as exc:
            raise SchemaError(f"synthetic config: {exc}") from None
        cfg.validate()
        return cfg

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(n_codes=self.n_codes, indicators=list(self.indicator_names),
                             time_unit=self.time_unit, n_classes=self.n_classes,
                             n_u_max=self.n_u_max)


def g2(delta):
    return 1.0 / np.log(np.e + np.asarray(delta, dtype=np.float64))


def planted_feature(records: list[PatientRecord], cfg: SynthConfig) -> np.ndarray:
    """Recency-weighted sum of (marker code present) x (standardized marker lab mean)."""
    means = []
    for r in records:
        for v in r.visits:
            w = v.labs[cfg.marker_indicator]
            means.append(float(np.mean(w)) if len(w) else np.nan)
    means = np.array(means)
    mu, sd = np.nanmean(means), np.nanstd(means)
    sd = sd if sd > 0 else 1.0
    z = np.nan_to_num((means - mu) / sd, nan=0.0)
    out = np.zeros(len(records))
    k = 0
    scale = DAYS_PER_UNIT[cfg.time_unit]
    for p, r in enumerate(records):
        t_now = r.visits[-1].time
        for v in r.visits:
            if cfg.marker_code in v.diagnoses:
                out[p] += g2((t_now - v.time) / scale) * z[k]
            k += 1
    return out


def _fit_prevalence(logit: np.ndarray, u: np.ndarray, target: float,
                    tol: float = 0.02, iters: int = 200) -> np.ndarray:
    """Bisect an intercept so the realized prevalence is within ``tol`` of target."""
    def labels(b):
        return (u < 1.0 / (1.0 + np.exp(-(logit + b)))).astype(int)

    lo, hi = -60.0, 60.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if labels(mid).mean() < target:
            lo = mid
        else:
            hi = mid
    y = min((labels(lo), labels(hi)), key=lambda y: abs(y.mean() - target))
    # small cohorts can only hit multiples of 1/n
    if abs(y.mean() - target) > max(tol, 0.5 / len(u) + 1e-12):
        raise SchemaError(f"could not reach prevalence {target} (got {y.mean():.3f})")
    return y


def generate_synthetic(cfg: SynthConfig, seed: int) -> list[PatientRecord]:
    """Deterministic synthetic cohort with a planted code x lab x recency signal."""
    cfg.validate()
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    ranks = np.arange(1, cfg.n_codes + 1, dtype=np.float64)
    code_p = ranks ** -cfg.zipf_a
    code_p /= code_p.sum()
    lo_gap, hi_gap = math.log(cfg.gap_days_min), math.log(cfg.gap_days_max)

    records = []
    for p in range(cfg.n_patients):
        n_vis = int(rng.integers(2, cfg.max_visits + 1))
        gaps = np.exp(rng.uniform(lo_gap, hi_gap, size=n_vis - 1))
        times = np.round(np.concatenate([[0.0], np.cumsum(gaps)]), 3)
        baseline = rng.normal(0.0, 1.0, size=cfg.n_indicators)
        visits = []
        for t in times:
            n_u = int(rng.integers(1, cfg.n_u_max + 1))
            codes = list(rng.choice(cfg.n_codes, size=n_u, replace=False, p=code_p))
            if cfg.marker_code not in codes and rng.random() < cfg.marker_rate:
                codes[int(rng.integers(n_u))] = cfg.marker_code
            labs = []
            for i in range(cfg.n_indicators):
                length = int(rng.integers(cfg.wave_len_min, cfg.wave_len_max + 1))
                start = baseline[i] + rng.normal(0.0, 1.0)
                walk = start + np.cumsum(rng.normal(0.0, cfg.walk_step, size=length))
                if rng.random() < cfg.missing_rate:
                    walk = walk[:0]
                labs.append([round(float(x), 4) for x in walk])
            visits.append(Visit(time=float(t), diagnoses=[int(c) for c in codes], labs=labs))
        records.append(PatientRecord(patient_id=f"p{p:05d}", visits=visits, label=0))

    feature = planted_feature(records, cfg)
    u = rng.random(len(records))
    labels = _fit_prevalence(cfg.beta * feature, u, cfg.prevalence)
    for r, y in zip(records, labels):
        r.label = int(y)
    return records


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    records: list[PatientRecord]

    def __post_init__(self):
        if len({r.n_visits for r in self.records}) > 1:
            raise ValueError("batch members must share the same visit count")

    @property
    def n_visits(self) -> int:
        return self.records[0].n_visits

    def __len__(self) -> int:
        return len(self.records)


def group_by_visits(records: list[PatientRecord], batch_size: int | None = None) -> list[Batch]:
    """Group records with equal visit count, ordered by visit count then input order."""
    groups: dict[int, list[PatientRecord]] = {}
    for r in records:
        groups.setdefault(r.n_visits, []).append(r)
    batches = []
    for n in sorted(groups):
        members = groups[n]
        step = batch_size or len(members)
        for i in range(0, len(members), step):
            batches.append(Batch(members[i:i + step]))
    return batches


def split_records(records: list[PatientRecord], ratio: float, seed: int):
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    if len(records) < 2:
        raise ValueError("need at least 2 records to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_train = min(max(int(round(ratio * len(records))), 1), len(records) - 1)
    train = [records[i] for i in sorted(order[:n_train])]
    test = [records[i] for i in sorted(order[n_train:])]
    return train, test


def split_and_batch(records: list[PatientRecord], ratio: float, seed: int,
                    batch_size: int | None = 32) -> tuple[list[Batch], list[Batch]]:
    train, test = split_records(records, ratio, seed)
    return group_by_visits(train, batch_size), group_by_visits(test, batch_size)


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
