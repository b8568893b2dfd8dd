"""Records, preprocessing into 9x9 matrices, client partitioning and synthetic data."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CsvFormatError, DataError

logger = logging.getLogger(__name__)

NUM_FEATURES = 80
MATRIX_SIDE = 9
HAMD_MAX = 50

THREE_CLASS = "three_class"
TWO_CLASS = "two_class"


# ---------------------------------------------------------------------------
# labels

@dataclass(frozen=True)
class LabelScheme:
    """HAM-D binning. Upper bin edges are inclusive."""

    mode: str = THREE_CLASS

    def __post_init__(self):
        if self.mode not in (THREE_CLASS, TWO_CLASS):
            raise ValueError(f"unknown label scheme {self.mode!r}")

    @classmethod
    def from_classes(cls, num_classes: int) -> "LabelScheme":
        if num_classes == 3:
            return cls(THREE_CLASS)
        if num_classes == 2:
            return cls(TWO_CLASS)
        raise ValueError(f"num_classes must be 2 or 3, got {num_classes}")

    @property
    def upper_edges(self) -> tuple[int, ...]:
        return (7, 16, HAMD_MAX) if self.mode == THREE_CLASS else (16, HAMD_MAX)

    @property
    def num_classes(self) -> int:
        return len(self.upper_edges)

    @property
    def class_names(self) -> tuple[str, ...]:
        if self.mode == THREE_CLASS:
            return ("Normal", "Mild", "Moderate-Severe")
        return ("Normal+Mild", "Moderate-Severe")


def bin_hamd(score: int, scheme: LabelScheme = LabelScheme()) -> int:
    if not 0 <= score <= HAMD_MAX:
        raise DataError(f"HAM-D score {score} outside [0, {HAMD_MAX}]")
    for cls_id, edge in enumerate(scheme.upper_edges):
        if score <= edge:
            return cls_id
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# data access ledger

class AccessLedger:
    """Records which sample ids are read, tagged with the active phase.

    Training code reads client data only through :meth:`ClientDataset.arrays`,
    which reports here, so a run can prove that test samples never reached a
    training phase.
    """

    def __init__(self):
        self.phase = None
        self.accesses: dict[str, set[str]] = defaultdict(set)

    @contextmanager
    def phase_scope(self, name: str):
        previous, self.phase = self.phase, name
        try:
            yield self
        finally:
            self.phase = previous

    def record(self, sample_ids):
        self.accesses[self.phase or "unscoped"].update(sample_ids)

    def touched(self, phase: str) -> set[str]:
        return set(self.accesses.get(phase, ()))

    def clear(self):
        self.accesses.clear()


ledger = AccessLedger()


# ---------------------------------------------------------------------------
# records and client datasets

@dataclass
class RawRecord:
    subject_id: str
    visit_index: int
    features: np.ndarray
    hamd_score: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (NUM_FEATURES,):
            raise DataError(f"record {self.subject_id}/{self.visit_index}: expected "
                            f"{NUM_FEATURES} features, got {self.features.size}")
        if not 0 <= self.hamd_score <= HAMD_MAX:
            raise DataError(f"record {self.subject_id}/{self.visit_index}: HAM-D "
                            f"{self.hamd_score} outside [0, {HAMD_MAX}]")

    @property
    def sample_id(self) -> str:
        return f"{self.subject_id}:{self.visit_index}"


@dataclass
class ClientDataset:
    """One subject's preprocessed samples.  Read them with :meth:`arrays`."""

    client_id: str
    X: np.ndarray = field(repr=False)
    y: np.ndarray
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim == 3:
            self.X = self.X[:, None]
        if len(self.y) == 0:
            raise DataError(f"client {self.client_id} has no samples")
        if self.X.shape[0] != len(self.y):
            raise DataError(f"client {self.client_id}: {self.X.shape[0]} matrices vs "
                            f"{len(self.y)} labels")
        if not self.sample_ids:
            self.sample_ids = tuple(f"{self.client_id}:{i}" for i in range(len(self.y)))

    def __len__(self):
        return len(self.y)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        ledger.record(self.sample_ids)
        return self.X, self.y


# ---------------------------------------------------------------------------
# preprocessing

@dataclass(frozen=True)
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, records) -> "NormStats":
        feats = np.stack([r.features for r in records])
        return cls(feats.min(axis=0), feats.max(axis=0))

    def to_json(self) -> dict:
        return {"min": [float(v) for v in self.minimum],
                "max": [float(v) for v in self.maximum]}

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(np.asarray(obj["min"], dtype=np.float64),
                   np.asarray(obj["max"], dtype=np.float64))


def scale_features(features: np.ndarray, stats: NormStats) -> tuple[np.ndarray, int]:
    """Min-max scale, clamp to [0, 1].  Returns (scaled, number of clamped values)."""
    features = np.asarray(features, dtype=np.float64)
    span = stats.maximum - stats.minimum
    constant = span == 0
    safe = np.where(constant, 1.0, span)
    scaled = np.where(constant, 0.0, (features - stats.minimum) / safe)
    clamped = int(np.count_nonzero((scaled < 0) | (scaled > 1)))
    return np.clip(scaled, 0.0, 1.0), clamped


def to_matrix(scaled: np.ndarray) -> np.ndarray:
    """Append the zero dummy value and reshape row-major to 9x9."""
    scaled = np.asarray(scaled, dtype=np.float64)
    if scaled.shape[-1] != NUM_FEATURES:
        raise DataError(f"expected {NUM_FEATURES} features, got {scaled.shape[-1]}")
    pad = np.zeros(scaled.shape[:-1] + (1,))
    return np.concatenate([scaled, pad], axis=-1).reshape(
        scaled.shape[:-1] + (MATRIX_SIDE, MATRIX_SIDE))


def preprocess(record: RawRecord, stats: NormStats,
               scheme: LabelScheme = LabelScheme()) -> tuple[np.ndarray, int]:
    """Return (9x9 matrix, class label) for one record."""
    scaled, clamped = scale_features(record.features, stats)
    if clamped:
        logger.warning("record %s: %d feature(s) outside training range, clamped",
                       record.sample_id, clamped)
    return to_matrix(scaled), bin_hamd(record.hamd_score, scheme)


def partition_by_subject(records) -> dict[str, list[RawRecord]]:
    """Group records by subject_id; each subject becomes one client.

    Output is keyed in sorted subject order with each subject's records sorted
    by visit, so the result does not depend on input order.
    """
    groups: dict[str, list[RawRecord]] = defaultdict(list)
    for r in records:
        groups[r.subject_id].append(r)
    return {sid: sorted(groups[sid], key=lambda r: r.visit_index) for sid in sorted(groups)}


def build_clients(partition: dict[str, list[RawRecord]], stats: NormStats,
                  scheme: LabelScheme = LabelScheme()) -> list[ClientDataset]:
    clients = []
    total_clamped = 0
    for sid, recs in partition.items():
        feats = np.stack([r.features for r in recs])
        scaled, clamped = scale_features(feats, stats)
        total_clamped += clamped
        labels = [bin_hamd(r.hamd_score, scheme) for r in recs]
        clients.append(ClientDataset(sid, to_matrix(scaled)[:, None], labels,
                                     tuple(r.sample_id for r in recs)))
    if total_clamped:
        logger.warning("%d feature value(s) outside training range were clamped",
                       total_clamped)
    return clients


def split_train_test(clients, fraction: float = 0.8, seed: int = 0):
    """Split at subject granularity: ``round(fraction * n)`` clients go to training.

    ``clients`` may be client ids or :class:`ClientDataset` objects; the
    result has the same kind, each side sorted by id.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    by_id = {getattr(c, "client_id", c): c for c in clients}
    ids = sorted(by_id)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    train = [by_id[ids[i]] for i in sorted(order[:n_train])]
    test = [by_id[ids[i]] for i in sorted(order[n_train:])]
    return train, test


# ---------------------------------------------------------------------------
# synthetic data

# HAM-D ranges used to draw a score for each three-class label
_HAMD_RANGES = ((0, 7), (8, 16), (17, 50))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic non-IID generator.

    Each client belongs to one latent group.  A sample's three-class label is
    the group's home label (``group % 3``) with probability ``label_skew``,
    otherwise uniform.  Features are a per-class signature scaled by
    ``class_sep``, a per-group offset scaled by ``feature_shift_scale``, and
    unit Gaussian noise.

    With ``concept_shift`` each group expresses its labels through a rotated
    set of signatures, so the home label of every group shares one pattern
    and the same label looks different from group to group.
    """

    num_clients: int = 100
    samples_per_client: tuple[int, int] = (3, 6)
    num_latent_groups: int = 3
    label_skew: float = 0.9
    feature_shift_scale: float = 0.25
    class_sep: float = 0.8
    concept_shift: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.samples_per_client
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid samples_per_client range {self.samples_per_client}")
        if not 1 <= self.num_latent_groups <= self.num_clients:
            raise ValueError("num_latent_groups must lie in [1, num_clients]")
        if not 0.0 <= self.label_skew <= 1.0:
            raise ValueError("label_skew must lie in [0, 1]")
        if self.feature_shift_scale < 0 or self.class_sep < 0:
            raise ValueError("feature_shift_scale and class_sep must be >= 0")


@dataclass
class SyntheticData:
    records: list[RawRecord]
    groups: dict[str, int]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    num_classes = len(_HAMD_RANGES)
    class_signature = rng.normal(size=(num_classes, NUM_FEATURES))
    group_shift = rng.normal(size=(spec.num_latent_groups, NUM_FEATURES))
    width = len(str(spec.num_clients - 1))
    # balanced group sizes, shuffled over client ids
    group_of = rng.permutation(np.arange(spec.num_clients) % spec.num_latent_groups)

    records, groups = [], {}
    lo, hi = spec.samples_per_client
    for c in range(spec.num_clients):
        sid = f"S{c:0{width}d}"
        g = int(group_of[c])
        groups[sid] = g
        home = g % num_classes
        for visit in range(int(rng.integers(lo, hi + 1))):
            if rng.random() < spec.label_skew:
                label = home
            else:
                label = int(rng.integers(num_classes))
            pattern = (label - home) % num_classes if spec.concept_shift else label
            feats = (spec.class_sep * class_signature[pattern]
                     + spec.feature_shift_scale * group_shift[g]
                     + rng.normal(size=NUM_FEATURES))
            a, b = _HAMD_RANGES[label]
            records.append(RawRecord(sid, visit, feats, int(rng.integers(a, b + 1))))
    return SyntheticData(records, groups)


# ---------------------------------------------------------------------------
# CSV

FEATURE_COLUMNS = [f"f{i:02d}" for i in range(NUM_FEATURES)]
CSV_HEADER = ["subject_id", "visit", *FEATURE_COLUMNS, "hamd"]


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            # repr round-trips float64 exactly
            w.writerow([r.subject_id, r.visit_index,
                        *(repr(float(v)) for v in r.features), r.hamd_score])


def load_csv(path) -> list[RawRecord]:
    """Read records in the ``subject_id,visit,f00..f79,hamd`` schema.

    Rows are numbered from 1 for the header; columns from 0.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError("empty file, missing header", row=1)
    header = [h.strip() for h in rows[0]]
    if header != CSV_HEADER:
        if header and header[0] != "subject_id":
            raise CsvFormatError("missing or malformed header", row=1)
        bad = next((i for i, (a, b) in enumerate(zip(header, CSV_HEADER)) if a != b),
                   min(len(header), len(CSV_HEADER)))
        raise CsvFormatError(f"header does not match schema (expected "
                             f"{len(CSV_HEADER)} columns)", row=1, column=bad)
    records = []
    for rowno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise CsvFormatError(f"expected {len(CSV_HEADER)} columns, got {len(row)}",
                                 row=rowno)
        for col, cell in enumerate(row):
            if cell.strip() == "":
                raise CsvFormatError("missing value", row=rowno, column=col)
        try:
            visit = int(row[1])
        except ValueError:
            raise CsvFormatError(f"non-integer visit {row[1]!r}", row=rowno, column=1) from None
        feats = np.empty(NUM_FEATURES)
        for j in range(NUM_FEATURES):
            try:
                feats[j] = float(row[2 + j])
            except ValueError:
                raise CsvFormatError(f"non-numeric value {row[2 + j]!r}",
                                     row=rowno, column=2 + j) from None
            if not math.isfinite(feats[j]):
                raise CsvFormatError("non-finite value", row=rowno, column=2 + j)
        try:
            hamd = int(row[-1])
        except ValueError:
            raise CsvFormatError(f"non-integer hamd {row[-1]!r}", row=rowno,
                                 column=len(row) - 1) from None
        if not 0 <= hamd <= HAMD_MAX:
            raise CsvFormatError(f"hamd {hamd} outside [0, {HAMD_MAX}]", row=rowno,
                                 column=len(row) - 1)
        records.append(RawRecord(row[0], visit, feats, hamd))
    return records


def write_groups(path, groups: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "group"])
        for sid in sorted(groups):
            w.writerow([sid, groups[sid]])


def read_groups(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["subject_id"]: int(row["group"]) for row in csv.DictReader(fh)}
