"""Domain types, validation and CSV ingestion.

A :class:`ClusterDataset` is stored column-wise (numpy arrays) with the
subjects of each cluster contiguous, clusters ordered by first appearance and
subjects in input order within their cluster. Everything downstream works on
these arrays; :class:`SubjectRecord` objects are materialised on demand.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyDatasetError,
    MissingDataError,
    SchemaError,
    ValidationError,
)

REQUIRED_COLUMNS = (
    "cluster",
    "treatment",
    "t_nonterminal",
    "d_nonterminal",
    "t_terminal",
    "d_terminal",
)
_COVARIATE_RE = re.compile(r"^x(\d+)$")
_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class CompositeOutcome:
    """Observed semi-competing-risks data for one subject.

    ``u_nonterminal`` is min(non-terminal, terminal, censoring time) and
    ``u_terminal`` is min(terminal, censoring time), both in days.
    """

    u_nonterminal: float
    delta_nonterminal: int
    u_terminal: float
    delta_terminal: int

    def __post_init__(self):
        problem = _outcome_problem(
            self.u_nonterminal, self.delta_nonterminal, self.u_terminal, self.delta_terminal
        )
        if problem:
            raise ValidationError(f"invalid composite outcome: {problem}")


def _outcome_problem(u_nt, d_nt, u_t, d_t):
    if d_nt not in (0, 1) or d_t not in (0, 1):
        return "event indicators must be 0 or 1"
    if not (math.isfinite(u_nt) and math.isfinite(u_t)):
        return "times must be finite"
    if u_nt < 0 or u_t < 0:
        return "times must be nonnegative"
    if u_nt > u_t:
        return f"u_nonterminal ({u_nt}) exceeds u_terminal ({u_t})"
    if d_nt == 0 and d_t == 1 and u_nt < u_t:
        return "terminal event observed without a non-terminal event requires u_nonterminal == u_terminal"
    return None


@dataclass(frozen=True)
class SubjectRecord:
    cluster_id: object
    treatment: int
    outcome: CompositeOutcome
    covariates: tuple

    def __post_init__(self):
        if self.treatment not in (0, 1):
            raise ValidationError("treatment must be 0 or 1")
        if any(not math.isfinite(v) for v in self.covariates):
            raise MissingDataError(f"subject in cluster {self.cluster_id!r} has missing covariates")


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class ClusterDataset:
    """Validated, immutable collection of subjects grouped by cluster."""

    __slots__ = (
        "labels",
        "codes",
        "offsets",
        "treatment",
        "u_nonterminal",
        "delta_nonterminal",
        "u_terminal",
        "delta_terminal",
        "covariates",
    )

    def __init__(
        self,
        cluster_ids,
        treatment,
        u_nonterminal,
        delta_nonterminal,
        u_terminal,
        delta_terminal,
        covariates,
        *,
        validate: bool = True,
    ):
        cluster_ids = list(cluster_ids)
        n = len(cluster_ids)
        X = np.asarray(covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, 0)
        cols = [np.asarray(c) for c in (treatment, u_nonterminal, delta_nonterminal, u_terminal, delta_terminal)]
        if any(len(c) != n for c in cols) or X.shape[0] != n:
            raise ValidationError("all columns must have one entry per subject")

        # group contiguously: clusters by first appearance, stable within cluster
        label_index: dict = {}
        raw_codes = np.empty(n, dtype=np.int64)
        for i, c in enumerate(cluster_ids):
            raw_codes[i] = label_index.setdefault(c, len(label_index))
        order = np.argsort(raw_codes, kind="stable")
        codes = raw_codes[order]
        m = len(label_index)
        sizes = np.bincount(codes, minlength=m)

        self.labels = tuple(label_index)
        self.codes = _readonly(codes, np.int64)
        self.offsets = _readonly(np.concatenate(([0], np.cumsum(sizes))), np.int64)
        self.treatment = _readonly(np.asarray(cols[0])[order], np.int8)
        self.u_nonterminal = _readonly(np.asarray(cols[1], dtype=float)[order], np.float64)
        self.delta_nonterminal = _readonly(np.asarray(cols[2])[order], np.int8)
        self.u_terminal = _readonly(np.asarray(cols[3], dtype=float)[order], np.float64)
        self.delta_terminal = _readonly(np.asarray(cols[4])[order], np.int8)
        self.covariates = _readonly(X[order], np.float64)
        if validate:
            self._validate(np.asarray(cols[0])[order], np.asarray(cols[2])[order], np.asarray(cols[4])[order])

    @classmethod
    def _from_sorted(cls, labels, codes, offsets, z, u_nt, d_nt, u_t, d_t, X):
        # trusted fast path for resampling; inputs already grouped and valid
        obj = cls.__new__(cls)
        obj.labels = tuple(labels)
        for name, arr in (
            ("codes", codes),
            ("offsets", offsets),
            ("treatment", z),
            ("u_nonterminal", u_nt),
            ("delta_nonterminal", d_nt),
            ("u_terminal", u_t),
            ("delta_terminal", d_t),
            ("covariates", X),
        ):
            arr.setflags(write=False)
            setattr(obj, name, arr)
        return obj

    def _validate(self, z_raw, dnt_raw, dt_raw):
        def bad(mask):
            return np.flatnonzero(mask)

        for name, raw in (("treatment", z_raw), ("d_nonterminal", dnt_raw), ("d_terminal", dt_raw)):
            idx = bad((raw != 0) & (raw != 1))
            if idx.size:
                raise ValidationError(f"{name} must be 0/1 ({self._subject_name(idx[0])})")
        if not np.all(np.isfinite(self.covariates)):
            i = np.flatnonzero(~np.all(np.isfinite(self.covariates), axis=1))[0]
            raise MissingDataError(f"missing or non-finite covariate ({self._subject_name(i)})")
        u_nt, u_t = self.u_nonterminal, self.u_terminal
        checks = (
            (~np.isfinite(u_nt) | ~np.isfinite(u_t), "times must be finite"),
            ((u_nt < 0) | (u_t < 0), "times must be nonnegative"),
            (u_nt > u_t, "u_nonterminal exceeds u_terminal"),
            (
                (self.delta_nonterminal == 0) & (self.delta_terminal == 1) & (u_nt < u_t),
                "terminal event without non-terminal event requires equal times",
            ),
        )
        for mask, msg in checks:
            idx = bad(mask)
            if idx.size:
                raise ValidationError(f"{msg} ({self._subject_name(idx[0])})")

    def _subject_name(self, i):
        k = int(self.codes[i])
        return f"subject {i - int(self.offsets[k])} of cluster {self.labels[k]!r}"

    # -- shape --------------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.codes.shape[0])

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"ClusterDataset(n={self.n}, m={self.m}, p={self.p})"

    def __eq__(self, other):
        if not isinstance(other, ClusterDataset):
            return NotImplemented
        return self.labels == other.labels and all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in self.__slots__
            if a != "labels"
        )

    __hash__ = None

    # -- per-cluster views ---------------------------------------------------
    def arm_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """(treated, control) subject counts per cluster."""
        treated = np.bincount(self.codes, weights=self.treatment, minlength=self.m).astype(np.int64)
        return treated, self.cluster_sizes - treated

    def has_single_arm_clusters(self) -> bool:
        t, c = self.arm_counts()
        return bool(np.any((t == 0) | (c == 0)))

    def cluster_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def cluster_of(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(label) from None

    def records(self) -> list[SubjectRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[SubjectRecord]:
        for i in range(self.n):
            yield self.record(i)

    def record(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            cluster_id=self.labels[int(self.codes[i])],
            treatment=int(self.treatment[i]),
            outcome=CompositeOutcome(
                float(self.u_nonterminal[i]),
                int(self.delta_nonterminal[i]),
                float(self.u_terminal[i]),
                int(self.delta_terminal[i]),
            ),
            covariates=tuple(float(v) for v in self.covariates[i]),
        )

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord]) -> "ClusterDataset":
        records = list(records)
        if not records:
            raise EmptyDatasetError("no subjects")
        p = len(records[0].covariates)
        if any(len(r.covariates) != p for r in records):
            raise ValidationError("covariate vectors differ in length")
        return cls(
            [r.cluster_id for r in records],
            [r.treatment for r in records],
            [r.outcome.u_nonterminal for r in records],
            [r.outcome.delta_nonterminal for r in records],
            [r.outcome.u_terminal for r in records],
            [r.outcome.delta_terminal for r in records],
            np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
        )

    # -- derived datasets ----------------------------------------------------
    def take_clusters(self, cluster_indices: Sequence[int], fresh_labels: bool = True) -> "ClusterDataset":
        """Dataset made of the given clusters, in the given order (repeats allowed).

        With ``fresh_labels`` every selected cluster gets a new identity
        ``0..len(cluster_indices)-1``, as needed for the cluster bootstrap.
        """
        sel = np.asarray(cluster_indices, dtype=np.int64)
        sizes = self.cluster_sizes[sel]
        starts = self.offsets[sel]
        total = int(sizes.sum())
        # start of each selected block repeated, plus position within block
        block_start = np.repeat(starts - np.concatenate(([0], np.cumsum(sizes)[:-1])), sizes)
        idx = block_start + np.arange(total)
        codes = np.repeat(np.arange(sel.size, dtype=np.int64), sizes)
        offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
        labels = range(sel.size) if fresh_labels else [self.labels[k] for k in sel]
        if not fresh_labels and len(set(labels)) != len(labels):
            raise ValidationError("repeated clusters require fresh labels")
        return ClusterDataset._from_sorted(
            labels,
            codes,
            offsets,
            self.treatment[idx],
            self.u_nonterminal[idx],
            self.delta_nonterminal[idx],
            self.u_terminal[idx],
            self.delta_terminal[idx],
            self.covariates[idx],
        )

    def take_subjects(self, subject_indices: Sequence[int]) -> "ClusterDataset":
        """Dataset of the given subjects pooled into a single cluster ``0``."""
        idx = np.asarray(subject_indices, dtype=np.int64)
        return ClusterDataset._from_sorted(
            [0],
            np.zeros(idx.size, dtype=np.int64),
            np.array([0, idx.size], dtype=np.int64),
            self.treatment[idx],
            self.u_nonterminal[idx],
            self.delta_nonterminal[idx],
            self.u_terminal[idx],
            self.delta_terminal[idx],
            self.covariates[idx],
        )

    def with_treatment(self, treatment) -> "ClusterDataset":
        z = np.asarray(treatment, dtype=np.int8).copy()
        if z.shape != self.treatment.shape or np.any((z != 0) & (z != 1)):
            raise ValidationError("treatment must be a 0/1 vector of length n")
        return ClusterDataset._from_sorted(
            self.labels, self.codes.copy(), self.offsets.copy(), z,
            self.u_nonterminal.copy(), self.delta_nonterminal.copy(),
            self.u_terminal.copy(), self.delta_terminal.copy(), self.covariates.copy(),
        )


class Backend(str, enum.Enum):
    UNADJUSTED = "unadjusted"
    LOGISTIC = "logistic"
    FIXED_EFFECTS = "fixed_effects"
    RANDOM_EFFECTS = "random_effects"
    CALIBRATION = "calibration"


@dataclass(frozen=True)
class SolverDiagnostics:
    iterations: int = 0
    max_residual: float = 0.0
    converged: bool = True


@dataclass(frozen=True)
class WeightSet:
    """Per-subject analysis weights aligned with a dataset's subject order."""

    weights: np.ndarray
    backend: Backend
    diagnostics: SolverDiagnostics = field(default_factory=SolverDiagnostics)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("weights must be positive and finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "backend", Backend(self.backend))

    def __len__(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class FilterReport:
    excluded: tuple = ()  # (cluster_id, n_subjects) pairs

    @property
    def excluded_ids(self):
        return [c for c, _ in self.excluded]


def filter_single_arm_clusters(ds: ClusterDataset) -> tuple[ClusterDataset, FilterReport]:
    """Drop clusters in which only one treatment arm is represented."""
    treated, control = ds.arm_counts()
    keep = (treated > 0) & (control > 0)
    if keep.all():
        return ds, FilterReport()
    if not keep.any():
        raise EmptyDatasetError("every cluster contains a single treatment arm")
    sizes = ds.cluster_sizes
    report = FilterReport(tuple((ds.labels[k], int(sizes[k])) for k in np.flatnonzero(~keep)))
    return ds.take_clusters(np.flatnonzero(keep), fresh_labels=False), report


# -- CSV -----------------------------------------------------------------------
def _covariate_columns(header: Sequence[str]) -> list[str]:
    cols = [(int(mt.group(1)), h) for h in header if (mt := _COVARIATE_RE.match(h))]
    return [h for _, h in sorted(cols)]


def parse_csv(path, schema: Mapping[str, str] | None = None) -> ClusterDataset:
    """Read a dataset from CSV.

    Args:
        path: file path or an open text stream.
        schema: optional mapping from canonical column name (``cluster``,
            ``treatment``, ...) to the column name used in the file. Covariates
            may be given as ``schema["covariates"] = [...]``; by default every
            column named ``x<k>`` is a covariate, ordered by ``k``.

    Raises:
        SchemaError: a required column is absent.
        MissingDataError: an empty/NA field.
        ValidationError: malformed rows or invalid outcomes; the message
            names the line number.
    """
    schema = dict(schema or {})
    if isinstance(path, (str, os.PathLike)):
        with open(path, newline="", encoding="utf-8") as fh:
            return _parse_stream(fh, schema)
    return _parse_stream(path, schema)


def _parse_stream(fh, schema) -> ClusterDataset:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty file: header row required") from None
    colname = {c: schema.get(c, c) for c in REQUIRED_COLUMNS}
    missing = [v for v in colname.values() if v not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    covs = list(schema.get("covariates") or _covariate_columns(header))
    absent = [c for c in covs if c not in header]
    if absent:
        raise SchemaError(f"missing covariate column(s): {', '.join(absent)}")
    pos = {h: i for i, h in enumerate(header)}
    c_idx = pos[colname["cluster"]]
    z_idx, unt_idx, dnt_idx = (pos[colname[c]] for c in ("treatment", "t_nonterminal", "d_nonterminal"))
    ut_idx, dt_idx = pos[colname["t_terminal"]], pos[colname["d_terminal"]]
    x_idx = [pos[c] for c in covs]

    clusters, z, unt, dnt, ut, dt, X = [], [], [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        fields = [f.strip() for f in row]
        for i in [c_idx, z_idx, unt_idx, dnt_idx, ut_idx, dt_idx, *x_idx]:
            if fields[i].lower() in _MISSING_TOKENS:
                raise MissingDataError(f"line {lineno}: missing value in column {header[i]!r}")
        try:
            zi, dnti, dti = (_indicator(fields[i], header[i]) for i in (z_idx, dnt_idx, dt_idx))
            unti, uti = float(fields[unt_idx]), float(fields[ut_idx])
            xi = [float(fields[i]) for i in x_idx]
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        problem = _outcome_problem(unti, dnti, uti, dti)
        if problem:
            raise ValidationError(f"line {lineno} (cluster {fields[c_idx]!r}): {problem}")
        if any(not math.isfinite(v) for v in xi):
            raise MissingDataError(f"line {lineno}: non-finite covariate")
        clusters.append(fields[c_idx])
        z.append(zi)
        unt.append(unti)
        dnt.append(dnti)
        ut.append(uti)
        dt.append(dti)
        X.append(xi)
    if not clusters:
        raise EmptyDatasetError("no data rows")
    return ClusterDataset(clusters, z, unt, dnt, ut, dt, np.array(X, dtype=float).reshape(len(X), len(covs)))


def _indicator(text, column):
    if text not in ("0", "1"):
        raise ValueError(f"column {column!r} must be literal 0 or 1, got {text!r}")
    return int(text)


def write_csv(ds: ClusterDataset, path=None) -> str | None:
    """Write ``ds`` in the ingestion schema. Returns the text when ``path`` is None."""
    buf = io.StringIO() if path is None else None
    fh = buf if buf is not None else open(path, "w", newline="", encoding="utf-8")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(REQUIRED_COLUMNS) + [f"x{k + 1}" for k in range(ds.p)])
        for i in range(ds.n):
            writer.writerow(
                [
                    ds.labels[int(ds.codes[i])],
                    int(ds.treatment[i]),
                    repr(float(ds.u_nonterminal[i])),
                    int(ds.delta_nonterminal[i]),
                    repr(float(ds.u_terminal[i])),
                    int(ds.delta_terminal[i]),
                    *(repr(float(v)) for v in ds.covariates[i]),
                ]
            )
    finally:
        if buf is None:
            fh.close()
    return buf.getvalue() if buf is not None else None
