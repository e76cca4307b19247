"""Session-structured datasets: representation, file I/O, validation, splitting."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    ConfigError,
    IntegrityError,
    ParseError,
    SchemaMismatchError,
    SplitError,
)

FORMATS = ("jsonl", "csv")


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple[str, ...]
    goal_feature_indices: tuple[int, ...]

    def __post_init__(self):
        names = tuple(self.feature_names)
        goal = tuple(int(i) for i in self.goal_feature_indices)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "goal_feature_indices", goal)
        if not names:
            raise ConfigError("schema needs at least one feature")
        if any(not isinstance(n, str) or not n for n in names):
            raise ConfigError("feature names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate feature names in {list(names)}")
        if not goal:
            raise ConfigError("schema needs at least one goal feature")
        if any(b <= a for a, b in zip(goal, goal[1:])):
            raise ConfigError("goal feature indices must be strictly increasing")
        if goal[0] < 0 or goal[-1] >= len(names):
            raise ConfigError("goal feature index out of range")

    @classmethod
    def from_names(cls, features: Sequence[str], goal_features: Sequence[str]) -> "FeatureSchema":
        features = list(features)
        unknown = [g for g in goal_features if g not in features]
        if unknown:
            raise ConfigError(f"goal features not in schema: {unknown}")
        return cls(tuple(features), tuple(sorted(features.index(g) for g in goal_features)))

    @property
    def feature_count(self) -> int:
        return len(self.feature_names)

    @property
    def goal_feature_names(self) -> tuple[str, ...]:
        return tuple(self.feature_names[i] for i in self.goal_feature_indices)

    def index_of(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown feature {name!r}") from None

    def to_dict(self) -> dict:
        return {"features": list(self.feature_names), "goal_features": list(self.goal_feature_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            return cls.from_names(d["features"], d["goal_features"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"schema must have 'features' and 'goal_features': {exc}") from None

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_schema(path) -> FeatureSchema:
    with open(path) as fh:
        return FeatureSchema.from_dict(json.load(fh))


def write_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


class Example(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Session:
    """One visit: the items shown (rows of ``features``) and which was ordered.

    Features are stored as an ``(m, n)`` array rather than a list of
    :class:`Example`; ``examples`` gives the per-item view.
    """

    session_id: str
    customer_id: str
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, ndmin=2)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if feats.shape[0] != labels.shape[0]:
            raise ValueError("features and labels disagree on item count")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "session_id", str(self.session_id))
        object.__setattr__(self, "customer_id", str(self.customer_id))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.session_id == other.session_id
            and self.customer_id == other.customer_id
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def examples(self) -> list[Example]:
        return [Example(self.features[i], int(self.labels[i])) for i in range(len(self))]

    @property
    def positive_index(self) -> int:
        """Index of the (first) positive item; -1 if there is none."""
        hits = np.flatnonzero(self.labels == 1)
        return int(hits[0]) if hits.size else -1


@dataclass(frozen=True, eq=False)
class SessionDataset:
    schema: FeatureSchema
    sessions: tuple[Session, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))

    def __len__(self):
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    def __eq__(self, other):
        if not isinstance(other, SessionDataset):
            return NotImplemented
        return self.schema == other.schema and self.sessions == other.sessions

    __hash__ = None

    @property
    def n_examples(self) -> int:
        return sum(len(s) for s in self.sessions)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start row of each session in :attr:`X`, plus a final end marker."""
        sizes = [len(s) for s in self.sessions]
        return np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)])

    @cached_property
    def X(self) -> np.ndarray:
        if not self.sessions:
            return np.empty((0, self.schema.feature_count))
        out = np.concatenate([s.features for s in self.sessions], axis=0)
        out.flags.writeable = False
        return out

    @cached_property
    def y(self) -> np.ndarray:
        if not self.sessions:
            return np.empty(0, dtype=np.int64)
        out = np.concatenate([s.labels for s in self.sessions])
        out.flags.writeable = False
        return out

    @cached_property
    def positive_rows(self) -> np.ndarray:
        """Row of each session's positive in :attr:`X` (one per session)."""
        return np.array(
            [off + s.positive_index for off, s in zip(self.offsets[:-1], self.sessions)],
            dtype=np.int64,
        )

    def subset(self, keep: Iterable[int]) -> "SessionDataset":
        return SessionDataset(self.schema, tuple(self.sessions[i] for i in keep))

    @property
    def customer_ids(self) -> list[str]:
        return sorted({s.customer_id for s in self.sessions})


# --------------------------------------------------------------------------
# validation


class Violation(NamedTuple):
    session_id: str | None
    rule: str
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [v._asdict() for v in self.violations]}


def validate(ds: SessionDataset) -> ValidationReport:
    """List every invariant violation in ``ds``; an empty report means well-formed."""
    report = ValidationReport()
    n = ds.schema.feature_count
    seen = set()
    for s in ds.sessions:
        sid = s.session_id
        if sid in seen:
            report.violations.append(Violation(sid, "unique_session_id", "session id repeated"))
        seen.add(sid)
        if s.features.shape[1] != n:
            report.violations.append(
                Violation(sid, "feature_count", f"expected {n} features, got {s.features.shape[1]}")
            )
        if len(s) < 2:
            report.violations.append(Violation(sid, "min_items", f"session has {len(s)} item(s), need >= 2"))
        bad_labels = ~np.isin(s.labels, (0, 1))
        if bad_labels.any():
            report.violations.append(
                Violation(sid, "binary_label", f"non-binary labels at items {np.flatnonzero(bad_labels).tolist()}")
            )
        n_pos = int(np.sum(s.labels == 1))
        if n_pos != 1:
            report.violations.append(
                Violation(sid, "one_positive", f"session has {n_pos} positives, need exactly 1")
            )
        nonfinite = ~np.isfinite(s.features)
        if nonfinite.any():
            for col in np.flatnonzero(nonfinite.any(axis=0)):
                report.violations.append(
                    Violation(sid, "finite_features", f"non-finite value in feature index {int(col)}")
                )
    return report


# --------------------------------------------------------------------------
# file formats


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in FORMATS:
            raise ConfigError(f"unknown format {fmt!r}; expected one of {FORMATS}")
        return fmt
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("jsonl", "ndjson"):
        return "jsonl"
    if suffix == "csv":
        return "csv"
    raise ConfigError(f"cannot infer format from {path}; pass format explicitly")


def _check_session(sid, feats, labels, line):
    if len(labels) < 2:
        raise IntegrityError(f"session {sid!r} has {len(labels)} item(s), need >= 2", line, sid)
    n_pos = sum(1 for lab in labels if lab == 1)
    if n_pos != 1:
        raise IntegrityError(f"session {sid!r} has {n_pos} positive items, need exactly 1", line, sid)


def _parse_label(raw, line):
    if isinstance(raw, bool) or raw not in (0, 1, "0", "1"):
        raise ParseError(f"label must be 0 or 1, got {raw!r}", line)
    return int(raw)


def _parse_features(raw, n, line):
    if not isinstance(raw, list):
        raise ParseError("'features' must be a list", line)
    if len(raw) != n:
        raise SchemaMismatchError(f"expected {n} features, got {len(raw)}", line)
    out = []
    for j, v in enumerate(raw):
        if isinstance(v, bool):
            raise ParseError(f"feature {j} is not numeric: {v!r}", line)
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise ParseError(f"feature {j} is not numeric: {v!r}", line) from None
        if not math.isfinite(f):
            raise ParseError(f"feature {j} is missing or non-finite: {v!r}", line)
        out.append(f)
    return out


def _load_jsonl(path, schema):
    n = schema.feature_count
    sessions = []
    seen = {}
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            try:
                sid, cid, items = obj["session_id"], obj["customer_id"], obj["items"]
            except KeyError as exc:
                raise ParseError(f"missing key {exc}", lineno) from None
            if not isinstance(items, list):
                raise ParseError("'items' must be a list", lineno)
            feats, labels = [], []
            for item in items:
                if not isinstance(item, dict) or "features" not in item or "label" not in item:
                    raise ParseError("each item needs 'features' and 'label'", lineno)
                feats.append(_parse_features(item["features"], n, lineno))
                labels.append(_parse_label(item["label"], lineno))
            sid = str(sid)
            if sid in seen:
                raise IntegrityError(f"session {sid!r} already defined on line {seen[sid]}", lineno, sid)
            seen[sid] = lineno
            _check_session(sid, feats, labels, lineno)
            sessions.append(Session(sid, str(cid), np.array(feats).reshape(len(labels), n), labels))
    return SessionDataset(schema, tuple(sessions))


def _load_csv(path, schema):
    n = schema.feature_count
    expected = ["session_id", "customer_id", "label", *schema.feature_names]
    sessions = []
    closed = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return SessionDataset(schema, ())
        if [h.strip() for h in header] != expected:
            raise SchemaMismatchError(f"header {header} does not match expected {expected}", 1)
        cur = None  # (sid, cid, first_line, feats, labels)

        def flush():
            sid, cid, first, feats, labels = cur
            _check_session(sid, feats, labels, first)
            sessions.append(Session(sid, cid, np.array(feats).reshape(len(labels), n), labels))
            closed.add(sid)

        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise SchemaMismatchError(f"expected {len(expected)} columns, got {len(row)}", lineno)
            sid, cid, label = row[0], row[1], row[2].strip()
            feats = _parse_features([c.strip() for c in row[3:]], n, lineno)
            lab = _parse_label(label, lineno)
            if cur is None or cur[0] != sid:
                if cur is not None:
                    flush()
                if sid in closed:
                    raise IntegrityError(f"rows of session {sid!r} are not contiguous", lineno, sid)
                cur = (sid, cid, lineno, [], [])
            elif cur[1] != cid:
                raise IntegrityError(f"session {sid!r} changes customer_id", lineno, sid)
            cur[3].append(feats)
            cur[4].append(lab)
        if cur is not None:
            flush()
    return SessionDataset(schema, tuple(sessions))


def load_sessions(path, schema: FeatureSchema, format: str | None = None) -> SessionDataset:
    """Read a session file (JSONL or CSV) into a validated :class:`SessionDataset`.

    Raises :class:`ParseError`, :class:`SchemaMismatchError` or
    :class:`IntegrityError`, each carrying the offending line number.
    """
    fmt = _infer_format(path, format)
    if fmt == "jsonl":
        return _load_jsonl(path, schema)
    return _load_csv(path, schema)


def write_sessions(ds: SessionDataset, path, format: str | None = None) -> None:
    fmt = _infer_format(path, format)
    with open(path, "w", newline="") as fh:
        if fmt == "jsonl":
            for s in ds.sessions:
                items = [
                    {"features": row.tolist(), "label": int(lab)} for row, lab in zip(s.features, s.labels)
                ]
                obj = {"session_id": s.session_id, "customer_id": s.customer_id, "items": items}
                fh.write(json.dumps(obj, separators=(",", ":")))
                fh.write("\n")
        else:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["session_id", "customer_id", "label", *ds.schema.feature_names])
            for s in ds.sessions:
                for row, lab in zip(s.features, s.labels):
                    writer.writerow([s.session_id, s.customer_id, int(lab), *(repr(float(v)) for v in row)])


# --------------------------------------------------------------------------
# splitting and projection


def _customer_key(seed: int, customer_id: str) -> bytes:
    return hashlib.blake2b(f"{seed}\x1f{customer_id}".encode(), digest_size=16).digest()


def split_by_customer(ds: SessionDataset, train_fraction: float, seed: int) -> tuple[SessionDataset, SessionDataset]:
    """Partition sessions into train/test so each customer lands on one side only.

    Customers are ordered by a seeded hash of their id and the first
    ``round(train_fraction * n_customers)`` go to train, so the split does
    not depend on the order of sessions in the file.
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    customers = ds.customer_ids
    if len(customers) < 2:
        raise SplitError(f"need at least 2 customers to split, got {len(customers)}")
    n_train = int(round(train_fraction * len(customers)))
    if n_train <= 0 or n_train >= len(customers):
        raise SplitError(
            f"degenerate split: {n_train} of {len(customers)} customers in train at fraction {train_fraction}"
        )
    ordered = sorted(customers, key=lambda c: (_customer_key(seed, c), c))
    train_customers = set(ordered[:n_train])
    train = tuple(s for s in ds.sessions if s.customer_id in train_customers)
    test = tuple(s for s in ds.sessions if s.customer_id not in train_customers)
    return SessionDataset(ds.schema, train), SessionDataset(ds.schema, test)


def goal_matrix(ds: SessionDataset, which: str = "positives_only") -> np.ndarray:
    """Goal-feature columns of either every row or only each session's positive."""
    cols = list(ds.schema.goal_feature_indices)
    if which == "all_rows":
        return ds.X[:, cols]
    if which == "positives_only":
        return ds.X[ds.positive_rows][:, cols]
    raise ConfigError(f"which must be 'positives_only' or 'all_rows', got {which!r}")
