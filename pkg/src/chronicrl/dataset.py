"""Transition records, tabular state discretization and the on-disk dataset format.

File layout (UTF-8 text)::

    #chronicrl-dataset version=1 condition=HTN eps_gate=1.0 ... records_sha256=<hex>
    <column names, comma separated>
    <one comma-separated row per transition>

Floats are written with ``repr`` so a write/read cycle is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import os
import shlex
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .env import Action, ConditionSpec, get_condition

FORMAT_TAG = "#chronicrl-dataset"
FORMAT_VERSION = 1

EPS_EDGES = (0.375, 0.625, 0.825)


class DatasetError(Exception):
    """Base class for dataset file problems."""


class DatasetVersionError(DatasetError):
    pass


class DatasetHashError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


def action_index(action: Action) -> int:
    return 2 * action.med_level + action.op


def index_action(index: int) -> Action:
    return Action.from_index(index)


def _check_edges(name: str, edges: Sequence[float]) -> tuple:
    edges = tuple(float(e) for e in edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"{name} must be strictly increasing, got {edges}")
    return edges


@dataclass(frozen=True)
class DiscretizationSpec:
    """Bucket edges.  Only inner edges are stored; values outside clamp to the end buckets.

    Every bucket is inclusive-lower / exclusive-upper.
    """

    condition_id: str
    biomarker_edges: tuple
    weeks_on_edges: tuple = (4.0, 8.0)
    reduction_edges: tuple = ()
    eps_edges: Optional[tuple] = None
    med_levels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "biomarker_edges", _check_edges("biomarker_edges", self.biomarker_edges))
        object.__setattr__(self, "weeks_on_edges", _check_edges("weeks_on_edges", self.weeks_on_edges))
        object.__setattr__(self, "reduction_edges", _check_edges("reduction_edges", self.reduction_edges))
        if self.eps_edges is not None:
            object.__setattr__(self, "eps_edges", _check_edges("eps_edges", self.eps_edges))

    @property
    def shape(self) -> tuple:
        dims = (
            len(self.biomarker_edges) + 1,
            self.med_levels,
            len(self.weeks_on_edges) + 1,
            len(self.reduction_edges) + 1,
        )
        if self.eps_edges is not None:
            dims += (len(self.eps_edges) + 1,)
        return dims

    @property
    def n_states(self) -> int:
        return int(np.prod(self.shape))

    @property
    def eps_aware(self) -> bool:
        return self.eps_edges is not None

    def with_eps(self, eps_edges: Optional[Sequence[float]] = EPS_EDGES) -> "DiscretizationSpec":
        return DiscretizationSpec(
            self.condition_id, self.biomarker_edges, self.weeks_on_edges, self.reduction_edges,
            None if eps_edges is None else tuple(eps_edges), self.med_levels,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretizationSpec":
        return cls(**d)

    def flat_index(self, state_index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(state_index), self.shape))

    def unflat_index(self, flat: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))


def default_discretization(condition_id: str, eps_aware: bool = False) -> DiscretizationSpec:
    cid = condition_id.upper()
    if cid == "HTN":
        spec = DiscretizationSpec(
            "HTN",
            biomarker_edges=tuple(range(120, 201, 10)),
            reduction_edges=(5.0, 15.0, 25.0),
        )
    elif cid == "T2D":
        spec = DiscretizationSpec(
            "T2D",
            biomarker_edges=tuple(round(6.5 + 0.5 * k, 1) for k in range(11)),
            reduction_edges=(0.3, 1.0, 1.5),
        )
    else:
        raise ValueError(f"no default discretization for {condition_id!r}")
    return spec.with_eps() if eps_aware else spec


def _bucket(value: float, edges: tuple) -> int:
    # count of edges <= value: inclusive-lower buckets, clamped at both ends
    lo, hi = 0, len(edges)
    while lo < hi:
        mid = (lo + hi) // 2
        if edges[mid] <= value:
            lo = mid + 1
        else:
            hi = mid
    return lo


def eps_bucket(eps: float, edges: Sequence[float] = EPS_EDGES) -> int:
    return _bucket(float(eps), tuple(edges))


def encode_state(
    raw_obs: float,
    baseline: float,
    med_level: int,
    weeks_on: int,
    spec: DiscretizationSpec,
    eps: Optional[float] = None,
) -> tuple:
    """Map raw observations to ``(biomarker, med, weeks_on, reduction[, eps])`` buckets."""
    idx = (
        _bucket(raw_obs, spec.biomarker_edges),
        int(med_level),
        _bucket(weeks_on, spec.weeks_on_edges),
        _bucket(baseline - raw_obs, spec.reduction_edges),
    )
    if spec.eps_edges is not None:
        if eps is None:
            raise ValueError("eps-aware discretization needs an eps value")
        idx += (_bucket(eps, spec.eps_edges),)
    return idx


class StateDiscretizer(TransformerMixin, BaseEstimator):
    """Tabular state encoder with the usual fit/transform surface.

    ``X`` columns are ``obs, baseline, med_level, weeks_on`` plus ``eps`` when the
    discretization is eps-aware.  ``transform`` returns integer bucket tuples as
    rows; ``flat=True`` returns one flat state id per row instead.
    """

    def __init__(self, condition="HTN", eps_aware=False, spec=None, flat=False):
        self.condition = condition
        self.eps_aware = eps_aware
        self.spec = spec
        self.flat = flat

    def fit(self, X=None, y=None):
        self.spec_ = self.spec if self.spec is not None else default_discretization(self.condition, self.eps_aware)
        self.n_states_ = self.spec_.n_states
        self.n_features_in_ = 5 if self.spec_.eps_aware else 4
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_array, check_is_fitted

        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        spec = self.spec_
        cols = [
            np.searchsorted(spec.biomarker_edges, X[:, 0], side="right"),
            X[:, 2].astype(int),
            np.searchsorted(spec.weeks_on_edges, X[:, 3], side="right"),
            np.searchsorted(spec.reduction_edges, X[:, 1] - X[:, 0], side="right"),
        ]
        if spec.eps_aware:
            cols.append(np.searchsorted(spec.eps_edges, X[:, 4], side="right"))
        out = np.stack(cols, axis=1).astype(np.int64)
        if self.flat:
            return np.ravel_multi_index(tuple(out.T), spec.shape)
        return out


@dataclass
class TransitionRecord:
    """One weekly transition.  Milestone and stall flags describe the *next* state."""

    patient_id: int
    archetype_id: str
    week: int
    obs: float
    next_obs: float
    baseline: float
    med_level: int
    weeks_on: int
    next_med_level: int
    next_weeks_on: int
    action_index: int
    proposed_index: int
    med_changed: bool
    op_taken: bool
    hit_ttg: bool = False
    hit_tto: bool = False
    hit_ttc: bool = False
    stall_g: bool = False
    stall_o: bool = False
    stall_r: bool = False
    terminal: bool = False
    eps: float = 1.0
    state_index: tuple = ()
    next_state_index: tuple = ()
    eps_bucket: int = 0

    @property
    def milestone_event(self) -> str:
        """Deepest milestone first-passed on this transition (``none`` if nothing fired)."""
        for name in ("ttc", "tto", "ttg"):
            if getattr(self, f"hit_{name}"):
                return name
        return "none"

    @property
    def events(self) -> tuple:
        return tuple(n for n in ("ttg", "tto", "ttc") if getattr(self, f"hit_{n}"))

    @property
    def action(self) -> Action:
        return Action.from_index(self.action_index)


_COLUMNS = [f.name for f in fields(TransitionRecord)]
_BOOL_COLS = {f.name for f in fields(TransitionRecord) if f.type in ("bool",)}
_INT_COLS = {f.name for f in fields(TransitionRecord) if f.type in ("int",)}
_FLOAT_COLS = {f.name for f in fields(TransitionRecord) if f.type in ("float",)}
_TUPLE_COLS = {"state_index", "next_state_index"}


def spec_hash(obj) -> str:
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Dataset:
    header: dict
    records: list = field(default_factory=list)
    condition_spec: Optional[ConditionSpec] = None
    discretization: Optional[DiscretizationSpec] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def condition(self) -> str:
        return self.header["condition"]

    @property
    def archetypes(self) -> list:
        return sorted({r.archetype_id for r in self.records})

    def patients(self) -> dict:
        """Records grouped by patient id, in week order."""
        out: dict = {}
        for r in self.records:
            out.setdefault(r.patient_id, []).append(r)
        for traj in out.values():
            traj.sort(key=lambda r: r.week)
        return out

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def reencode(self, spec: DiscretizationSpec) -> tuple:
        """Encode every record's current and next state with ``spec``."""
        s, s2 = [], []
        for r in self.records:
            s.append(encode_state(r.obs, r.baseline, r.med_level, r.weeks_on, spec, r.eps))
            s2.append(encode_state(r.next_obs, r.baseline, r.next_med_level, r.next_weeks_on, spec, r.eps))
        return s, s2

    @staticmethod
    def concat(parts: Iterable["Dataset"], **header_updates) -> "Dataset":
        """Pool datasets of one condition, renumbering patients to stay unique."""
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        conds = {p.condition for p in parts}
        if len(conds) != 1:
            raise ValueError(f"cannot pool datasets of different conditions: {sorted(conds)}")
        records, offset = [], 0
        for p in parts:
            n_pat = int(p.header.get("pop_size", len({r.patient_id for r in p.records})))
            for r in p.records:
                nr = TransitionRecord(**{c: getattr(r, c) for c in _COLUMNS})
                nr.patient_id = r.patient_id + offset
                records.append(nr)
            offset += n_pat
        header = dict(parts[0].header)
        header.update(
            eps_gate=",".join(str(p.header["eps_gate"]) for p in parts),
            pop_size=offset,
            n_records=len(records),
        )
        header.update(header_updates)
        return Dataset(header, records, parts[0].condition_spec, parts[0].discretization)


def _fmt(name: str, value) -> str:
    if name in _TUPLE_COLS:
        return " ".join(str(int(v)) for v in value)
    if name in _BOOL_COLS:
        return "1" if value else "0"
    if name in _FLOAT_COLS:
        return repr(float(value))
    return str(value)


def _parse(name: str, text: str):
    if name in _TUPLE_COLS:
        return tuple(int(v) for v in text.split()) if text else ()
    if name in _BOOL_COLS:
        return text == "1"
    if name in _FLOAT_COLS:
        return float(text)
    if name in _INT_COLS:
        return int(text)
    return text


def _body_lines(records) -> list:
    return [",".join(_fmt(c, getattr(r, c)) for c in _COLUMNS) for r in records]


def _digest(lines: list) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def write_dataset(dataset: Dataset, path) -> str:
    """Write ``dataset`` to ``path``; returns the records digest."""
    lines = _body_lines(dataset.records)
    header = dict(dataset.header)
    header["n_records"] = len(dataset.records)
    if dataset.condition_spec is not None:
        header["condition_spec"] = json.dumps(dataset.condition_spec.to_dict(), sort_keys=True, separators=(",", ":"))
        header["condition_hash"] = spec_hash(dataset.condition_spec)
    if dataset.discretization is not None:
        header["discretization"] = json.dumps(dataset.discretization.to_dict(), sort_keys=True, separators=(",", ":"))
        header["discretization_hash"] = spec_hash(dataset.discretization)
    header["records_sha256"] = _digest(lines)
    head = " ".join(f"{k}={_quote(v)}" for k, v in header.items() if k != "version")
    path = os.fspath(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_TAG} version={FORMAT_VERSION} {head}\n")
        fh.write(",".join(_COLUMNS) + "\n")
        for line in lines:
            fh.write(line + "\n")
    dataset.header = {k: v for k, v in header.items() if k not in ("condition_spec", "discretization")}
    return header["records_sha256"]


def _quote(value) -> str:
    return shlex.quote(str(value))


def _split_header(line: str) -> dict:
    out = {}
    for tok in shlex.split(line, posix=True):
        key, _, value = tok.partition("=")
        out[key] = value
    return out


def read_header(path) -> dict:
    with open(os.fspath(path), "r", encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header_line(first, path)


def _parse_header_line(first: str, path) -> dict:
    if not first.startswith(FORMAT_TAG + " "):
        raise DatasetVersionError(f"{path}: not a chronicrl dataset (missing {FORMAT_TAG} tag)")
    header = _split_header(first[len(FORMAT_TAG) + 1:].strip())
    version = header.pop("version", None)
    if version != str(FORMAT_VERSION):
        raise DatasetVersionError(f"{path}: dataset format version {version!r}, expected {FORMAT_VERSION}")
    return header


_HEADER_NUMERIC = {"pop_size": int, "n_records": int, "seed": int, "horizon_weeks": int}


def read_dataset(path) -> Dataset:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetTruncatedError(f"{path}: empty file")
    header = _parse_header_line(lines[0], path)
    if len(lines) < 2:
        raise DatasetTruncatedError(f"{path}: missing column line")
    cols = lines[1].split(",")
    if cols != _COLUMNS:
        raise DatasetVersionError(f"{path}: unexpected column layout")
    body = lines[2:]
    declared = int(header.get("n_records", -1))
    if declared != len(body):
        raise DatasetTruncatedError(f"{path}: header declares {declared} records, found {len(body)}")
    if _digest(body) != header.get("records_sha256"):
        raise DatasetHashError(f"{path}: records digest does not match header")

    cond_spec = disc = None
    if "condition_spec" in header:
        cond_spec = ConditionSpec(**json.loads(header.pop("condition_spec")))
        if spec_hash(cond_spec) != header.get("condition_hash"):
            raise DatasetHashError(f"{path}: condition spec hash mismatch")
    if "discretization" in header:
        d = json.loads(header.pop("discretization"))
        disc = DiscretizationSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})
        if spec_hash(disc) != header.get("discretization_hash"):
            raise DatasetHashError(f"{path}: discretization hash mismatch")
    for key, conv in _HEADER_NUMERIC.items():
        if key in header:
            header[key] = conv(header[key])

    records = []
    for lineno, line in enumerate(body, start=3):
        parts = line.split(",")
        if len(parts) != len(_COLUMNS):
            raise DatasetTruncatedError(f"{path}:{lineno}: expected {len(_COLUMNS)} fields, got {len(parts)}")
        records.append(TransitionRecord(**{c: _parse(c, v) for c, v in zip(_COLUMNS, parts)}))
    if cond_spec is None and "condition" in header:
        cond_spec = get_condition(header["condition"])
    return Dataset(header, records, cond_spec, disc)

