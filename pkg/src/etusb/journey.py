"""Customer-journey events: parsing, granularity reduction, features, samples.

The pipeline is

    JSONL events -> parse_events -> fit_rules -> build_journeys
                 -> build_vocabulary / FeatureSchema -> assemble_sample

Fitted artifacts (:class:`GranularityRuleSet`, :class:`Vocabulary`,
:class:`FeatureSchema`) are immutable and serialize to versioned JSON.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
OTHER = "other"
TOKEN_SEP = "|"
SECONDS_PER_DAY = 86400.0

CORE_FIELDS = ("action_type", "channel_type", "object_type", "event_type")
REQUIRED_FIELDS = ("customer_id", "action_time", "event_type")


class RecordError(ValueError):
    """A single input record is malformed; callers usually skip it."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ParseError(RuntimeError):
    """The input as a whole cannot be used."""


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class Event:
    customer_id: str
    action_time: int
    event_type: str
    action_type: str | None = None
    channel_type: str | None = None
    object_type: str | None = None
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.customer_id:
            raise RecordError("customer_id must be nonempty")
        if self.action_time <= 0:
            raise RecordError(f"action_time must be positive, got {self.action_time}")

    def get(self, name: str) -> str | None:
        """Value of a core field or attribute, ``None`` when absent."""
        if name in CORE_FIELDS:
            return getattr(self, name)
        return self.attributes.get(name)

    def to_json(self) -> str:
        record = {
            "customer_id": self.customer_id,
            "action_time": self.action_time,
            "action_type": self.action_type,
            "channel_type": self.channel_type,
            "object_type": self.object_type,
            "event_type": self.event_type,
            "attributes": dict(self.attributes),
        }
        return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def _unique_pairs(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise RecordError(f"duplicate key {k!r}")
        out[k] = v
    return out


def _as_code(value) -> str | None:
    if value is None:
        return None
    return str(value)


def event_from_record(record: Mapping) -> Event:
    missing = [k for k in REQUIRED_FIELDS if record.get(k) in (None, "")]
    if missing:
        raise RecordError(f"missing required field(s): {', '.join(missing)}")
    t = record["action_time"]
    if isinstance(t, bool) or not isinstance(t, int):
        raise RecordError(f"action_time must be integer epoch seconds, got {t!r}")
    attrs = record.get("attributes") or {}
    if not isinstance(attrs, Mapping):
        raise RecordError("attributes must be an object")
    return Event(
        customer_id=str(record["customer_id"]),
        action_time=t,
        event_type=str(record["event_type"]),
        action_type=_as_code(record.get("action_type")),
        channel_type=_as_code(record.get("channel_type")),
        object_type=_as_code(record.get("object_type")),
        attributes={str(k): str(v) for k, v in attrs.items()},
    )


def parse_events(
    stream: str | Iterable[str] | io.IOBase,
    *,
    max_error_rate: float = 1.0,
    errors: list[RecordError] | None = None,
) -> list[Event]:
    """Parse JSON Lines events.

    Malformed lines are skipped and collected into ``errors`` (if given)
    with their 1-based line number.  If the fraction of bad lines exceeds
    ``max_error_rate`` a :class:`ParseError` is raised.  Blank lines are
    ignored.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    events: list[Event] = []
    bad: list[RecordError] = []
    n = 0
    try:
        for lineno, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            n += 1
            try:
                record = json.loads(line, object_pairs_hook=_unique_pairs)
                if not isinstance(record, dict):
                    raise RecordError("record is not a JSON object")
                events.append(event_from_record(record))
            except RecordError as exc:
                bad.append(RecordError(str(exc), lineno))
            except json.JSONDecodeError as exc:
                bad.append(RecordError(f"invalid JSON ({exc.msg})", lineno))
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"unreadable event stream: {exc}") from exc
    for e in bad:
        log.warning("skipping record: %s", e)
    if errors is not None:
        errors.extend(bad)
    if n and len(bad) / n > max_error_rate:
        raise ParseError(f"{len(bad)} of {n} records malformed (limit {max_error_rate:.0%})")
    return events


def read_events(path, **kwargs) -> list[Event]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_events(fh, **kwargs)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def write_events(events: Iterable[Event], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(ev.to_json())
            fh.write("\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# granularity reduction


@dataclass(frozen=True)
class CoverageRow:
    value: str
    count: int
    total: int
    share: float
    cumulative: float
    retained: bool


def _sort_counts(counts: Mapping[str, int], other: str = OTHER):
    # the catch-all bucket always sorts last so refitting bucketed data is stable
    return sorted(counts.items(), key=lambda kv: (kv[0] == other, -kv[1], kv[0]))


def fit_granularity(
    field_counts: Mapping[str, int], threshold: float = 0.9
) -> tuple[list[str], list[CoverageRow]]:
    """Keep the smallest prefix of values (by descending count) covering ``threshold``.

    Returns the retained values and a coverage table with one row per
    value in sorted order.
    """
    if not field_counts:
        raise ValueError("cannot fit granularity on empty counts")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if any(c <= 0 for c in field_counts.values()):
        raise ValueError("counts must be positive")
    total = sum(field_counts.values())
    retained: list[str] = []
    rows: list[CoverageRow] = []
    cum = 0
    done = False
    for value, count in _sort_counts(field_counts):
        cum += count
        keep = not done
        if keep:
            retained.append(value)
            done = cum / total >= threshold
        rows.append(CoverageRow(value, count, total, count / total, cum / total, keep))
    return retained, rows


def discretize_numeric(values: Iterable[float], bin_boundaries: Sequence[float]) -> list[str]:
    """Map each value to ``bin_k`` with half-open intervals ``[b[k-1], b[k])``."""
    b = np.asarray(bin_boundaries, dtype=np.float64)
    if b.size and np.any(np.diff(b) <= 0):
        raise ValueError("bin boundaries must be strictly increasing")
    v = np.asarray(list(values), dtype=np.float64)
    if np.isnan(v).any():
        raise RecordError("cannot discretize NaN")
    idx = np.searchsorted(b, v, side="right")
    return [f"bin_{k}" for k in idx]


@dataclass(frozen=True)
class GranularityRuleSet:
    """Per-field retained values; everything else collapses to ``other``.

    ``fields`` fixes the order in which ruled fields are appended to a
    behavior token.  Fields listed in ``bins`` are numeric and get
    discretized before the retained-value lookup.
    """

    fields: tuple[str, ...]
    retained: Mapping[str, tuple[str, ...]]
    thresholds: Mapping[str, float]
    bins: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    other_token: str = OTHER

    def __post_init__(self):
        for f in self.fields:
            vals = self.retained.get(f)
            if vals is None:
                raise SchemaError(f"no retained values for field {f!r}")
            if len(set(vals)) != len(vals):
                raise SchemaError(f"duplicate retained values for field {f!r}")
            t = self.thresholds.get(f)
            if t is None or not 0.0 < t <= 1.0:
                raise SchemaError(f"bad threshold for field {f!r}: {t}")
        object.__setattr__(self, "_sets", {f: frozenset(v) for f, v in self.retained.items()})

    def bucket(self, name: str, raw: str | None) -> str | None:
        """Reduced value of one field, or ``None`` if the event lacks it."""
        if raw is None:
            return None
        if name in self.bins:
            try:
                x = float(raw)
            except ValueError:
                return self.other_token
            if math.isnan(x):
                return self.other_token
            raw = discretize_numeric([x], self.bins[name])[0]
        return raw if raw in self._sets[name] else self.other_token

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "granularity_rules",
            "other_token": self.other_token,
            "fields": [
                {
                    "name": f,
                    "threshold": self.thresholds[f],
                    "retained": list(self.retained[f]),
                    **({"bins": list(self.bins[f])} if f in self.bins else {}),
                }
                for f in self.fields
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GranularityRuleSet:
        _check_version(d, "granularity_rules")
        fs = d["fields"]
        return cls(
            fields=tuple(f["name"] for f in fs),
            retained={f["name"]: tuple(f["retained"]) for f in fs},
            thresholds={f["name"]: float(f["threshold"]) for f in fs},
            bins={f["name"]: tuple(f["bins"]) for f in fs if "bins" in f},
            other_token=d.get("other_token", OTHER),
        )


def _check_version(d: Mapping, kind: str):
    v = d.get("format_version")
    if v != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version {v!r} (expected {FORMAT_VERSION})")
    if d.get("kind") != kind:
        raise SchemaError(f"expected a {kind} file, got {d.get('kind')!r}")


def field_counts(
    events: Iterable[Event], name: str, bins: Sequence[float] | None = None
) -> Counter:
    counts: Counter = Counter()
    for ev in events:
        raw = ev.get(name)
        if raw is None:
            continue
        if bins is not None:
            try:
                raw = discretize_numeric([float(raw)], bins)[0]
            except (ValueError, RecordError):
                continue
        counts[raw] += 1
    return counts


def fit_rules(
    events: Sequence[Event],
    fields: Sequence[str],
    threshold: float = 0.9,
    *,
    thresholds: Mapping[str, float] | None = None,
    bins: Mapping[str, Sequence[float]] | None = None,
) -> tuple[GranularityRuleSet, dict[str, list[CoverageRow]]]:
    """Fit one retained-value list per field; fields never seen retain nothing."""
    thresholds = dict(thresholds or {})
    bins = {k: tuple(v) for k, v in (bins or {}).items()}
    retained: dict[str, tuple[str, ...]] = {}
    coverage: dict[str, list[CoverageRow]] = {}
    for f in fields:
        t = thresholds.setdefault(f, threshold)
        counts = field_counts(events, f, bins.get(f))
        if counts:
            keep, rows = fit_granularity(counts, t)
        else:
            keep, rows = [], []
        retained[f] = tuple(keep)
        coverage[f] = rows
    rules = GranularityRuleSet(tuple(fields), retained, thresholds, bins)
    return rules, coverage


def apply_granularity(event: Event, rules: GranularityRuleSet) -> str:
    """Behavior token: ``event_type|field=value|...`` over the ruled fields present."""
    parts = [event.event_type]
    for f in rules.fields:
        v = rules.bucket(f, event.get(f))
        if v is not None:
            parts.append(f"{f}={v}")
    return TOKEN_SEP.join(parts)


def format_coverage(coverage: Mapping[str, list[CoverageRow]]) -> str:
    lines = [f"{'field':<20} {'value':<20} {'count':>14} {'total':>14} {'share':>9} kept"]
    for f, rows in coverage.items():
        for r in rows:
            lines.append(
                f"{f:<20} {r.value:<20} {r.count:>14,} {r.total:>14,} {r.share:>9.6f} "
                f"{'yes' if r.retained else 'no'}"
            )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# journeys and vocabulary


@dataclass(frozen=True)
class Journey:
    customer_id: str
    events: tuple[Event, ...]
    reference_time: int

    def __len__(self):
        return len(self.events)


def build_journeys(
    events: Iterable[Event], max_len: int, reference_time: int | None = None
) -> list[Journey]:
    """Group by customer, sort by time (stable), keep the ``max_len`` latest events.

    Journeys come back sorted by customer id.  ``reference_time``
    defaults to the latest timestamp across all events.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    groups: dict[str, list[Event]] = defaultdict(list)
    latest = 0
    for ev in events:
        groups[ev.customer_id].append(ev)
        latest = max(latest, ev.action_time)
    ref = latest if reference_time is None else int(reference_time)
    out = []
    for cid in sorted(groups):
        evs = sorted(groups[cid], key=lambda e: e.action_time)
        out.append(Journey(cid, tuple(evs[-max_len:]), ref))
    return out


PAD = "<pad>"
OOV = "<oov>"
PAD_ID = 0
OOV_ID = 1


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != (PAD, OOV):
            raise SchemaError("vocabulary must start with the padding and OOV tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise SchemaError("duplicate vocabulary tokens")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids and self._ids[token] > OOV_ID

    def encode(self, token: str) -> int:
        i = self._ids.get(token, OOV_ID)
        return OOV_ID if i == PAD_ID else i

    def decode(self, i: int) -> str:
        return self.tokens[i]

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "vocabulary", "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: Mapping) -> Vocabulary:
        _check_version(d, "vocabulary")
        return cls(tuple(d["tokens"]))


def build_vocabulary(token_stream: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Ids 2.. in descending frequency (ties lexicographic); rarer tokens encode as OOV."""
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    counts = Counter(token_stream)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty token stream")
    kept = [t for t, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if c >= min_count]
    return Vocabulary((PAD, OOV, *(t for t in kept if t not in (PAD, OOV))))


# ---------------------------------------------------------------------------
# nonsequential features

FEATURE_KINDS = ("recency_flag", "one_hot_cross", "unique_count")
TOKEN_FIELD = "token"


@dataclass(frozen=True)
class FeatureSpec:
    """One nonsequential feature.

    recency_flag
        1 if the latest event matching ``field == value`` (any event when
        ``field`` is None) is at most ``days`` old.
    one_hot_cross
        1 if some event with ``field == value`` has an age in
        ``[window[0], window[1])`` days (``None`` upper end = unbounded).
    unique_count
        number of distinct values of ``field`` among events whose age is
        below ``days`` (all events when ``days`` is None).
    """

    name: str
    kind: str
    field: str | None = None
    value: str | None = None
    days: float | None = None
    window: tuple[float, float | None] | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        for k in ("field", "value", "days"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.window is not None:
            d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureSpec:
        w = d.get("window")
        return cls(
            name=d["name"],
            kind=d["kind"],
            field=d.get("field"),
            value=d.get("value"),
            days=d.get("days"),
            window=None if w is None else (w[0], w[1]),
        )


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]
    attribute_fields: tuple[str, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        known = set(CORE_FIELDS) | set(self.attribute_fields) | {TOKEN_FIELD}
        for f in self.features:
            if f.kind not in FEATURE_KINDS:
                raise SchemaError(f"{f.name}: unknown feature kind {f.kind!r}")
            if f.field is not None and f.field not in known:
                raise SchemaError(f"{f.name}: unknown field {f.field!r}")
            if f.kind == "recency_flag" and f.days is None:
                raise SchemaError(f"{f.name}: recency_flag needs days")
            if f.kind == "one_hot_cross" and (f.field is None or f.window is None):
                raise SchemaError(f"{f.name}: one_hot_cross needs field, value and window")
            if f.kind == "unique_count" and f.field is None:
                raise SchemaError(f"{f.name}: unique_count needs a field")

    def __len__(self):
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "feature_schema",
            "attribute_fields": list(self.attribute_fields),
            "features": [f.to_dict() for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureSchema:
        _check_version(d, "feature_schema")
        return cls(
            tuple(FeatureSpec.from_dict(f) for f in d["features"]),
            tuple(d.get("attribute_fields", ())),
        )

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def default_feature_schema(
    journeys: Sequence[Journey],
    rules: GranularityRuleSet | None = None,
    *,
    recency_days: Sequence[float] = (1, 7, 30),
    cross_field: str = "event_type",
    cross_windows: Sequence[tuple[float, float | None]] = ((0, 7), (7, None)),
    count_fields: Sequence[str] = ("event_type", "channel_type"),
) -> FeatureSchema:
    """Recency flags on the latest event, event-type x time-window crosses, unique counts."""
    feats = [FeatureSpec(f"recent_{d:g}d", "recency_flag", days=d) for d in recency_days]
    values = sorted({_field_value(ev, cross_field, rules) for j in journeys for ev in j.events} - {None})
    for v in values:
        for lo, hi in cross_windows:
            hi_s = "inf" if hi is None else f"{hi:g}"
            feats.append(
                FeatureSpec(f"{cross_field}={v}@{lo:g}-{hi_s}d", "one_hot_cross", cross_field, v, window=(lo, hi))
            )
    for f in count_fields:
        feats.append(FeatureSpec(f"unique_{f}", "unique_count", f))
    attrs = tuple(f for f in (rules.fields if rules else ()) if f not in CORE_FIELDS)
    return FeatureSchema(tuple(feats), attrs)


def _field_value(ev: Event, name: str, rules: GranularityRuleSet | None) -> str | None:
    if name == TOKEN_FIELD:
        return apply_granularity(ev, rules) if rules else ev.event_type
    raw = ev.get(name)
    if rules is not None and name in rules.retained:
        return rules.bucket(name, raw)
    return raw


def extract_nonseq(
    journey: Journey, schema: FeatureSchema, rules: GranularityRuleSet | None = None
) -> np.ndarray:
    """Feature vector in schema order; ruled fields are compared after bucketing."""
    if not journey.events:
        raise ValueError("cannot extract features from an empty journey")
    ages = [(journey.reference_time - ev.action_time) / SECONDS_PER_DAY for ev in journey.events]
    cache: dict[str, list] = {}

    def values(name):
        if name not in cache:
            cache[name] = [_field_value(ev, name, rules) for ev in journey.events]
        return cache[name]

    out = np.zeros(len(schema), dtype=np.float64)
    for i, f in enumerate(schema.features):
        if f.kind == "recency_flag":
            if f.field is None:
                matching = ages
            else:
                matching = [a for a, v in zip(ages, values(f.field)) if v == f.value]
            out[i] = float(bool(matching) and min(matching) <= f.days)
        elif f.kind == "one_hot_cross":
            lo, hi = f.window
            out[i] = float(
                any(
                    v == f.value and a >= lo and (hi is None or a < hi)
                    for a, v in zip(ages, values(f.field))
                )
            )
        else:
            seen = {
                v
                for a, v in zip(ages, values(f.field))
                if v is not None and (f.days is None or a < f.days)
            }
            out[i] = float(len(seen))
    return out


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass
class Sample:
    customer_id: str
    token_ids: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray
    nonseq: np.ndarray
    label: int | None = None
    tokens: tuple[str, ...] = ()

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def assemble_sample(
    journey: Journey,
    rules: GranularityRuleSet,
    vocab: Vocabulary,
    schema: FeatureSchema,
    l_max: int,
    label: int | None = None,
) -> Sample | None:
    """Right-padded model input for one journey; ``None`` (with a warning) if empty."""
    if not journey.events:
        log.warning("skipping empty journey for customer %s", journey.customer_id)
        return None
    recent = journey.events[-l_max:]
    tokens = tuple(apply_granularity(ev, rules) for ev in recent)
    n = len(tokens)
    ids = np.zeros(l_max, dtype=np.int64)
    ids[:n] = [vocab.encode(t) for t in tokens]
    pos = np.zeros(l_max, dtype=np.int64)
    pos[:n] = np.arange(n)
    mask = np.zeros(l_max, dtype=bool)
    mask[:n] = True
    return Sample(
        journey.customer_id, ids, pos, mask, extract_nonseq(journey, schema, rules), label, tokens
    )


@dataclass
class Dataset:
    """Stacked samples plus the header needed to check compatibility on load."""

    customer_ids: list[str]
    token_ids: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray
    nonseq: np.ndarray
    labels: np.ndarray
    vocab_size: int
    schema_hash: str

    @property
    def l_max(self) -> int:
        return self.token_ids.shape[1]

    def __len__(self):
        return len(self.customer_ids)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], vocab_size: int, schema_hash: str) -> Dataset:
        if not samples:
            raise ValueError("no samples")
        labels = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
        return cls(
            [s.customer_id for s in samples],
            np.stack([s.token_ids for s in samples]),
            np.stack([s.position_ids for s in samples]),
            np.stack([s.mask for s in samples]),
            np.stack([s.nonseq for s in samples]).astype(np.float64),
            labels,
            vocab_size,
            schema_hash,
        )

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            [self.customer_ids[i] for i in idx],
            self.token_ids[idx],
            self.position_ids[idx],
            self.mask[idx],
            self.nonseq[idx],
            self.labels[idx],
            self.vocab_size,
            self.schema_hash,
        )

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "samples",
            "l_max": self.l_max,
            "vocab_size": self.vocab_size,
            "n_features": int(self.nonseq.shape[1]),
            "schema_hash": self.schema_hash,
            "n_samples": len(self),
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(canonical_json(self.header()) + "\n")
            for i, cid in enumerate(self.customer_ids):
                n = int(self.mask[i].sum())
                rec = {
                    "customer_id": cid,
                    "token_ids": self.token_ids[i, :n].tolist(),
                    "nonseq": [float(x) for x in self.nonseq[i]],
                    "label": None if self.labels[i] < 0 else int(self.labels[i]),
                }
                fh.write(canonical_json(rec) + "\n")

    @classmethod
    def load(cls, path) -> Dataset:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            _check_version(header, "samples")
            l_max = header["l_max"]
            records = [json.loads(line) for line in fh if line.strip()]
        n = len(records)
        ids = np.zeros((n, l_max), dtype=np.int64)
        mask = np.zeros((n, l_max), dtype=bool)
        pos = np.zeros((n, l_max), dtype=np.int64)
        nonseq = np.zeros((n, header["n_features"]), dtype=np.float64)
        labels = np.full(n, -1, dtype=np.int64)
        for i, r in enumerate(records):
            k = len(r["token_ids"])
            ids[i, :k] = r["token_ids"]
            mask[i, :k] = True
            pos[i, :k] = np.arange(k)
            nonseq[i] = r["nonseq"]
            if r["label"] is not None:
                labels[i] = r["label"]
        return cls(
            [r["customer_id"] for r in records], ids, pos, mask, nonseq, labels,
            header["vocab_size"], header["schema_hash"],
        )


def prepare_dataset(
    journeys: Sequence[Journey],
    rules: GranularityRuleSet,
    vocab: Vocabulary,
    schema: FeatureSchema,
    l_max: int,
    labels: Mapping[str, int] | None = None,
) -> Dataset:
    """Assemble samples for every nonempty journey (and, if given, every labelled customer)."""
    samples = []
    for j in journeys:
        label = None
        if labels is not None:
            if j.customer_id not in labels:
                log.warning("no label for customer %s; skipping", j.customer_id)
                continue
            label = labels[j.customer_id]
        s = assemble_sample(j, rules, vocab, schema, l_max, label)
        if s is not None:
            samples.append(s)
    return Dataset.from_samples(samples, len(vocab), schema.hash())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_json(obj: Mapping, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, ensure_ascii=False)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
