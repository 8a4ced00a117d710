"""Synthetic customer journeys with planted labelling rules.

Every customer gets a background journey (long-tailed currencies,
skewed event types) plus the trigger events of one rule, which decides
the label:

* sequential rule ``(a, b)`` fires when ``a`` happens before ``b``; the
  reversed pair belongs to a different class, so the same bag of events
  maps to two classes depending on order;
* nonsequential rule ``{a, ...}`` fires when all its triggers are present.

Sequential pairs are drawn from the smallest trigger alphabet that has
enough unordered pairs, so each trigger event type takes part in several
rules and only its position relative to the partner tells them apart.

Trigger event types never occur in background traffic.  The events of
a sequential rule fall inside one interval between consecutive
``quiet_boundaries_days`` cut points (any number of background events
may sit between them), so time-window features cannot reveal their
order.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .journey import SECONDS_PER_DAY, Event, write_events
from .numerics import make_rng

SEQUENTIAL = "sequential"
NONSEQ = "nonseq"

CURRENCIES = (
    "TWD", "USD", "JPY", "HKD", "CNY", "EUR", "KRW", "THB", "SGD", "GBP",
    "AUD", "MYR", "VND", "PHP", "CAD", "NZD", "CHF", "IDR", "MOP", "AED",
    "SEK", "TRY", "INR", "ZAR", "MXN", "BRL", "NOK", "DKK", "PLN", "CZK",
)

# (event_type, object_type, action_type, weight, channels)
BACKGROUND = (
    ("cc_transaction", "credit_card_acct", "40", 9.0,
     ("merchant_nbr", "online_merchant", "overseas_merchant", "recurring_merchant")),
    ("app_login", "digital_acct", "10", 5.0, ("mobile_app",)),
    ("web_browse", "digital_acct", "11", 3.0, ("web", "mobile_web")),
    ("balance_inquiry", "deposit_acct", "20", 2.5, ("ivr", "mobile_app", "atm")),
    ("atm_withdrawal", "deposit_acct", "21", 2.0, ("atm",)),
    ("fund_transfer", "deposit_acct", "22", 1.5, ("mobile_app", "web", "branch")),
    ("points_inquiry", "rewards_acct", "30", 1.0, ("mobile_app", "web")),
    ("branch_visit", "customer", "50", 0.5, ("branch",)),
)

TRIGGER_STEMS = (
    "store_purchase", "bill_payment", "card_activation", "limit_increase",
    "overseas_purchase", "installment_apply", "statement_request", "autopay_setup",
    "points_redeem", "card_replacement", "password_reset", "txn_dispute",
    "annual_fee_charge", "cash_advance", "card_block", "address_change",
)
TRIGGER_CHANNELS = ("convenience_store", "mobile_app", "ivr", "web", "branch", "merchant_nbr")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Rule:
    class_id: int
    kind: str
    tokens: tuple[str, ...]

    def fires(self, event_types: Sequence[str]) -> bool:
        if self.kind == NONSEQ:
            present = set(event_types)
            return all(t in present for t in self.tokens)
        it = iter(event_types)
        return all(any(e == t for e in it) for t in self.tokens)


@dataclass(frozen=True)
class SynthConfig:
    n_customers: int = 10_000
    n_classes: int = 24
    rule_mix: float = 0.8
    noise_rate: float = 0.05
    min_len: int = 3
    max_len: int = 12
    tail_exponent: float = 1.2
    history_days: float = 90.0
    min_gap_days: float = 0.01
    quiet_boundaries_days: tuple[float, ...] = (1.0, 7.0, 30.0)
    reference_time: int = 1572566400
    seed: int = 7
    rules: tuple[Rule, ...] | None = None
    class_priors: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_customers < 1:
            raise SynthConfigError("n_customers must be positive")
        if self.n_classes < 2:
            raise SynthConfigError("need at least two classes")
        if not 0.0 <= self.rule_mix <= 1.0:
            raise SynthConfigError("rule_mix must lie in [0, 1]")
        if not 0.0 <= self.noise_rate < 1.0:
            raise SynthConfigError("noise_rate must lie in [0, 1)")
        if not 2 <= self.min_len <= self.max_len:
            raise SynthConfigError("need 2 <= min_len <= max_len")
        if self.min_gap_days <= 0:
            raise SynthConfigError("min_gap_days must be positive")


def default_rules(n_classes: int, rule_mix: float) -> tuple[Rule, ...]:
    """Ordered pairs (both orders = two classes) for the sequential share, single triggers otherwise."""
    n_pairs = int(round(rule_mix * n_classes / 2))
    n_nonseq = n_classes - 2 * n_pairs
    if rule_mix < 1.0 and n_nonseq == 0:
        n_pairs -= 1
        n_nonseq = 2
    if rule_mix > 0 and n_pairs == 0:
        raise SynthConfigError("too few classes for a sequential share")
    if n_nonseq < 0:
        raise SynthConfigError("an all-sequential rule set needs an even class count")
    # smallest alphabet with enough unordered pairs; every trigger is shared by several rules
    n_alpha = 0
    while n_alpha * (n_alpha - 1) // 2 < n_pairs:
        n_alpha += 1
    pairs = list(itertools.combinations(range(n_alpha), 2))[:n_pairs]
    rules = []
    for k, (i, j) in enumerate(pairs):
        a, b = _trigger_name(i), _trigger_name(j)
        rules.append(Rule(2 * k, SEQUENTIAL, (a, b)))
        rules.append(Rule(2 * k + 1, SEQUENTIAL, (b, a)))
    for j in range(n_nonseq):
        rules.append(Rule(2 * n_pairs + j, NONSEQ, (_trigger_name(n_alpha + j),)))
    return tuple(rules)


def _trigger_name(i: int) -> str:
    stem = TRIGGER_STEMS[i % len(TRIGGER_STEMS)]
    return f"{stem}_{i // len(TRIGGER_STEMS)}" if i >= len(TRIGGER_STEMS) else stem


def default_priors(rules: Sequence[Rule], rule_mix: float) -> tuple[float, ...]:
    n_seq = sum(r.kind == SEQUENTIAL for r in rules)
    n_non = len(rules) - n_seq
    if n_seq == 0 or n_non == 0:
        return tuple(1.0 / len(rules) for _ in rules)
    return tuple(rule_mix / n_seq if r.kind == SEQUENTIAL else (1 - rule_mix) / n_non for r in rules)


def validate_rules(rules: Sequence[Rule], n_classes: int):
    """Every class has exactly one rule and no planted journey can fire two rules."""
    ids = sorted(r.class_id for r in rules)
    if ids != list(range(n_classes)):
        raise SynthConfigError(f"rules must cover classes 0..{n_classes - 1} exactly once")
    background = {b[0] for b in BACKGROUND}
    for r in rules:
        if r.kind not in (SEQUENTIAL, NONSEQ):
            raise SynthConfigError(f"class {r.class_id}: unknown rule kind {r.kind!r}")
        if not r.tokens:
            raise SynthConfigError(f"class {r.class_id}: rule without tokens")
        if set(r.tokens) & background:
            raise SynthConfigError(f"class {r.class_id}: trigger collides with background events")
        if r.kind == SEQUENTIAL and len(set(r.tokens)) != len(r.tokens):
            raise SynthConfigError(f"class {r.class_id}: repeated token in a sequential rule")
    for r in rules:
        for other in rules:
            if other is not r and other.fires(r.tokens):
                raise SynthConfigError(
                    f"rules for classes {r.class_id} and {other.class_id} both fire on {r.tokens}"
                )


@dataclass
class SynthData:
    events: list[Event]
    labels: dict[str, int]
    manifest: dict
    rule_labels: dict[str, int] = field(default_factory=dict)


def _long_tail(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    rules = config.rules if config.rules is not None else default_rules(config.n_classes, config.rule_mix)
    validate_rules(rules, config.n_classes)
    priors = np.asarray(config.class_priors or default_priors(rules, config.rule_mix), dtype=np.float64)
    if priors.shape != (config.n_classes,) or (priors < 0).any() or abs(priors.sum() - 1) > 1e-9:
        raise SynthConfigError("class_priors must be a distribution over the classes")
    by_class = {r.class_id: r for r in rules}

    rng = make_rng(config.seed)
    cur_p = _long_tail(len(CURRENCIES), config.tail_exponent)
    bg_w = np.array([b[3] for b in BACKGROUND])
    bg_w /= bg_w.sum()
    trig_channel = {}
    for i, t in enumerate(sorted({t for r in rules for t in r.tokens})):
        trig_channel[t] = TRIGGER_CHANNELS[i % len(TRIGGER_CHANNELS)]

    events: list[Event] = []
    labels: dict[str, int] = {}
    rule_labels: dict[str, int] = {}
    n_flipped = 0
    ref = config.reference_time
    horizon = config.history_days
    for i in range(config.n_customers):
        cid = f"C{i:06d}"
        cls = int(rng.choice(config.n_classes, p=priors))
        rule = by_class[cls]
        n = int(rng.integers(config.min_len, config.max_len + 1))
        n_bg = max(n - len(rule.tokens), 0)
        timed: list[tuple[float, int, dict]] = []
        for age in rng.uniform(0.0, horizon, size=n_bg):
            k = int(rng.choice(len(BACKGROUND), p=bg_w))
            etype, obj, act, _, chans = BACKGROUND[k]
            rec = dict(event_type=etype, object_type=obj, action_type=act,
                       channel_type=chans[int(rng.integers(len(chans)))], attributes={})
            if etype == "cc_transaction":
                rec["attributes"] = {
                    "txn_currency_code": CURRENCIES[int(rng.choice(len(CURRENCIES), p=cur_p))],
                    "txn_amount": f"{float(np.round(rng.lognormal(7.0, 1.2), 0)):.0f}",
                }
            timed.append((float(age), 0, rec))
        for order, (age, tok) in enumerate(zip(_trigger_ages(rule, config, rng), rule.tokens)):
            rec = dict(event_type=tok, object_type="credit_card_acct", action_type="90",
                       channel_type=trig_channel[tok], attributes={})
            timed.append((age, order, rec))
        # oldest first; for equal ages the earlier trigger stays first
        timed.sort(key=lambda x: (-x[0], x[1]))
        last_t = None
        for age, _, rec in timed:
            t = ref - int(round(age * SECONDS_PER_DAY))
            if last_t is not None and t < last_t:
                t = last_t
            last_t = t
            events.append(Event(customer_id=cid, action_time=t, **rec))
        label = cls
        if config.noise_rate and rng.random() < config.noise_rate:
            label = int((cls + rng.integers(1, config.n_classes)) % config.n_classes)
            n_flipped += 1
        labels[cid] = label
        rule_labels[cid] = cls

    data = SynthData(events, labels, {}, rule_labels)
    data.manifest = build_manifest(config, rules, priors, data, n_flipped)
    return data


def _trigger_ages(rule: Rule, config: SynthConfig, rng) -> list[float]:
    horizon = config.history_days
    if rule.kind == NONSEQ:
        return [float(a) for a in rng.uniform(0.0, horizon, size=len(rule.tokens))]
    cuts = [0.0, *sorted(b for b in config.quiet_boundaries_days if 0 < b < horizon), horizon]
    widths = np.diff(cuts)
    seg = int(rng.choice(len(widths), p=widths / widths.sum()))
    ages = np.sort(rng.uniform(cuts[seg], cuts[seg + 1], size=len(rule.tokens)))[::-1]
    min_gap = config.min_gap_days
    for k in range(1, len(ages)):
        if ages[k - 1] - ages[k] < min_gap:
            ages[k] = ages[k - 1] - min_gap
    if ages[-1] < cuts[seg]:
        ages = ages + (cuts[seg] - ages[-1])
    return [float(a) for a in ages]


# ---------------------------------------------------------------------------
# oracles and reporting


def grouping_bayes_rate(signatures: Iterable[Hashable], labels: Iterable[int]) -> float:
    """Accuracy of the best classifier that sees only ``signature``.

    Brute force: group samples by signature and predict each group's
    majority label (ties to the smaller label).
    """
    groups: dict[Hashable, Counter] = defaultdict(Counter)
    n = 0
    for s, y in zip(signatures, labels):
        groups[s][int(y)] += 1
        n += 1
    if n == 0:
        raise ValueError("no samples")
    correct = sum(max(c.values()) for c in groups.values())
    return correct / n


def trigger_bag_signature(event_types: Sequence[str], triggers: frozenset[str]) -> tuple:
    """Order-free view of a journey: counts of each trigger event type."""
    return tuple(sorted(Counter(t for t in event_types if t in triggers).items()))


def order_only_fraction(journeys: Mapping[str, Sequence[str]], labels: Mapping[str, int],
                        triggers: frozenset[str]) -> float:
    """Fraction of customers an order-free classifier must get wrong."""
    cids = sorted(journeys)
    sigs = [trigger_bag_signature(journeys[c], triggers) for c in cids]
    return 1.0 - grouping_bayes_rate(sigs, [labels[c] for c in cids])


def build_manifest(config: SynthConfig, rules, priors, data: SynthData, n_flipped: int) -> dict:
    seqs: dict[str, list[str]] = defaultdict(list)
    for ev in data.events:
        seqs[ev.customer_id].append(ev.event_type)
    triggers = frozenset(t for r in rules for t in r.tokens)
    counts = Counter(data.labels.values())
    cfg = asdict(config)
    cfg.pop("rules")
    cfg.pop("class_priors")
    return {
        "format_version": 1,
        "kind": "synth_manifest",
        "config": cfg,
        "n_classes": config.n_classes,
        "rules": [{"class_id": r.class_id, "kind": r.kind, "tokens": list(r.tokens)} for r in rules],
        "class_priors": [float(p) for p in priors],
        "label_counts": [counts.get(c, 0) for c in range(config.n_classes)],
        "n_customers": config.n_customers,
        "n_events": len(data.events),
        "n_flipped": n_flipped,
        "order_only_fraction": order_only_fraction(seqs, data.labels, triggers),
    }


def rules_from_manifest(manifest: Mapping) -> tuple[Rule, ...]:
    return tuple(Rule(r["class_id"], r["kind"], tuple(r["tokens"])) for r in manifest["rules"])


def describe(manifest: Mapping) -> str:
    lines = [
        f"customers: {manifest['n_customers']}   events: {manifest['n_events']}   "
        f"classes: {manifest['n_classes']}   flipped labels: {manifest['n_flipped']}",
        f"order-only fraction s = {manifest['order_only_fraction']:.4f}",
        "",
        f"{'class':>5} {'prior':>7} {'count':>7}  rule",
    ]
    for r, p, c in zip(manifest["rules"], manifest["class_priors"], manifest["label_counts"]):
        joiner = " THEN " if r["kind"] == SEQUENTIAL else " AND "
        lines.append(f"{r['class_id']:>5} {p:>7.4f} {c:>7}  {r['kind']:<10} {joiner.join(r['tokens'])}")
    return "\n".join(lines)


def write_synth(data: SynthData, out_dir) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "events": os.path.join(out_dir, "events.jsonl"),
        "labels": os.path.join(out_dir, "labels.csv"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    write_events(data.events, paths["events"])
    write_labels(data.labels, paths["labels"])
    with open(paths["manifest"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data.manifest, fh, indent=2)
        fh.write("\n")
    return paths


def write_labels(labels: Mapping[str, int], path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["customer_id", "class_id"])
        for cid in sorted(labels):
            w.writerow([cid, labels[cid]])


def read_labels(path) -> dict[str, int]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["customer_id"]: int(row["class_id"]) for row in csv.DictReader(fh)}
