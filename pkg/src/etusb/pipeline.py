"""End-to-end helpers shared by the command line, the notebooks and the tests.

Each step mirrors one CLI subcommand: fit granularity rules on raw
events, turn journeys into a :class:`~etusb.journey.Dataset`, train, and
score.  Nothing here holds state; artifacts are passed explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from . import journey as J
from .encoder import ModelConfig

DEFAULT_RULE_FIELDS = ("channel_type", "txn_currency_code")
DEFAULT_THRESHOLD = 0.90
DEFAULT_L_MAX = 20


@dataclass
class Prepared:
    rules: J.GranularityRuleSet
    coverage: dict[str, list[J.CoverageRow]]
    vocab: J.Vocabulary
    schema: J.FeatureSchema
    journeys: list[J.Journey]
    dataset: J.Dataset

    def model_config(self, **overrides) -> ModelConfig:
        kw = dict(vocab_size=len(self.vocab), n_features=len(self.schema), l_max=self.dataset.l_max)
        kw.update(overrides)
        return ModelConfig(**kw)


def prepare(
    events: Sequence[J.Event],
    labels: Mapping[str, int] | None = None,
    *,
    rule_fields: Sequence[str] = DEFAULT_RULE_FIELDS,
    threshold: float = DEFAULT_THRESHOLD,
    l_max: int = DEFAULT_L_MAX,
    reference_time: int | None = None,
    min_count: int = 1,
) -> Prepared:
    """Fit rules, vocabulary and feature schema on ``events``, then assemble samples."""
    rules, coverage = J.fit_rules(events, rule_fields, threshold)
    journeys = J.build_journeys(events, l_max, reference_time=reference_time)
    vocab = J.build_vocabulary((J.apply_granularity(e, rules) for j in journeys for e in j.events), min_count)
    schema = J.default_feature_schema(journeys, rules)
    data = J.prepare_dataset(journeys, rules, vocab, schema, l_max, labels)
    return Prepared(rules, coverage, vocab, schema, journeys, data)


def apply_fitted(
    events: Sequence[J.Event],
    rules: J.GranularityRuleSet,
    vocab: J.Vocabulary,
    schema: J.FeatureSchema,
    *,
    l_max: int = DEFAULT_L_MAX,
    labels: Mapping[str, int] | None = None,
    reference_time: int | None = None,
) -> J.Dataset:
    """Samples for new events using artifacts fitted elsewhere."""
    journeys = J.build_journeys(events, l_max, reference_time=reference_time)
    return J.prepare_dataset(journeys, rules, vocab, schema, l_max, labels)


def nonseq_bayes_rate(manifest: Mapping) -> float:
    """Best accuracy reachable without order information, as measured by the generator."""
    return 1.0 - float(manifest["order_only_fraction"])
