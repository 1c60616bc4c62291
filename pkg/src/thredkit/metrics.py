"""Evaluation metrics: perplexity, Distinct-n, TopicDiv, the F-beta
composite, and the divergence-variance diagnostic."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng
from .corpus import EOU
from .errors import ContractError, EmptyCorpusError
from .model import Checkpoint, reply_logprobs
from .topics import TopicModel, topic_kl, topic_vector

DEFAULT_BETAS = (0.5, 1.0, 1.5)


@dataclass
class MetricsReport:
    perplexity: float
    dist1: float
    dist2: float
    topic_div: float
    f_scores: dict  # beta -> {"dist1": F, "dist2": F}
    skipped_pairs: int
    n_responses: int

    def to_json(self) -> str:
        doc = {
            "perplexity": self.perplexity,
            "dist1": self.dist1,
            "dist2": self.dist2,
            "topic_div": self.topic_div,
            "f": {_beta_key(b): fs for b, fs in self.f_scores.items()},
            "skipped_pairs": self.skipped_pairs,
            "n_responses": self.n_responses,
        }
        return json.dumps(doc, indent=2)


def _beta_key(beta: float) -> str:
    return f"{beta:g}"


def perplexity_from_logprobs(logprob_lists) -> float:
    """exp(-(sum of log-probs) / (token count)) over all reply tokens."""
    total = 0.0
    count = 0
    for lp in logprob_lists:
        lp = np.asarray(lp, dtype=np.float64)
        total += lp.sum()
        count += lp.size
    if count == 0:
        raise ContractError("perplexity needs at least one token")
    return float(np.exp(-total / count))


def perplexity(ckpt: Checkpoint, pairs, seed: int = 0, samples: int = 1) -> float:
    """Teacher-forced perplexity of reference replies. Latent variants draw
    z from the prior, averaging ``samples`` draws."""
    if not pairs:
        raise ContractError("corpus must be non-empty")
    rng = Rng(seed)
    return perplexity_from_logprobs(
        reply_logprobs(ckpt, context, reply, rng, samples=samples) for context, reply in pairs
    )


def _ngrams(tokens, n):
    toks = [t for t in tokens if t != EOU]
    return [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]


def distinct_n(responses, n: int) -> float:
    """Corpus-level distinct n-grams over total n-grams, EOU excluded."""
    if n not in (1, 2):
        raise ContractError(f"distinct_n supports n in (1, 2), got {n}")
    seen = set()
    total = 0
    for resp in responses:
        grams = _ngrams(resp, n)
        seen.update(grams)
        total += len(grams)
    if total == 0:
        raise ContractError("no n-grams in responses")
    return len(seen) / total


def topic_div(contexts, responses, model: TopicModel, eps: float = 1e-8):
    """Mean topic KL over (context, response) pairs.

    Pairs where either side matches zero content words are skipped and
    counted. Returns (mean divergence, skipped count).
    """
    if len(contexts) != len(responses):
        raise ContractError(f"paired lists differ in length: {len(contexts)} vs {len(responses)}")
    values = []
    skipped = 0
    for ctx, resp in zip(contexts, responses):
        tc = topic_vector(ctx, model)
        tr = topic_vector(resp, model)
        if tc.matched_tokens == 0 or tr.matched_tokens == 0:
            skipped += 1
            continue
        values.append(topic_kl(tc, tr, eps))
    if not values:
        raise EmptyCorpusError("all context/response pairs were skipped")
    return float(np.mean(values)), skipped


def f_score(dist: float, topic_divergence: float, beta: float) -> float:
    """(1 + b^2) * Dist * (1 - TopicDiv) / (b^2 * Dist + (1 - TopicDiv))."""
    if beta <= 0:
        raise ContractError("beta must be positive")
    if topic_divergence > 1.0 or topic_divergence < 0.0:
        warnings.warn(f"topic_div {topic_divergence} clamped to [0, 1] for F score")
        topic_divergence = min(max(topic_divergence, 0.0), 1.0)
    coherence = 1.0 - topic_divergence
    denom = beta * beta * dist + coherence
    if denom == 0.0:
        return 0.0
    return (1.0 + beta * beta) * dist * coherence / denom


def divergence_variance(values) -> float:
    """Population variance of a series of per-epoch topic divergences."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size < 2:
        raise ContractError("variance needs at least 2 values")
    return float(np.var(values))


def build_report(
    responses,
    contexts=None,
    topic_model: TopicModel = None,
    ckpt: Checkpoint = None,
    reference_pairs=None,
    betas=DEFAULT_BETAS,
    seed: int = 0,
) -> MetricsReport:
    d1 = distinct_n(responses, 1)
    d2 = distinct_n(responses, 2)
    td = float("nan")
    skipped = 0
    if contexts is not None and topic_model is not None:
        td, skipped = topic_div(contexts, responses, topic_model)
    ppl = float("nan")
    if ckpt is not None and reference_pairs:
        ppl = perplexity(ckpt, reference_pairs, seed=seed)
    fs = {}
    if np.isfinite(td):
        for b in betas:
            fs[b] = {"dist1": f_score(d1, td, b), "dist2": f_score(d2, td, b)}
    return MetricsReport(ppl, d1, d2, td, fs, skipped, len(responses))
