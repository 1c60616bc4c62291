"""Greedy and beam-search reply generation.

Both decoders mask PAD, UNK, and SOS logits to -inf before the softmax, so
those tokens never appear in output. For latent variants z is drawn once
per generation from the prior, not once per hypothesis, so beam effects
stay separate from latent noise. Beam hypotheses are ranked by cumulative
log-probability divided by token count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Rng, Tensor
from .corpus import EOU, PAD, SOS, UNK
from .errors import ContractError

BANNED_TOKENS = (PAD, UNK, SOS)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    masked = logits.copy()
    masked[list(BANNED_TOKENS)] = -np.inf
    shifted = masked - masked.max()
    return shifted - np.log(np.exp(shifted).sum())


def _prepare(ckpt: M.Checkpoint, context, rng: Rng):
    cfg = ckpt.config
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    c = M.context_state(params, cfg, context)
    z = None
    if cfg.has_latent:
        prior, _ = M.prior_posterior(params, cfg, c)
        z = ad.gaussian_sample(prior.mu, prior.var, rng)
    return params, cfg, c, z


def greedy(ckpt: M.Checkpoint, context, max_len: int = 50, rng: Rng = None):
    """Argmax decoding (ties break toward the lowest token ID); stops at EOU
    or max_len."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    params, cfg, c, z = _prepare(ckpt, context, rng or Rng(0))
    out = []
    prev = SOS
    state = None
    for _ in range(max_len):
        logits, state = M.decoder_step(params, cfg, prev, c, z, state)
        tok = int(np.argmax(_log_softmax(logits)))
        out.append(tok)
        if tok == EOU:
            break
        prev = tok
    return tuple(out)


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished: bool
    state: object  # decoder (h, c), None once finished

    @property
    def score(self) -> float:
        return self.logprob / max(1, len(self.tokens))


def beam_search(ckpt: M.Checkpoint, context, B: int = 5, max_len: int = 50, rng: Rng = None):
    """Length-normalized beam search; returns hypotheses ranked best-first
    as (tokens, normalized score). B=1 reproduces greedy exactly."""
    if B < 1:
        raise ContractError("beam width must be >= 1")
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    params, cfg, c, z = _prepare(ckpt, context, rng or Rng(0))

    beam = [Hypothesis((), 0.0, False, None)]
    for _ in range(max_len):
        candidates = []
        any_active = False
        for hyp in beam:
            if hyp.finished:
                candidates.append(hyp)
                continue
            any_active = True
            prev = hyp.tokens[-1] if hyp.tokens else SOS
            logits, state = M.decoder_step(params, cfg, prev, c, z, hyp.state)
            logp = _log_softmax(logits)
            for tok in range(len(logp)):
                if not np.isfinite(logp[tok]):
                    continue
                tokens = hyp.tokens + (tok,)
                done = tok == EOU
                candidates.append(
                    Hypothesis(tokens, hyp.logprob + logp[tok], done, None if done else state)
                )
        if not any_active:
            break
        candidates.sort(key=lambda h: -h.score)
        beam = candidates[:B]
        if all(h.finished for h in beam):
            break
    beam = [Hypothesis(h.tokens, h.logprob, True, None) for h in beam]
    beam.sort(key=lambda h: -h.score)
    return [(h.tokens, h.score) for h in beam]
