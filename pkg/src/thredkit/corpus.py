"""Corpus ingestion: eou-lines files, vocabulary building, encoding, splits.

A corpus file holds one dialog per line, utterances separated by the
literal token ``__eou__``, tokens whitespace-separated. Input is assumed
pre-tokenized; lowercasing is on by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from collections import Counter

from .autodiff import Rng
from .errors import ConfigError, ContractError, EmptyCorpusError

EOU_SEP = "__eou__"

PAD, UNK, EOU, SOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", EOU_SEP, "<sos>")
NUM_SPECIALS = 4


@dataclass(frozen=True)
class RawDialog:
    """Dialog whose utterances are still token strings."""

    utterances: tuple
    source_id: str = ""


@dataclass(frozen=True)
class Dialog:
    """Encoded dialog: each utterance is a tuple of token IDs ending in EOU."""

    utterances: tuple
    source_id: str = ""

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise ContractError("a dialog needs at least 2 utterances (context + reply)")


class Vocabulary:
    """Token <-> ID bijection. IDs 0-3 are reserved specials; the rest are
    assigned in descending corpus frequency, ties broken lexicographically."""

    def __init__(self, tokens, freqs=None):
        self.tokens = list(SPECIAL_TOKENS) + list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ConfigError("duplicate token in vocabulary")
        self.freq = dict(freqs) if freqs else {}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.id_of

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode_token(self, token: str) -> int:
        return self.id_of.get(token, UNK)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if lines[:NUM_SPECIALS] != list(SPECIAL_TOKENS):
            raise ConfigError(f"vocabulary file {path} lacks the special-token header")
        return cls(lines[NUM_SPECIALS:])


def load_corpus(path, fmt: str = "eou-lines", lowercase: bool = True):
    """Read a corpus file. Returns (dialogs, skipped_line_count).

    Lines yielding fewer than 2 non-empty utterances are skipped and counted.
    """
    if fmt != "eou-lines":
        raise ConfigError(f"unknown corpus format: {fmt!r}")
    dialogs = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lowercase:
                line = line.lower()
            utts = []
            for chunk in line.split(EOU_SEP):
                toks = chunk.split()
                if toks:
                    utts.append(tuple(toks))
            if len(utts) < 2:
                skipped += 1
                continue
            dialogs.append(RawDialog(tuple(utts), source_id=f"{path}:{lineno}"))
    if not dialogs:
        raise EmptyCorpusError(f"no valid dialogs in {path}")
    return dialogs, skipped


def build_vocab(dialogs, top_k: int = 20000) -> Vocabulary:
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    counts = Counter()
    for d in dialogs:
        for utt in d.utterances:
            counts.update(utt)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return Vocabulary([t for t, _ in ranked], freqs=dict(ranked))


def encode(dialog: RawDialog, vocab: Vocabulary) -> Dialog:
    utts = tuple(
        tuple(vocab.encode_token(t) for t in utt) + (EOU,) for utt in dialog.utterances
    )
    return Dialog(utts, source_id=dialog.source_id)


def decode(dialog: Dialog, vocab: Vocabulary) -> RawDialog:
    utts = tuple(
        tuple(vocab.token_of(i) for i in utt if i != EOU) for utt in dialog.utterances
    )
    return RawDialog(utts, source_id=dialog.source_id)


def split(dialogs, ratios, seed: int = 0):
    """Deterministic disjoint (train, valid, test) partition."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ConfigError(f"split ratios must be 3 fractions summing to 1, got {ratios}")
    order = list(range(len(dialogs)))
    Rng(seed).shuffle(order)
    n = len(dialogs)
    b1 = int(round(ratios[0] * n))
    b2 = int(round((ratios[0] + ratios[1]) * n))
    shuffled = [dialogs[i] for i in order]
    return shuffled[:b1], shuffled[b1:b2], shuffled[b2:]
