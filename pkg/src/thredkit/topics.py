"""Topic pipeline: sparse PPMI word-context matrix, NMF densification,
topic vectors, and the scaled topic KL divergence.

Content words are vocabulary entries that are neither specials nor
stopwords. Co-occurrence is counted over a symmetric window of content
words within each utterance; self-pairs (same word type) are excluded.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Rng
from .corpus import NUM_SPECIALS, Vocabulary
from .errors import ConfigError, EmptyCorpusError, ShapeError

TOPIC_MAGIC = b"TPMX"
TOPIC_VERSION = 1

# Small built-in list of English function words; callers may supply their own.
DEFAULT_STOPWORDS = frozenset(
    """
    a an the this that these those some any each every no
    i you he she it we they me him her us them my your his its our their
    mine yours hers ours theirs myself yourself himself herself itself
    am is are was were be been being do does did doing have has had having
    will would shall should can could may might must
    and or but if then else because so as than too very just not nor
    of in on at by for with about against between into through during
    before after above below to from up down out off over under again
    there here when where why how what which who whom whose
    's 'm 're 've 'll 'd n't
    . , ! ? ; : ' " ` `` '' ( ) [ ] { } - -- ... __eou__
    """.split()
)


@dataclass
class PpmiMatrix:
    """Sparse PPMI matrix over content words. Row i and column i index the
    same word; ``word_index`` maps vocabulary ID -> row."""

    matrix: sp.csr_matrix
    word_index: dict
    row_tokens: list

    @property
    def n_words(self) -> int:
        return self.matrix.shape[0]


@dataclass
class TopicModel:
    W: np.ndarray  # |V_w| x p, nonnegative
    H: np.ndarray  # p x |V_w|, nonnegative
    p: int
    word_index: dict  # vocabulary ID -> row of W
    row_tokens: list  # vocabulary IDs in row order
    objectives: list = None  # per-iteration Frobenius objectives, if factorized here


@dataclass
class TopicVector:
    values: np.ndarray
    matched_tokens: int


def content_word_ids(vocab: Vocabulary, stopwords=DEFAULT_STOPWORDS):
    """Vocabulary IDs of non-special, non-stopword tokens, ascending."""
    return [
        i
        for i in range(NUM_SPECIALS, len(vocab))
        if vocab.token_of(i) not in stopwords
    ]


def build_ppmi(dialogs, vocab: Vocabulary, stopwords=DEFAULT_STOPWORDS, window: int = 5) -> PpmiMatrix:
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    content = content_word_ids(vocab, stopwords)
    if not content:
        raise EmptyCorpusError("corpus has no content words")
    word_index = {wid: r for r, wid in enumerate(content)}
    n = len(content)

    counts = {}
    for d in dialogs:
        for utt in d.utterances:
            seq = [word_index[t] for t in utt if t in word_index]
            for a in range(len(seq)):
                hi = min(len(seq), a + window + 1)
                for b in range(a + 1, hi):
                    i, j = seq[a], seq[b]
                    if i == j:
                        continue
                    counts[(i, j)] = counts.get((i, j), 0) + 1
                    counts[(j, i)] = counts.get((j, i), 0) + 1
    if not counts:
        raise EmptyCorpusError("no content-word co-occurrences found")

    total = float(sum(counts.values()))
    row_marg = np.zeros(n)
    col_marg = np.zeros(n)
    for (i, j), c in counts.items():
        row_marg[i] += c
        col_marg[j] += c

    rows_, cols_, vals = [], [], []
    for (i, j), c in counts.items():
        pmi = np.log(c * total / (row_marg[i] * col_marg[j]))
        if pmi > 0:
            rows_.append(i)
            cols_.append(j)
            vals.append(pmi)
    m = sp.csr_matrix((vals, (rows_, cols_)), shape=(n, n))
    return PpmiMatrix(m, word_index, content)


def nmf_factorize(ppmi: PpmiMatrix, p: int, iters: int = 200, tol: float = 1e-5, seed: int = 0) -> TopicModel:
    """Multiplicative-update NMF of the PPMI matrix, minimizing ||M - WH||_F.

    The Frobenius objective is non-increasing across updates; stops early
    when the relative decrease falls below ``tol``.
    """
    if p < 1:
        raise ConfigError(f"rank must be >= 1, got {p}")
    if p > ppmi.n_words:
        raise ConfigError(f"rank {p} exceeds content vocabulary size {ppmi.n_words}")
    M = np.asarray(ppmi.matrix.todense())
    W, H, trace = nmf(M, p, iters, tol, seed)
    return TopicModel(W, H, p, dict(ppmi.word_index), list(ppmi.row_tokens), objectives=trace)


def nmf(M: np.ndarray, p: int, iters: int = 200, tol: float = 1e-5, seed: int = 0):
    """Core multiplicative updates on a dense nonnegative matrix.

    Returns (W, H, objective_trace) with the initial objective first.
    """
    rng = Rng(seed)
    n, m = M.shape
    # uniform in (0, 1]
    W = 1.0 - rng.random((n, p))
    H = 1.0 - rng.random((p, m))
    guard = 1e-12
    trace = [np.linalg.norm(M - W @ H)]
    for _ in range(iters):
        H *= (W.T @ M) / (W.T @ W @ H + guard)
        W *= (M @ H.T) / (W @ H @ H.T + guard)
        obj = np.linalg.norm(M - W @ H)
        prev = trace[-1]
        trace.append(obj)
        if prev > 0 and (prev - obj) / prev < tol:
            break
    return W, H, trace


def nmf_objective(M: np.ndarray, W: np.ndarray, H: np.ndarray) -> float:
    return float(np.linalg.norm(M - W @ H))


def topic_vector(tokens, model: TopicModel, *_ignored) -> TopicVector:
    """Mean of W rows over matched content words; zero vector if none match."""
    rows_ = [model.word_index[t] for t in tokens if t in model.word_index]
    if not rows_:
        return TopicVector(np.zeros(model.p), 0)
    return TopicVector(model.W[rows_].sum(axis=0) / len(rows_), len(rows_))


def soft_topic_vector(token_distributions: np.ndarray, model: TopicModel, vocab_size: int) -> TopicVector:
    """Expected topic vector under per-step token distributions.

    Probability mass on non-content tokens is dropped; the summed expectation
    is renormalized by the total content mass across steps.
    """
    dists = np.asarray(token_distributions, dtype=np.float64)
    if dists.ndim == 1:
        dists = dists[None, :]
    Wv = np.zeros((vocab_size, model.p))
    for wid, r in model.word_index.items():
        if wid < vocab_size:
            Wv[wid] = model.W[r]
    mask = np.zeros(vocab_size)
    for wid in model.word_index:
        if wid < vocab_size:
            mask[wid] = 1.0
    mass = float((dists * mask).sum())
    if mass <= 0:
        return TopicVector(np.zeros(model.p), 0)
    vec = (dists @ Wv).sum(axis=0) / mass
    return TopicVector(vec, dists.shape[0])


def topic_kl(tc, tr, eps: float = 1e-8) -> float:
    """Scaled KL between eps-smoothed, simplex-normalized topic vectors:
    (1/d) * sum_i a_i * log(a_i / b_i)."""
    a = np.asarray(tc.values if isinstance(tc, TopicVector) else tc, dtype=np.float64)
    b = np.asarray(tr.values if isinstance(tr, TopicVector) else tr, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"topic vectors differ in length: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ConfigError("smoothing eps must be positive")
    a = a + eps
    b = b + eps
    a /= a.sum()
    b /= b.sum()
    return float(np.sum(a * np.log(a / b)) / a.size)


def save_topic_model(model: TopicModel, path):
    with open(path, "wb") as fh:
        fh.write(TOPIC_MAGIC)
        fh.write(struct.pack("<III", TOPIC_VERSION, len(model.row_tokens), model.p))
        fh.write(np.asarray(model.row_tokens, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.H, dtype="<f8").tobytes())


def load_topic_model(path) -> TopicModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TOPIC_MAGIC:
            raise ConfigError(f"{path} is not a topic model file (bad magic {magic!r})")
        version, n, p = struct.unpack("<III", fh.read(12))
        if version != TOPIC_VERSION:
            raise ConfigError(f"unsupported topic model version {version}")
        row_tokens = np.frombuffer(fh.read(4 * n), dtype="<u4").astype(int).tolist()
        W = np.frombuffer(fh.read(8 * n * p), dtype="<f8").reshape(n, p).copy()
        H = np.frombuffer(fh.read(8 * n * p), dtype="<f8").reshape(p, n).copy()
    word_index = {wid: r for r, wid in enumerate(row_tokens)}
    return TopicModel(W, H, p, word_index, row_tokens)


def ppmi_topic_model(ppmi: PpmiMatrix) -> TopicModel:
    """Raw sparse PPMI rows viewed as topic vectors (the dense-free baseline
    used by the divergence-variance diagnostic)."""
    M = np.asarray(ppmi.matrix.todense())
    return TopicModel(M, np.eye(ppmi.n_words), ppmi.n_words, dict(ppmi.word_index), list(ppmi.row_tokens))
