"""Topic-coherent hierarchical recurrent encoder-decoder toolkit."""

from . import autodiff, corpus, decode, metrics, model, synthetic, topics
from .autodiff import Rng, Tensor, grad_check
from .corpus import Dialog, RawDialog, Vocabulary, build_vocab, encode, load_corpus, split
from .decode import beam_search, greedy
from .metrics import MetricsReport, distinct_n, divergence_variance, f_score, perplexity, topic_div
from .model import Checkpoint, Hyper, ModelConfig, TopicHandle, train
from .topics import PpmiMatrix, TopicModel, build_ppmi, nmf_factorize, topic_kl, topic_vector

__version__ = "0.1.0"
