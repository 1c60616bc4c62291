"""Synthetic topic-clustered dialog corpora for desk-scale experiments.

Each dialog is drawn from one of a few topic templates; context and reply
share the topic's content vocabulary, so a topic-aware model has a signal
to exploit while function words stay common across topics.
"""

from __future__ import annotations

from .autodiff import Rng
from .corpus import EOU_SEP

TOPIC_POOLS = (
    ("kernel", "driver", "install", "package", "terminal", "ubuntu", "boot", "disk"),
    ("recipe", "oven", "butter", "flour", "dinner", "bake", "sauce", "kitchen"),
    ("train", "ticket", "station", "luggage", "travel", "hotel", "flight", "museum"),
)

_OPENERS = ("do you have the", "i need the", "what about the", "is there a")
_REPLIES = ("you should try the", "i would use the", "maybe check the", "yes the")


def topic_clustered_lines(n_dialogs: int, seed: int = 0, pools=TOPIC_POOLS):
    """eou-lines corpus of two-utterance dialogs clustered by topic."""
    rng = Rng(seed)
    lines = []
    for _ in range(n_dialogs):
        pool = pools[int(rng.integers(len(pools)))]
        w = [pool[int(rng.integers(len(pool)))] for _ in range(4)]
        opener = _OPENERS[int(rng.integers(len(_OPENERS)))]
        reply = _REPLIES[int(rng.integers(len(_REPLIES)))]
        context = f"{opener} {w[0]} {w[1]}"
        response = f"{reply} {w[2]} {w[3]}"
        lines.append(f"{context} {EOU_SEP} {response} {EOU_SEP}")
    return lines


def write_corpus(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
