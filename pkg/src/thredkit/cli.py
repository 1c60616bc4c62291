"""Command-line surface: build-vocab, topics, train, generate, eval.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric divergence.
Every command is a deterministic function of (inputs, seed); runs that
write files also write their fully-resolved configuration next to them.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import corpus as C
from . import decode as D
from . import metrics as MT
from . import model as M
from . import topics as T
from .autodiff import Rng
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    DomainError,
    EmptyCorpusError,
    ShapeError,
    ThredkitError,
)

SEED_ENV = "THREDKIT_SEED"

TRAIN_CONFIG_KEYS = {
    "train_corpus": str,
    "valid_corpus": str,
    "vocab": str,
    "topic_model": str,
    "out_dir": str,
    "variant": str,
    "embed_dim": int,
    "hidden_dim": int,
    "d_z": int,
    "d_t": int,
    "topic_weight": float,
    "kl_anneal_steps": int,
    "lr": float,
    "steps": int,
    "batch": int,
    "seed": int,
}

TRAIN_DEFAULTS = {
    "valid_corpus": "",
    "topic_model": "",
    "variant": "thred",
    "embed_dim": 500,
    "hidden_dim": 500,
    "d_z": 100,
    "d_t": 40,
    "topic_weight": 1.0,
    "kl_anneal_steps": 10000,
    "lr": 0.0002,
    "steps": 20000,
    "batch": 8,
    "seed": 0,
}


def _resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def parse_kv_config(path) -> dict:
    """Flat ``key = value`` file; unknown keys are rejected."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in TRAIN_CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                out[key] = TRAIN_CONFIG_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def write_resolved_config(path, resolved: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh]


def _encode_line(line: str, vocab: C.Vocabulary, lowercase=True):
    """One context/response line -> list of encoded utterances (EOU-ended)."""
    if lowercase:
        line = line.lower()
    utts = []
    for chunk in line.split(C.EOU_SEP):
        toks = chunk.split()
        if toks:
            utts.append(tuple(vocab.encode_token(t) for t in toks) + (C.EOU,))
    return utts


def cmd_build_vocab(args) -> int:
    dialogs, skipped = C.load_corpus(args.corpus)
    vocab = C.build_vocab(dialogs, top_k=args.top_k)
    vocab.save(args.out)
    print(f"vocab size {len(vocab)} ({skipped} malformed lines skipped)")
    return 0


def _load_stopwords(path):
    if not path:
        return T.DEFAULT_STOPWORDS
    return frozenset(w for w in _read_lines(path) if w)


def cmd_topics(args) -> int:
    raw, _ = C.load_corpus(args.corpus)
    vocab = C.Vocabulary.load(args.vocab)
    dialogs = [C.encode(d, vocab) for d in raw]
    stop = _load_stopwords(args.stopwords)
    ppmi = T.build_ppmi(dialogs, vocab, stopwords=stop, window=args.window)
    model = T.nmf_factorize(ppmi, args.rank, iters=args.iters, seed=_resolve_seed(args.seed))
    Mdense = np.asarray(ppmi.matrix.todense())
    norm = np.linalg.norm(Mdense)
    rel = T.nmf_objective(Mdense, model.W, model.H) / norm if norm > 0 else 0.0
    T.save_topic_model(model, args.out)
    write_resolved_config(
        str(args.out) + ".config.txt",
        {
            "corpus": args.corpus,
            "vocab": args.vocab,
            "stopwords": args.stopwords or "<builtin>",
            "window": args.window,
            "rank": args.rank,
            "iters": args.iters,
            "seed": _resolve_seed(args.seed),
        },
    )
    print(f"relative frobenius error {rel:.6f}")
    return 0


def cmd_train(args) -> int:
    resolved = dict(TRAIN_DEFAULTS)
    resolved.update(parse_kv_config(args.config))
    if args.variant:
        resolved["variant"] = args.variant
    for key in ("train_corpus", "vocab", "out_dir"):
        if not resolved.get(key):
            raise ConfigError(f"train config is missing required key {key!r}")
    if resolved["variant"] == "thred" and not resolved["topic_model"]:
        raise ConfigError("thred requires topic_model in the config")

    vocab = C.Vocabulary.load(resolved["vocab"])
    raw, _ = C.load_corpus(resolved["train_corpus"])
    train_dialogs = [C.encode(d, vocab) for d in raw]
    valid_dialogs = []
    if resolved["valid_corpus"]:
        raw_v, _ = C.load_corpus(resolved["valid_corpus"])
        valid_dialogs = [C.encode(d, vocab) for d in raw_v]

    cfg = M.ModelConfig(
        variant=resolved["variant"],
        vocab_size=len(vocab),
        embed_dim=resolved["embed_dim"],
        hidden_dim=resolved["hidden_dim"],
        d_z=resolved["d_z"],
        d_t=resolved["d_t"],
        topic_weight=resolved["topic_weight"],
        kl_anneal_steps=resolved["kl_anneal_steps"],
    )
    topic = None
    if cfg.has_topic:
        topic = M.TopicHandle(T.load_topic_model(resolved["topic_model"]), len(vocab))
        cfg.d_t = topic.d_t
    hyper = M.Hyper(
        lr=resolved["lr"], steps=resolved["steps"], batch=resolved["batch"], seed=resolved["seed"]
    )
    init = M.load_checkpoint(args.resume) if args.resume else None

    os.makedirs(resolved["out_dir"], exist_ok=True)
    try:
        ckpt, logs = M.train(cfg, train_dialogs, valid_dialogs, hyper, topic=topic, init=init)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            M.save_checkpoint(exc.checkpoint, os.path.join(resolved["out_dir"], "last_good.ckpt"))
        raise
    M.save_checkpoint(ckpt, os.path.join(resolved["out_dir"], "best.ckpt"))
    with open(os.path.join(resolved["out_dir"], "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,ce,kl_global,topic_div\n")
        for row in logs:
            fh.write(f"{row.step},{row.ce:.8f},{row.kl_global:.8f},{row.topic_div:.8f}\n")
    write_resolved_config(os.path.join(resolved["out_dir"], "run_config.txt"), resolved)
    print(f"trained {len(logs)} epochs, best checkpoint in {resolved['out_dir']}")
    return 0


def cmd_generate(args) -> int:
    ckpt = M.load_checkpoint(args.checkpoint)
    vocab = C.Vocabulary.load(args.vocab)
    seed = _resolve_seed(args.seed)
    lines = _read_lines(args.context_file)
    replies = []
    for i, line in enumerate(lines):
        context = _encode_line(line, vocab)
        if not context:
            replies.append("")
            continue
        rng = Rng(seed).child(i)
        ranked = D.beam_search(ckpt, context, B=args.beam, max_len=args.max_len, rng=rng)
        tokens = ranked[0][0]
        replies.append(" ".join(vocab.token_of(t) for t in tokens if t != C.EOU))
    text = "\n".join(replies) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        write_resolved_config(
            str(args.out) + ".config.txt",
            {
                "checkpoint": args.checkpoint,
                "context_file": args.context_file,
                "vocab": args.vocab,
                "beam": args.beam,
                "max_len": args.max_len,
                "seed": seed,
            },
        )
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    vocab = C.Vocabulary.load(args.vocab)
    hyp_lines = _read_lines(args.hyps)
    responses = [tuple(t for utt in _encode_line(ln, vocab) for t in utt) for ln in hyp_lines]

    contexts = None
    if args.contexts:
        ctx_lines = _read_lines(args.contexts)
        if len(ctx_lines) != len(hyp_lines):
            raise ConfigError(
                f"line count mismatch: {args.contexts} has {len(ctx_lines)}, {args.hyps} has {len(hyp_lines)}"
            )
        contexts = [tuple(t for utt in _encode_line(ln, vocab) for t in utt) for ln in ctx_lines]

    topic_model = T.load_topic_model(args.topic_model) if args.topic_model else None
    ckpt = M.load_checkpoint(args.checkpoint) if args.checkpoint else None
    reference_pairs = None
    if ckpt is not None:
        if not (args.refs and args.contexts):
            raise ConfigError("perplexity needs --refs and --contexts alongside --checkpoint")
        ref_lines = _read_lines(args.refs)
        if len(ref_lines) != len(hyp_lines):
            raise ConfigError(
                f"line count mismatch: {args.refs} has {len(ref_lines)}, {args.hyps} has {len(hyp_lines)}"
            )
        ctx_lines = _read_lines(args.contexts)
        reference_pairs = [
            (_encode_line(c, vocab), tuple(t for utt in _encode_line(r, vocab) for t in utt))
            for c, r in zip(ctx_lines, ref_lines)
        ]

    betas = tuple(float(b) for b in args.betas.split(","))
    report = MT.build_report(
        responses,
        contexts=contexts,
        topic_model=topic_model,
        ckpt=ckpt,
        reference_pairs=reference_pairs,
        betas=betas,
        seed=_resolve_seed(args.seed),
    )
    doc = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(doc + "\n")
    else:
        print(doc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thredkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from an eou-lines corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=20000)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("topics", help="build the PPMI matrix and factorize it")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stopwords", default=None)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--rank", type=int, default=40)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_topics)

    p = sub.add_parser("train", help="train a dialog model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=M.VARIANTS, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate replies for a context file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context-file", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="compute the metrics report")
    p.add_argument("--refs", default=None)
    p.add_argument("--hyps", required=True)
    p.add_argument("--contexts", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--topic-model", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--betas", default="0.5,1,1.5")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, EmptyCorpusError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except ThredkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
