import hashlib
import json

import pytest

from thredkit import cli
from thredkit.synthetic import topic_clustered_lines, write_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus + vocab + topic model + tiny trained checkpoint, built once."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    write_corpus(corpus, topic_clustered_lines(60, seed=4))
    vocab = root / "vocab.txt"
    assert cli.main(["build-vocab", "--corpus", str(corpus), "--out", str(vocab)]) == 0
    topics = root / "topics.tpmx"
    rc = cli.main(
        ["topics", "--corpus", str(corpus), "--vocab", str(vocab), "--rank", "4",
         "--iters", "60", "--seed", "0", "--out", str(topics)]
    )
    assert rc == 0
    outdir = root / "run"
    config = root / "train.cfg"
    config.write_text(
        f"train_corpus = {corpus}\n"
        f"vocab = {vocab}\n"
        f"topic_model = {topics}\n"
        f"out_dir = {outdir}\n"
        "variant = thred\n"
        "embed_dim = 8\nhidden_dim = 8\nd_z = 4\n"
        "kl_anneal_steps = 50\nlr = 0.005\nsteps = 16\nbatch = 8\nseed = 1\n"
    )
    assert cli.main(["train", "--config", str(config)]) == 0
    return root


def test_build_vocab_missing_file_exits_3(tmp_path):
    assert cli.main(["build-vocab", "--corpus", str(tmp_path / "x"), "--out", str(tmp_path / "v")]) == 3


def test_build_vocab_deterministic(workdir, tmp_path):
    out2 = tmp_path / "vocab2.txt"
    assert cli.main(["build-vocab", "--corpus", str(workdir / "corpus.txt"), "--out", str(out2)]) == 0
    assert out2.read_bytes() == (workdir / "vocab.txt").read_bytes()


def test_build_vocab_default_top_k():
    parser = cli.build_parser()
    args = parser.parse_args(["build-vocab", "--corpus", "x", "--out", "y"])
    assert args.top_k == 20000


def test_topics_default_rank_is_40():
    parser = cli.build_parser()
    args = parser.parse_args(["topics", "--corpus", "x", "--vocab", "v", "--out", "o"])
    assert args.rank == 40


def test_topics_rank_too_large_exits_2(workdir, tmp_path):
    rc = cli.main(
        ["topics", "--corpus", str(workdir / "corpus.txt"), "--vocab", str(workdir / "vocab.txt"),
         "--rank", "100000", "--out", str(tmp_path / "t.tpmx")]
    )
    assert rc == 2


def test_topics_rerun_same_seed_same_hash(workdir, tmp_path):
    out2 = tmp_path / "topics2.tpmx"
    rc = cli.main(
        ["topics", "--corpus", str(workdir / "corpus.txt"), "--vocab", str(workdir / "vocab.txt"),
         "--rank", "4", "--iters", "60", "--seed", "0", "--out", str(out2)]
    )
    assert rc == 0
    h1 = hashlib.sha256((workdir / "topics.tpmx").read_bytes()).hexdigest()
    h2 = hashlib.sha256(out2.read_bytes()).hexdigest()
    assert h1 == h2


def test_train_outputs(workdir):
    outdir = workdir / "run"
    assert (outdir / "best.ckpt").exists()
    assert (outdir / "run_config.txt").exists()
    log = (outdir / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,ce,kl_global,topic_div"
    assert len(log) - 1 == 2  # 16 steps over 60 dialogs at batch 8 -> 2 epochs


def test_train_thred_without_topic_model_exits_2(workdir, tmp_path):
    config = tmp_path / "bad.cfg"
    config.write_text(
        f"train_corpus = {workdir / 'corpus.txt'}\n"
        f"vocab = {workdir / 'vocab.txt'}\n"
        f"out_dir = {tmp_path / 'out'}\n"
        "variant = thred\nsteps = 2\n"
    )
    assert cli.main(["train", "--config", str(config)]) == 2


def test_train_unknown_key_exits_2(workdir, tmp_path):
    config = tmp_path / "bad2.cfg"
    config.write_text("nonsense_key = 1\n")
    assert cli.main(["train", "--config", str(config)]) == 2


def test_generate_deterministic_and_beam1_equals_greedy(workdir, tmp_path):
    ctx = tmp_path / "contexts.txt"
    ctx.write_text("do you have the kernel driver\nwhat about the oven butter\n")
    common = ["generate", "--checkpoint", str(workdir / "run" / "best.ckpt"),
              "--context-file", str(ctx), "--vocab", str(workdir / "vocab.txt"),
              "--max-len", "8", "--seed", "7"]
    out1, out2, out3 = (tmp_path / n for n in ("a.txt", "b.txt", "c.txt"))
    assert cli.main(common + ["--beam", "5", "--out", str(out1)]) == 0
    assert cli.main(common + ["--beam", "5", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert cli.main(common + ["--beam", "1", "--out", str(out3)]) == 0
    from thredkit import corpus as C, decode as D, model as M
    from thredkit.autodiff import Rng

    ckpt = M.load_checkpoint(workdir / "run" / "best.ckpt")
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    greedy_lines = []
    for i, line in enumerate(ctx.read_text().splitlines()):
        context = cli._encode_line(line, vocab)
        tokens = D.greedy(ckpt, context, max_len=8, rng=Rng(7).child(i))
        greedy_lines.append(" ".join(vocab.token_of(t) for t in tokens if t != C.EOU))
    assert out3.read_text().splitlines() == greedy_lines


def test_generate_default_beam_is_5():
    parser = cli.build_parser()
    args = parser.parse_args(["generate", "--checkpoint", "c", "--context-file", "f", "--vocab", "v"])
    assert args.beam == 5


def test_eval_mismatched_line_counts_exits_2(workdir, tmp_path):
    hyps = tmp_path / "hyps.txt"
    hyps.write_text("kernel driver\noven butter\n")
    ctxs = tmp_path / "ctxs.txt"
    ctxs.write_text("kernel\n")
    rc = cli.main(
        ["eval", "--hyps", str(hyps), "--contexts", str(ctxs), "--vocab", str(workdir / "vocab.txt")]
    )
    assert rc == 2


def test_eval_default_betas():
    parser = cli.build_parser()
    args = parser.parse_args(["eval", "--hyps", "h", "--vocab", "v"])
    assert args.betas == "0.5,1,1.5"


def test_eval_full_report(workdir, tmp_path):
    hyps = tmp_path / "hyps.txt"
    hyps.write_text("you should try the kernel driver\nmaybe check the oven butter\n")
    ctxs = tmp_path / "ctxs.txt"
    ctxs.write_text("do you have the kernel disk\ni need the flour sauce\n")
    refs = tmp_path / "refs.txt"
    refs.write_text("yes the kernel boot\nyes the bake dinner\n")
    out = tmp_path / "report.json"
    rc = cli.main(
        ["eval", "--hyps", str(hyps), "--contexts", str(ctxs), "--refs", str(refs),
         "--vocab", str(workdir / "vocab.txt"), "--topic-model", str(workdir / "topics.tpmx"),
         "--checkpoint", str(workdir / "run" / "best.ckpt"), "--out", str(out)]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["perplexity"] > 1.0
    assert 0.0 <= doc["dist1"] <= 1.0
    assert doc["topic_div"] >= 0.0
    assert set(doc["f"]) == {"0.5", "1", "1.5"}
    assert doc["n_responses"] == 2
