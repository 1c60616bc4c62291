"""The four-variant dialog network: seq2seq, hred, vhred, thred.

All variants share the same skeleton: token projection, bidirectional LSTM
utterance encoder, unidirectional LSTM context encoder, LSTM decoder.
vhred/thred add a conditional Gaussian latent variable; thred additionally
penalizes topic divergence between context and the decoder's output
distributions.

Functions take an explicit ``params`` dict of named Tensors so the same
forward code serves training, generation, and finite-difference checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .corpus import SOS
from .errors import ConfigError, ContractError, DivergenceError, DomainError
from .topics import TopicModel

CKPT_MAGIC = b"THRD"
CKPT_VERSION = 1

VARIANTS = ("seq2seq", "hred", "vhred", "thred")


@dataclass
class ModelConfig:
    variant: str = "thred"
    vocab_size: int = 0
    embed_dim: int = 500
    hidden_dim: int = 500
    d_z: int = 100
    d_t: int = 40
    topic_weight: float = 1.0
    kl_anneal_steps: int = 10000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.has_latent and self.d_z <= 0:
            raise ConfigError(f"{self.variant} requires d_z > 0")
        if self.variant == "thred" and self.d_t <= 0:
            raise ConfigError("thred requires d_t > 0")
        if self.topic_weight < 0:
            raise ConfigError("topic_weight must be nonnegative")

    @property
    def has_latent(self) -> bool:
        return self.variant in ("vhred", "thred")

    @property
    def has_topic(self) -> bool:
        return self.variant == "thred"


@dataclass
class LatentGaussian:
    mu: Tensor
    var: Tensor


@dataclass
class LossParts:
    total: Tensor
    ce: float
    kl_global: float
    kl_local: float


@dataclass
class Hyper:
    lr: float = 2e-4
    steps: int = 20000
    batch: int = 8
    seed: int = 0


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> np.ndarray
    opt_state: dict  # name -> {"m": arr, "v": arr}
    global_step: int = 0


class TopicHandle:
    """Dense views of a TopicModel aligned with the model vocabulary, so the
    soft topic expectation is a single matmul against decoder distributions."""

    def __init__(self, model: TopicModel, vocab_size: int):
        self.model = model
        self.d_t = model.p
        self.Wv = np.zeros((vocab_size, model.p))
        self.mask = np.zeros(vocab_size)
        for wid, r in model.word_index.items():
            if wid < vocab_size:
                self.Wv[wid] = model.W[r]
                self.mask[wid] = 1.0

    def hard_vector(self, tokens) -> np.ndarray:
        rows = [self.model.word_index[t] for t in tokens if t in self.model.word_index]
        if not rows:
            return np.zeros(self.d_t)
        return self.model.W[rows].sum(axis=0) / len(rows)


# ---------------------------------------------------------------------------
# parameters

def _param_shapes(cfg: ModelConfig) -> dict:
    E, H, V = cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size
    dz = cfg.d_z if cfg.has_latent else 0
    shapes = {
        "embed": (V, E),
        "enc_fwd.W": (E + H, 4 * H),
        "enc_fwd.b": (4 * H,),
        "enc_bwd.W": (E + H, 4 * H),
        "enc_bwd.b": (4 * H,),
        "ctx.W": (2 * H + H, 4 * H),
        "ctx.b": (4 * H,),
        "dec.W": (E + H + dz + H, 4 * H),
        "dec.b": (4 * H,),
        "out.W": (H, V),
        "out.b": (V,),
    }
    if cfg.has_latent:
        shapes.update(
            {
                "prior.W1": (H, H),
                "prior.b1": (H,),
                "prior.W2": (H, 2 * dz),
                "prior.b2": (2 * dz,),
                "post.W1": (3 * H, H),
                "post.b1": (H,),
                "post.W2": (H, 2 * dz),
                "post.b2": (2 * dz,),
            }
        )
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> dict:
    """Uniform +/- 1/sqrt(hidden) weights; LSTM forget-gate biases start at 1."""
    scale = 1.0 / np.sqrt(cfg.hidden_dim)
    params = {}
    for name, shape in sorted(_param_shapes(cfg).items()):
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            data = np.zeros(shape)
            if name in ("enc_fwd.b", "enc_bwd.b", "ctx.b", "dec.b"):
                H = shape[0] // 4
                data[H : 2 * H] = 1.0
        else:
            data = (rng.random(shape) * 2.0 - 1.0) * scale
        params[name] = Tensor(data, requires_grad=True)
    return params


def params_from_flat(cfg: ModelConfig, theta: Tensor) -> dict:
    """View one flat parameter vector as the named parameter dict (used by
    finite-difference checks so gradients flow back to a single leaf)."""
    params = {}
    offset = 0
    for name, shape in sorted(_param_shapes(cfg).items()):
        n = int(np.prod(shape))
        params[name] = ad.reshape(ad.narrow(theta, offset, n), shape)
        offset += n
    if offset != theta.size:
        raise ContractError(f"flat vector has {theta.size} values, model needs {offset}")
    return params


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([params[k].data.ravel() for k in sorted(params)])


# ---------------------------------------------------------------------------
# forward pieces

def _lstm_step(W: Tensor, b: Tensor, x: Tensor, h: Tensor, c: Tensor):
    H = h.size
    gates = ad.concat([x, h]) @ W + b
    i = ad.sigmoid(ad.narrow(gates, 0, H))
    f = ad.sigmoid(ad.narrow(gates, H, H))
    g = ad.tanh(ad.narrow(gates, 2 * H, H))
    o = ad.sigmoid(ad.narrow(gates, 3 * H, H))
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n))


def encode_utterance(params: dict, cfg: ModelConfig, tokens) -> Tensor:
    """Bidirectional LSTM over token embeddings; concatenated final states."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("cannot encode an empty utterance")
    if max(tokens) >= cfg.vocab_size or min(tokens) < 0:
        raise ContractError(f"token ID out of range for vocab size {cfg.vocab_size}")
    emb = ad.rows(params["embed"], tokens)
    H = cfg.hidden_dim
    h_f, c_f = _zeros(H), _zeros(H)
    for t in range(len(tokens)):
        h_f, c_f = _lstm_step(params["enc_fwd.W"], params["enc_fwd.b"], ad.row(emb, t), h_f, c_f)
    h_b, c_b = _zeros(H), _zeros(H)
    for t in reversed(range(len(tokens))):
        h_b, c_b = _lstm_step(params["enc_bwd.W"], params["enc_bwd.b"], ad.row(emb, t), h_b, c_b)
    return ad.concat([h_f, h_b])


def encode_context(params: dict, cfg: ModelConfig, utterance_vectors) -> Tensor:
    """Unidirectional LSTM over utterance vectors; final hidden state."""
    if not utterance_vectors:
        raise ContractError("context must contain at least one utterance vector")
    H = cfg.hidden_dim
    h, c = _zeros(H), _zeros(H)
    for v in utterance_vectors:
        h, c = _lstm_step(params["ctx.W"], params["ctx.b"], v, h, c)
    return h


def context_state(params: dict, cfg: ModelConfig, context_utterances) -> Tensor:
    """Context vector c for a list of encoded utterances. seq2seq flattens
    the context into a single token sequence first."""
    if cfg.variant == "seq2seq":
        flat = [t for utt in context_utterances for t in utt]
        context_utterances = [flat]
    vecs = [encode_utterance(params, cfg, utt) for utt in context_utterances]
    return encode_context(params, cfg, vecs)


def _gaussian_head(W1, b1, W2, b2, x: Tensor, d_z: int) -> LatentGaussian:
    hidden = ad.tanh(x @ W1 + b1)
    raw = hidden @ W2 + b2
    mu = ad.narrow(raw, 0, d_z)
    var = ad.softplus(ad.narrow(raw, d_z, d_z)) + 1e-6
    return LatentGaussian(mu, var)


def prior_posterior(params: dict, cfg: ModelConfig, c: Tensor, x_enc: Tensor = None, training: bool = False):
    """P(z|c) and, when the target encoding is supplied, Q(z|X,c)."""
    if not cfg.has_latent:
        raise ContractError(f"variant {cfg.variant} has no latent variable")
    if training and x_enc is None:
        raise ContractError("training mode requires the encoded target utterance")
    p = _gaussian_head(params["prior.W1"], params["prior.b1"], params["prior.W2"], params["prior.b2"], c, cfg.d_z)
    q = None
    if x_enc is not None:
        joint = ad.concat([c, x_enc])
        q = _gaussian_head(params["post.W1"], params["post.b1"], params["post.W2"], params["post.b2"], joint, cfg.d_z)
    return p, q


def gaussian_kl(q: LatentGaussian, p: LatentGaussian) -> Tensor:
    """KL[q || p] between diagonal Gaussians, as a scalar Tensor."""
    if q.mu.shape != p.mu.shape:
        raise ContractError(f"latent size mismatch: {q.mu.shape} vs {p.mu.shape}")
    if np.any(q.var.data <= 0) or np.any(p.var.data <= 0):
        raise DomainError("gaussian_kl requires strictly positive variances")
    ratio = ad.log(p.var / q.var) * 0.5
    diff = q.mu - p.mu
    quad = (q.var + diff * diff) / (p.var * 2.0)
    return ad.tsum(ratio + quad - 0.5)


def decode_teacher_forced(params: dict, cfg: ModelConfig, c: Tensor, z, target) -> Tensor:
    """Per-step output distributions (T x V) under teacher forcing.

    Step t conditions on [embedding of target[t-1] (SOS at t=0); c; z].
    """
    if cfg.has_latent and z is None:
        raise ContractError(f"variant {cfg.variant} requires a latent sample")
    if not cfg.has_latent:
        z = None
    target = list(target)
    H = cfg.hidden_dim
    h, cell = _zeros(H), _zeros(H)
    prev = [SOS] + target[:-1]
    emb = ad.rows(params["embed"], prev)
    logits_steps = []
    for t in range(len(target)):
        pieces = [ad.row(emb, t), c]
        if z is not None:
            pieces.append(z)
        x = ad.concat(pieces)
        h, cell = _lstm_step(params["dec.W"], params["dec.b"], x, h, cell)
        logits_steps.append(h @ params["out.W"] + params["out.b"])
    return ad.softmax(ad.stack(logits_steps), axis=-1)


def decoder_step(params: dict, cfg: ModelConfig, prev_token: int, c: Tensor, z, state):
    """Single generation step. Returns (logits ndarray, new state)."""
    H = cfg.hidden_dim
    if state is None:
        state = (_zeros(H), _zeros(H))
    pieces = [ad.row(params["embed"], prev_token), c]
    if cfg.has_latent:
        pieces.append(z)
    h, cell = _lstm_step(params["dec.W"], params["dec.b"], ad.concat(pieces), *state)
    logits = h @ params["out.W"] + params["out.b"]
    return logits.data.copy(), (h, cell)


def _smoothed(v: np.ndarray, eps: float) -> np.ndarray:
    v = v + eps
    return v / v.sum()


def _soft_topic_kl(tc_hard: np.ndarray, dists: Tensor, handle: TopicHandle, eps: float = 1e-8) -> Tensor:
    """Differentiable Eq-style topic divergence: fixed context vector against
    the expected topic vector of the decoder distributions."""
    mass = ad.tsum(dists * Tensor(handle.mask))
    vec = ad.tsum(dists @ Tensor(handle.Wv), axis=0) / mass
    smooth = vec + eps
    b = smooth / ad.tsum(smooth)
    a = _smoothed(tc_hard, eps)
    return ad.tsum(Tensor(a) * (Tensor(np.log(a)) - ad.log(b))) / float(handle.d_t)


def anneal_factor(step: int, kl_anneal_steps: int) -> float:
    if kl_anneal_steps <= 0:
        return 1.0
    return min(1.0, step / kl_anneal_steps)


def loss(params: dict, cfg: ModelConfig, batch, step: int, rng: Rng, topic: TopicHandle = None) -> LossParts:
    """Joint objective over a batch of (context_utterances, target) pairs.

    total = CE + anneal(step) * KL_global [latent variants]
               + topic_weight * KL_local [thred]
    CE is the mean negative log-likelihood per target token.
    """
    if not batch:
        raise ContractError("batch must be non-empty")
    if cfg.has_topic and topic is None:
        raise ConfigError("thred requires a topic model")
    nll_terms = []
    total_tokens = 0
    kl_g_terms = []
    kl_l_terms = []
    for context, target in batch:
        c = context_state(params, cfg, context)
        z = None
        if cfg.has_latent:
            x_enc = encode_utterance(params, cfg, target)
            p, q = prior_posterior(params, cfg, c, x_enc, training=True)
            z = ad.gaussian_sample(q.mu, q.var, rng)
            kl_g_terms.append(gaussian_kl(q, p))
        dists = decode_teacher_forced(params, cfg, c, z, target)
        probs = ad.take_pairs(dists, np.arange(len(target)), list(target))
        nll_terms.append(-ad.tsum(ad.log(probs)))
        total_tokens += len(target)
        if cfg.has_topic:
            ctx_tokens = [t for utt in context for t in utt]
            tc = topic.hard_vector(ctx_tokens)
            kl_l_terms.append(_soft_topic_kl(tc, dists, topic))

    ce = ad.tsum(ad.stack(nll_terms)) / total_tokens
    total = ce
    kl_global = 0.0
    kl_local = 0.0
    if kl_g_terms:
        klg = ad.tsum(ad.stack(kl_g_terms)) / len(kl_g_terms)
        kl_global = klg.item()
        total = total + klg * anneal_factor(step, cfg.kl_anneal_steps)
    if kl_l_terms:
        kll = ad.tsum(ad.stack(kl_l_terms)) / len(kl_l_terms)
        kl_local = kll.item()
        total = total + kll * cfg.topic_weight
    for name, value in (("ce", ce.item()), ("kl_global", kl_global), ("kl_local", kl_local)):
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss component {name}", component=name)
    return LossParts(total, ce.item(), kl_global, kl_local)


# ---------------------------------------------------------------------------
# training

def dialog_pairs(dialogs):
    """(context utterances, reply) pairs: the last utterance is the reply."""
    return [(d.utterances[:-1], d.utterances[-1]) for d in dialogs]


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, state=None, t=0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = t
        if state is None:
            state = {
                name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                for name, p in params.items()
            }
        self.state = state

    def step(self):
        self.t += 1
        b1t = 1 - self.beta1**self.t
        b2t = 1 - self.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            s = self.state[name]
            s["m"] = self.beta1 * s["m"] + (1 - self.beta1) * p.grad
            s["v"] = self.beta2 * s["v"] + (1 - self.beta2) * p.grad**2
            m_hat = s["m"] / b1t
            v_hat = s["v"] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class EpochLog:
    step: int
    ce: float
    kl_global: float
    topic_div: float


def validation_ce(params: dict, cfg: ModelConfig, pairs, rng: Rng, topic=None, max_pairs=64) -> float:
    total_nll = 0.0
    total_tokens = 0
    for context, target in pairs[:max_pairs]:
        parts = loss(params, cfg, [(context, target)], step=0, rng=rng, topic=topic)
        n = len(target)
        total_nll += parts.ce * n
        total_tokens += n
    return total_nll / max(1, total_tokens)


def train(cfg: ModelConfig, train_dialogs, valid_dialogs, hyper: Hyper, topic: TopicHandle = None, init: Checkpoint = None):
    """Adam training loop. Returns (best checkpoint, per-epoch logs).

    Deterministic in (config, data, hyper.seed). On a non-finite loss the
    run aborts with a DivergenceError carrying the last good checkpoint.
    """
    if cfg.has_topic and topic is None:
        raise ConfigError("thred training requires a topic model")
    base = Rng(hyper.seed)
    if init is not None:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in init.params.items()}
        opt = Adam(params, hyper.lr, state={k: {kk: vv.copy() for kk, vv in s.items()} for k, s in init.opt_state.items()}, t=init.global_step)
        step = init.global_step
    else:
        params = init_params(cfg, base.child(0))
        opt = Adam(params, hyper.lr)
        step = 0
    data_rng = base.child(1)
    latent_rng = base.child(2)

    train_pairs = dialog_pairs(train_dialogs)
    valid_pairs = dialog_pairs(valid_dialogs) if valid_dialogs else []
    logs = []
    best = Checkpoint(cfg, _snapshot(params), _snapshot_opt(opt), step)
    best_ce = float("inf")
    last_good = best
    target_steps = init.global_step + hyper.steps if init is not None else hyper.steps
    epoch = 0
    while step < target_steps:
        epoch += 1
        order = list(range(len(train_pairs)))
        data_rng.shuffle(order)
        ce_sum = klg_sum = kll_sum = 0.0
        n_steps = 0
        for start in range(0, len(order), hyper.batch):
            if step >= target_steps:
                break
            batch = [train_pairs[i] for i in order[start : start + hyper.batch]]
            try:
                parts = loss(params, cfg, batch, step, latent_rng, topic=topic)
            except DivergenceError as exc:
                exc.checkpoint = last_good
                raise
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            step += 1
            n_steps += 1
            ce_sum += parts.ce
            klg_sum += parts.kl_global
            kll_sum += parts.kl_local
        if n_steps == 0:
            break
        logs.append(EpochLog(step, ce_sum / n_steps, klg_sum / n_steps, kll_sum / n_steps))
        last_good = Checkpoint(cfg, _snapshot(params), _snapshot_opt(opt), step)
        if valid_pairs:
            vce = validation_ce(params, cfg, valid_pairs, Rng(hyper.seed + 7919 * epoch), topic=topic)
            if vce < best_ce:
                best_ce = vce
                best = last_good
        else:
            best = last_good
    return best, logs


def _snapshot(params: dict) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def _snapshot_opt(opt: Adam) -> dict:
    return {k: {kk: vv.copy() for kk, vv in s.items()} for k, s in opt.state.items()}


def checkpoint_params(ckpt: Checkpoint) -> dict:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}


# ---------------------------------------------------------------------------
# scoring (used by the perplexity metric)

def reply_logprobs(ckpt: Checkpoint, context, reply, rng: Rng, samples: int = 1) -> np.ndarray:
    """Per-token log-probabilities of ``reply`` under teacher forcing.

    Latent variants draw z from the prior P(z|c); with samples > 1 the
    per-token log-probabilities are averaged across draws.
    """
    cfg = ckpt.config
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    c = context_state(params, cfg, context)
    acc = np.zeros(len(reply))
    for _ in range(max(1, samples)):
        z = None
        if cfg.has_latent:
            p, _ = prior_posterior(params, cfg, c)
            z = ad.gaussian_sample(p.mu, p.var, rng)
        dists = decode_teacher_forced(params, cfg, c, z, reply)
        acc += np.log(dists.data[np.arange(len(reply)), list(reply)])
    return acc / max(1, samples)


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_checkpoint(ckpt: Checkpoint, path):
    cfg_blob = json.dumps(asdict(ckpt.config)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IIQ", CKPT_VERSION, len(cfg_blob), ckpt.global_step))
        fh.write(cfg_blob)
        names = sorted(ckpt.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        has_opt = 1 if ckpt.opt_state else 0
        fh.write(struct.pack("<I", has_opt))
        if has_opt:
            for name in names:
                for key in ("m", "v"):
                    arr = np.ascontiguousarray(ckpt.opt_state[name][key], dtype="<f8")
                    fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        version, cfg_len, global_step = struct.unpack("<IIQ", fh.read(16))
        if version != CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig(**json.loads(fh.read(cfg_len).decode("utf-8")))
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = {}
        shapes = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape))
            params[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
            shapes[name] = shape
        (has_opt,) = struct.unpack("<I", fh.read(4))
        opt_state = {}
        if has_opt:
            for name in sorted(params):
                n = int(np.prod(shapes[name]))
                m = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shapes[name]).copy()
                v = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shapes[name]).copy()
                opt_state[name] = {"m": m, "v": v}
    return Checkpoint(cfg, params, opt_state, global_step)
