"""Tiny autoregressive token policy standing in for the vision-language model.

A single tanh recurrent cell reads the sample's feature vector at every step
together with the embedding of the previous token:

    h_t = tanh(W_x f + W_e E[y_{t-1}] + W_h h_{t-1} + b)
    logits_t = U h_t + c

The first step sees a zero embedding and a zero hidden state. Gradients of
sequence log-probability are computed by hand (backpropagation through time)
so they can be checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .structio import DEFAULT_PROFILE, TagProfile
from .core import TimeInterval

START = -1

PARAM_NAMES = ("E", "W_x", "W_e", "W_h", "b", "U", "c")

FILLER_WORDS = (
    "first", "then", "person", "moves", "scene", "shows", "object", "after",
    "before", "camera", "turns", "starts", "ends", "clip", "appears", "again",
)


@dataclass(frozen=True)
class PolicyVocab:
    n_filler: int = 16
    n_bins: int = 64

    THINK_OPEN = 0
    THINK_CLOSE = 1
    TIME_OPEN = 2
    TIME_CLOSE = 3
    EOS = 4

    def __post_init__(self):
        if self.n_filler < 1 or self.n_bins < 1:
            raise ValueError("vocabulary needs at least one filler and one bin token")

    @property
    def size(self) -> int:
        return 5 + self.n_filler + self.n_bins

    def filler(self, k: int) -> int:
        return 5 + k

    def bin(self, k: int) -> int:
        return 5 + self.n_filler + k

    def is_filler(self, tok: int) -> bool:
        return 5 <= tok < 5 + self.n_filler

    def is_bin(self, tok: int) -> bool:
        return 5 + self.n_filler <= tok < self.size

    def bin_index(self, tok: int) -> int:
        return tok - 5 - self.n_filler

    def filler_word(self, k: int) -> str:
        return FILLER_WORDS[k] if k < len(FILLER_WORDS) else f"word{k}"

    def bin_center(self, k: int, duration_s: float) -> float:
        return (k + 0.5) * duration_s / self.n_bins

    def time_to_bin(self, t: float, duration_s: float) -> int:
        k = int(np.floor(t / duration_s * self.n_bins))
        return min(max(k, 0), self.n_bins - 1)


@dataclass
class PolicyParams:
    E: np.ndarray
    W_x: np.ndarray
    W_e: np.ndarray
    W_h: np.ndarray
    b: np.ndarray
    U: np.ndarray
    c: np.ndarray
    vocab: PolicyVocab = field(default_factory=PolicyVocab)
    provenance: dict = field(default_factory=dict)

    @property
    def d_feat(self) -> int:
        return self.W_x.shape[1]

    @property
    def d_emb(self) -> int:
        return self.E.shape[1]

    @property
    def d_hid(self) -> int:
        return self.W_h.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> PolicyParams:
        return PolicyParams(
            **{k: v.copy() for k, v in self.arrays().items()},
            vocab=self.vocab,
            provenance=dict(self.provenance),
        )

    def zeros_like(self) -> PolicyParams:
        return PolicyParams(
            **{k: np.zeros_like(v) for k, v in self.arrays().items()},
            vocab=self.vocab,
        )

    def add_scaled(self, other: PolicyParams, alpha: float) -> PolicyParams:
        """Return self + alpha * other."""
        return PolicyParams(
            **{k: v + alpha * getattr(other, k) for k, v in self.arrays().items()},
            vocab=self.vocab,
            provenance=dict(self.provenance),
        )

    def iadd(self, other: PolicyParams, alpha: float = 1.0) -> None:
        for k, v in self.arrays().items():
            v += alpha * getattr(other, k)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def equals(self, other: PolicyParams) -> bool:
        return self.vocab == other.vocab and all(
            np.array_equal(v, getattr(other, k)) for k, v in self.arrays().items()
        )

    def validate(self) -> None:
        V, h = self.vocab.size, self.d_hid
        expected = {
            "E": (V, self.d_emb), "W_x": (h, self.d_feat), "W_e": (h, self.d_emb),
            "W_h": (h, h), "b": (h,), "U": (V, h), "c": (V,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not self.is_finite():
            raise ValueError("parameters contain non-finite entries")


@dataclass
class TokenSequence:
    tokens: list[int]
    per_token_logprob: list[float]
    total_logprob: float

    def __len__(self) -> int:
        return len(self.tokens)

    def response_length(self, vocab: PolicyVocab) -> int:
        """Emitted tokens before EOS."""
        return self.tokens.index(vocab.EOS) if vocab.EOS in self.tokens else len(self.tokens)


def init_policy(
    d_feat: int = 8,
    d_emb: int = 16,
    d_hid: int = 32,
    vocab: PolicyVocab = PolicyVocab(),
    seed: int = 0,
) -> PolicyParams:
    """Uniform(-s, s) weights with s = 1/sqrt(columns); zero biases."""
    if min(d_feat, d_emb, d_hid) < 1:
        raise ValueError("policy dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    V = vocab.size

    def uniform(rows, cols):
        s = 1.0 / np.sqrt(cols)
        return rng.uniform(-s, s, size=(rows, cols))

    return PolicyParams(
        E=uniform(V, d_emb),
        W_x=uniform(d_hid, d_feat),
        W_e=uniform(d_hid, d_emb),
        W_h=uniform(d_hid, d_hid),
        b=np.zeros(d_hid),
        U=uniform(V, d_hid),
        c=np.zeros(V),
        vocab=vocab,
        provenance={"init_seed": int(seed)},
    )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def step_logits(p: PolicyParams, features, h_prev=None, tok_prev: int = START):
    """One recurrent step; returns (logits, h_next)."""
    features = np.asarray(features, dtype=np.float64)
    if h_prev is None or tok_prev == START:
        h_prev = np.zeros(p.d_hid)
    emb = np.zeros(p.d_emb) if tok_prev == START else p.E[tok_prev]
    h_next = np.tanh(p.W_x @ features + p.W_e @ emb + p.W_h @ np.asarray(h_prev) + p.b)
    return p.U @ h_next + p.c, h_next


def sample_batch(
    p: PolicyParams,
    features,
    temperature: float,
    max_len: int,
    rng: Optional[np.random.Generator] = None,
) -> list[TokenSequence]:
    """Sample one sequence per feature row; temperature 0 means argmax decoding.

    Recorded log-probabilities are always at temperature 1.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be positive (or 0 for greedy)")
    if temperature > 0 and rng is None:
        raise ValueError("sampling with temperature > 0 needs an rng")
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    B = X.shape[0]
    V, eos = p.vocab.size, p.vocab.EOS

    x_proj = X @ p.W_x.T + p.b
    h = np.zeros((B, p.d_hid))
    emb = np.zeros((B, p.d_emb))
    active = np.ones(B, dtype=bool)
    toks = np.zeros((B, max_len), dtype=np.int64)
    lps = np.zeros((B, max_len))
    lengths = np.full(B, max_len)
    rows = np.arange(B)

    for t in range(max_len):
        h = np.tanh(x_proj + emb @ p.W_e.T + h @ p.W_h.T)
        logits = h @ p.U.T + p.c
        logp = _log_softmax(logits)
        if temperature == 0:
            choice = logits.argmax(axis=1)
        else:
            probs = np.exp(_log_softmax(logits / temperature))
            u = rng.random(B)
            choice = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), V - 1)
        toks[:, t] = choice
        lps[:, t] = logp[rows, choice]
        finished = active & (choice == eos)
        lengths[finished] = t + 1
        active &= ~finished
        if not active.any():
            break
        emb = p.E[choice]

    out = []
    for i in range(B):
        n = int(lengths[i])
        lp = lps[i, :n].tolist()
        out.append(TokenSequence(tokens=toks[i, :n].tolist(), per_token_logprob=lp, total_logprob=float(np.sum(lps[i, :n]))))
    return out


def sample_sequence(p: PolicyParams, features, temperature: float, max_len: int, rng=None) -> TokenSequence:
    return sample_batch(p, np.asarray(features)[None, :], temperature, max_len, rng)[0]


def greedy_sequence(p: PolicyParams, features, max_len: int) -> TokenSequence:
    return sample_sequence(p, features, 0.0, max_len)


def _check_tokens(p: PolicyParams, token_lists: Sequence[Sequence[int]]) -> None:
    V = p.vocab.size
    for toks in token_lists:
        if len(toks) == 0:
            raise ValueError("token sequence must be non-empty")
        for t in toks:
            if not 0 <= int(t) < V:
                raise ValueError(f"token id {t} outside vocabulary of size {V}")


def _pad(token_lists: Sequence[Sequence[int]]):
    B = len(token_lists)
    T = max(len(t) for t in token_lists)
    Y = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for i, toks in enumerate(token_lists):
        Y[i, : len(toks)] = toks
        mask[i, : len(toks)] = 1.0
    return Y, mask


def _forward(p: PolicyParams, X: np.ndarray, Y: np.ndarray):
    """Teacher-forced pass; returns (embeddings in, hidden states, log-softmax)."""
    B, T = Y.shape
    embs = np.zeros((B, T, p.d_emb))
    embs[:, 1:] = p.E[Y[:, :-1]]
    x_proj = X @ p.W_x.T + p.b
    hs = np.zeros((B, T, p.d_hid))
    h = np.zeros((B, p.d_hid))
    for t in range(T):
        h = np.tanh(x_proj + embs[:, t] @ p.W_e.T + h @ p.W_h.T)
        hs[:, t] = h
    logp = _log_softmax(hs @ p.U.T + p.c)
    return embs, hs, logp


def sequence_logprob_batch(p: PolicyParams, features, token_lists) -> list[TokenSequence]:
    _check_tokens(p, token_lists)
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    Y, mask = _pad(token_lists)
    _, _, logp = _forward(p, X, Y)
    picked = np.take_along_axis(logp, Y[:, :, None], axis=2)[:, :, 0]
    out = []
    for i, toks in enumerate(token_lists):
        n = len(toks)
        out.append(TokenSequence(list(map(int, toks)), picked[i, :n].tolist(), float(np.sum(picked[i, :n]))))
    return out


def sequence_logprob(p: PolicyParams, features, tokens: Sequence[int]) -> TokenSequence:
    return sequence_logprob_batch(p, np.asarray(features)[None, :], [tokens])[0]


def weighted_logprob_gradient(
    p: PolicyParams,
    features,
    token_lists: Sequence[Sequence[int]],
    seq_weights: Optional[Iterable[float]] = None,
    token_weights: Optional[Sequence[Sequence[float]]] = None,
) -> PolicyParams:
    """Gradient of sum_i sum_t w_i * v_it * log p(y_it | prefix) over a batch.

    seq_weights default to 1; token_weights (per-token multipliers) default to 1.
    """
    _check_tokens(p, token_lists)
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    Y, mask = _pad(token_lists)
    B, T = Y.shape
    W = mask.copy()
    if seq_weights is not None:
        W *= np.asarray(list(seq_weights), dtype=np.float64)[:, None]
    if token_weights is not None:
        for i, tw in enumerate(token_weights):
            W[i, : len(tw)] *= np.asarray(tw, dtype=np.float64)

    embs, hs, logp = _forward(p, X, Y)
    # d/dlogits of w * log softmax(z)[y] = w * (onehot(y) - softmax(z))
    dz = -np.exp(logp) * W[:, :, None]
    np.put_along_axis(dz, Y[:, :, None], np.take_along_axis(dz, Y[:, :, None], axis=2) + W[:, :, None], axis=2)

    g = p.zeros_like()
    g.U = np.einsum("btv,bth->vh", dz, hs)
    g.c = dz.sum(axis=(0, 1))
    dh_from_out = dz @ p.U

    dA = np.zeros((B, T, p.d_hid))
    carry = np.zeros((B, p.d_hid))
    for t in range(T - 1, -1, -1):
        dh = dh_from_out[:, t] + carry
        da = dh * (1.0 - hs[:, t] ** 2)
        dA[:, t] = da
        carry = da @ p.W_h

    g.W_x = dA.sum(axis=1).T @ X
    g.b = dA.sum(axis=(0, 1))
    g.W_e = np.einsum("bth,bte->he", dA, embs)
    g.W_h = np.einsum("bth,btk->hk", dA[:, 1:], hs[:, :-1])
    dE_rows = dA[:, 1:] @ p.W_e  # (B, T-1, d_emb), gradient wrt E[y_{t-1}]
    np.add.at(g.E, Y[:, :-1].ravel(), dE_rows.reshape(-1, p.d_emb))
    return g


def logprob_gradient(p: PolicyParams, features, tokens: Sequence[int]) -> PolicyParams:
    """Exact gradient of total log-probability of one token sequence."""
    return weighted_logprob_gradient(p, np.asarray(features)[None, :], [tokens])


def decode_response(
    tokens: Sequence[int],
    duration_s: float,
    vocab: PolicyVocab = PolicyVocab(),
    profile: TagProfile = DEFAULT_PROFILE,
) -> str:
    """Render policy tokens as tagged text.

    The exact run TIME_OPEN B_s B_e TIME_CLOSE becomes an answer with an
    "[a, b]" pair. Any other arrangement is written out token by token, with
    runs of loose bin tokens as comma-separated numbers, so the parser sees
    the malformed structure as it is.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    tag_text = {
        vocab.THINK_OPEN: profile.think_open,
        vocab.THINK_CLOSE: profile.think_close,
        vocab.TIME_OPEN: profile.answer_open,
        vocab.TIME_CLOSE: profile.answer_close,
    }
    parts: list[str] = []
    prev_word = prev_bin = False
    toks = list(tokens)
    i = 0
    while i < len(toks):
        tok = toks[i]
        if tok == vocab.EOS:
            break
        if (
            tok == vocab.TIME_OPEN
            and i + 3 < len(toks)
            and vocab.is_bin(toks[i + 1])
            and vocab.is_bin(toks[i + 2])
            and toks[i + 3] == vocab.TIME_CLOSE
        ):
            a = vocab.bin_center(vocab.bin_index(toks[i + 1]), duration_s)
            b = vocab.bin_center(vocab.bin_index(toks[i + 2]), duration_s)
            parts.append(profile.answer_open + f"[{a:.3f}, {b:.3f}]" + profile.answer_close)
            prev_word = prev_bin = False
            i += 4
            continue
        if tok in tag_text:
            parts.append(tag_text[tok])
            prev_word = False
            prev_bin = False
        elif vocab.is_filler(tok):
            parts.append((" " if prev_word else "") + vocab.filler_word(tok - 5))
            prev_word, prev_bin = True, False
        else:
            number = f"{vocab.bin_center(vocab.bin_index(tok), duration_s):.3f}"
            sep = ", " if prev_bin else (" " if prev_word else "")
            parts.append(sep + number)
            prev_word = prev_bin = True
        i += 1
    return "".join(parts)


def encode_response(
    cot_fillers: Sequence[int], iv: TimeInterval, duration_s: float, vocab: PolicyVocab = PolicyVocab()
) -> list[int]:
    """Token sequence for a well-formed response with the interval quantized to bins."""
    s = vocab.time_to_bin(iv.start_s, duration_s)
    e = vocab.time_to_bin(iv.end_s, duration_s)
    return (
        [vocab.THINK_OPEN]
        + [vocab.filler(k) for k in cot_fillers]
        + [vocab.THINK_CLOSE, vocab.TIME_OPEN, vocab.bin(s), vocab.bin(e), vocab.TIME_CLOSE, vocab.EOS]
    )


CHECKPOINT_FORMAT = "vtg_rl.policy/1"


def params_to_dict(p: PolicyParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "dims": {"d_feat": p.d_feat, "d_emb": p.d_emb, "d_hid": p.d_hid},
        "vocab": {"n_filler": p.vocab.n_filler, "n_bins": p.vocab.n_bins},
        "provenance": p.provenance,
        "params": {k: v.tolist() for k, v in p.arrays().items()},
    }


def params_from_dict(obj: dict) -> PolicyParams:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a policy checkpoint (format={obj.get('format')!r})")
    vocab = PolicyVocab(**obj["vocab"])
    arrays = {k: np.asarray(obj["params"][k], dtype=np.float64) for k in PARAM_NAMES}
    p = PolicyParams(**arrays, vocab=vocab, provenance=dict(obj.get("provenance", {})))
    p.validate()
    if (p.d_feat, p.d_emb, p.d_hid) != tuple(obj["dims"][k] for k in ("d_feat", "d_emb", "d_hid")):
        raise ValueError("checkpoint dims do not match parameter shapes")
    return p


def save_checkpoint(p: PolicyParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(p), fh)
        fh.write("\n")


def load_checkpoint(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
