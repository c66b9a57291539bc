"""Table-level linking: a cross encoder over (question, table, columns).

Per table, token vectors from a frozen sequence-encoding provider are fused
per span (question, table name, each column) into ``d_model`` vectors.  The
question vector passes a dense layer + dropout + ReLU whose second half is
kept as the SQL-relevant part.  Column vectors are attended from the table
vector (multi-head, single query), added to it and L2-normalized.  Every
target (the fused table vector and each column vector) is then scored twice:
by cosine similarity with the question part and by a two-layer classifier.

All trainable pieces have hand-written backward passes; see
``instance_loss_and_grad``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, asdict
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from ._http import RemoteError, bearer_headers, post_json
from .catalog import SchemaCatalog, SchemaElementId, SchemaSet, TableSchema
from .checkpoint import load_arrays, save_arrays
from .data import Instance
from .embedder import FeatureConfig, TrainingDivergedError, _Adam, featurize, normalize_text

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
FUSIONS = ("recurrent", "mean")


class EncoderError(RuntimeError):
    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class DegenerateFusionError(ValueError):
    pass


# ----------------------------------------------------------------------------
# sequence-encoding providers

class SequenceEncoder(Protocol):
    dim: int

    def tokenize(self, text: str) -> list[str]: ...

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9]+")


def word_tokens(text: str) -> list[str]:
    """Lowercase alphanumeric runs; underscores and punctuation split tokens."""
    return _TOKEN.findall(text.lower())


class HashTokenEncoder:
    """Local provider: each token is a frozen random projection of its hashed n-grams."""

    def __init__(self, dim: int = 64, features: FeatureConfig = FeatureConfig((1, 2, 3), 2048, 7), seed: int = 0):
        self.dim = dim
        self.features = features
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((features.dim, dim))
        self._cache: dict[str, np.ndarray] = {}

    def tokenize(self, text: str) -> list[str]:
        return word_tokens(text)

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            z = np.asarray(featurize(f" {token} ", self.features) @ self._proj).ravel()
            vec = z / np.linalg.norm(z)
            self._cache[token] = vec
        return vec

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self._vector(t) for t in tokens])


class RemoteTokenEncoder:
    """Remote provider returning one vector per input token.

    Request ``{"input": [tokens], "model": ..., "per_token": true}``; response
    ``{"data": [{"embedding": [...]}, ...]}``, one row per token.
    """

    def __init__(self, url: str, model: str, dim: int, token_env: str = "EMBED_API_KEY",
                 timeout: float = 30.0, retries: int = 3, backoff: float = 0.5,
                 client: httpx.Client | None = None, sleep=None):
        self.url, self.model, self.dim, self.token_env = url, model, dim, token_env
        self.timeout, self.retries, self.backoff = timeout, retries, backoff
        self.client = client or httpx.Client()
        self._sleep = sleep

    def tokenize(self, text: str) -> list[str]:
        return word_tokens(text)

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        kwargs = {"sleep": self._sleep} if self._sleep else {}
        try:
            body = post_json(
                self.client, self.url,
                {"input": list(tokens), "model": self.model, "per_token": True},
                headers=bearer_headers(self.token_env), retries=self.retries,
                backoff=self.backoff, timeout=self.timeout, **kwargs,
            )
            X = np.array([row["embedding"] for row in body["data"]], dtype=np.float64)
        except RemoteError as exc:
            raise EncoderError(str(exc), retryable=exc.retryable) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise EncoderError(f"malformed encoder response from {self.url}", retryable=False) from exc
        if X.shape != (len(tokens), self.dim):
            raise EncoderError(f"encoder returned shape {X.shape}, expected {(len(tokens), self.dim)}")
        return X


# ----------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class CrossEncoderConfig:
    d_model: int = 64
    heads: int = 4
    token_dim: int = 64
    hidden: int = 64
    fusion: str = "recurrent"
    token_budget: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % 2:
            raise ValueError("d_model must be even (the question vector is split in halves)")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the head count")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.fusion == "mean" and self.token_dim != self.d_model:
            raise ValueError("mean-pool fusion needs token_dim == d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class CrossEncoderParams:
    config: CrossEncoderConfig
    weights: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)

    def names(self) -> list[str]:
        return sorted(self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.names()])

    def with_flat(self, vector: np.ndarray) -> CrossEncoderParams:
        out, pos = {}, 0
        for k in self.names():
            size = self.weights[k].size
            out[k] = vector[pos : pos + size].reshape(self.weights[k].shape).copy()
            pos += size
        return CrossEncoderParams(self.config, out, list(self.history))

    def copy(self) -> CrossEncoderParams:
        return CrossEncoderParams(self.config, {k: v.copy() for k, v in self.weights.items()}, list(self.history))

    def save(self, path) -> None:
        save_arrays(path, "cross_encoder", self.weights, {"config": asdict(self.config), "history": self.history})

    @classmethod
    def load(cls, path) -> CrossEncoderParams:
        kind, arrays, meta = load_arrays(path)
        if kind != "cross_encoder":
            raise ValueError(f"{path} holds a {kind!r} checkpoint, not a cross encoder")
        return cls(CrossEncoderConfig(**meta["config"]), arrays, list(meta.get("history", [])))


def init_cross_encoder(config: CrossEncoderConfig = CrossEncoderConfig(), seed: int = 0) -> CrossEncoderParams:
    rng = np.random.default_rng(seed)
    d, k, hid = config.d_model, config.token_dim, config.hidden

    def dense(fan_in, *shape):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    w = {
        "dn_W": dense(d, d, d),
        "dn_b": np.full(d, 0.1),
        "attn_Wq": dense(d, d, d),
        "attn_Wk": dense(d, d, d),
        "attn_Wv": dense(d, d, d),
        "attn_Wo": dense(d, d, d),
        "cls_W1": dense(2 * d, 2 * d, hid),
        "cls_b1": np.zeros(hid),
        "cls_w2": dense(hid, hid),
        "cls_b2": np.zeros(1),
    }
    if config.fusion == "recurrent":
        w["fuse_Wx"] = dense(k, k, d)
        w["fuse_Wh"] = 0.5 * dense(d, d, d)
        w["fuse_b"] = np.zeros(d)
    return CrossEncoderParams(config, w)


# ----------------------------------------------------------------------------
# building blocks

@dataclass
class TokenSpans:
    """Provider token vectors per span, after the token budget is applied."""

    question: np.ndarray
    table: np.ndarray
    columns: list[np.ndarray]
    truncated: bool = False


@dataclass
class SequenceEmbeddings:
    e_q: np.ndarray
    e_t: np.ndarray
    e_c: np.ndarray  # (|C_j|, d_model)


def column_span_text(column) -> str:
    text = column.display_name
    if column.description and normalize_text(column.description) != " ".join(word_tokens(column.display_name)):
        text += " " + column.description
    return text


def token_spans(provider: SequenceEncoder, a: str, table: TableSchema, budget: int = 512,
                column_order: Sequence[int] | None = None) -> TokenSpans:
    """Tokenize question / table / columns as one sequence cut at ``budget`` tokens.

    Columns falling entirely past the budget get an empty span.
    """
    order = list(range(len(table.columns))) if column_order is None else list(column_order)
    spans = [provider.tokenize(a), provider.tokenize(table.display_name)]
    spans += [provider.tokenize(column_span_text(table.columns[i])) for i in order]
    left, cut, truncated = budget, [], False
    for toks in spans:
        take = toks[: max(left, 0)]
        truncated |= len(take) < len(toks)
        left -= len(take)
        cut.append(take)
    try:
        vecs = [provider.encode_tokens(t) for t in cut]
    except EncoderError:
        raise
    except Exception as exc:  # provider bugs surface as encoder errors
        raise EncoderError(f"sequence encoder failed: {exc}") from exc
    cols = [None] * len(order)
    for slot, i in enumerate(order):
        cols[i] = vecs[2 + slot]
    return TokenSpans(vecs[0], vecs[1], cols, truncated)


def recurrent_fuse(X: np.ndarray, Wx: np.ndarray, Wh: np.ndarray, b: np.ndarray):
    """tanh recurrence over the rows of ``X``; returns (final state, all states)."""
    h = np.zeros(Wh.shape[0])
    states = [h]
    for x in X:
        h = np.tanh(x @ Wx + h @ Wh + b)
        states.append(h)
    return h, states


def _fuse(params: CrossEncoderParams, X: np.ndarray):
    d = params.config.d_model
    if X.shape[0] == 0:
        return np.zeros(d), None
    if params.config.fusion == "mean":
        return X.mean(axis=0), None
    w = params.weights
    return recurrent_fuse(X, w["fuse_Wx"], w["fuse_Wh"], w["fuse_b"])


def encode_sequences(provider: SequenceEncoder, a: str, table: TableSchema, params: CrossEncoderParams) -> SequenceEmbeddings:
    spans = token_spans(provider, a, table, params.config.token_budget)
    e_q, _ = _fuse(params, spans.question)
    e_t, _ = _fuse(params, spans.table)
    cols = [_fuse(params, X)[0] for X in spans.columns]
    e_c = np.stack(cols) if cols else np.zeros((0, params.config.d_model))
    return SequenceEmbeddings(e_q, e_t, e_c)


def disentangle(params: CrossEncoderParams, e_q: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dense layer, dropout (training only), ReLU; returns (unrelated, related) halves."""
    w = params.weights
    z = e_q @ w["dn_W"] + w["dn_b"]
    if train and params.config.dropout > 0:
        z = z * _dropout_mask(z.shape, params.config.dropout, rng or np.random.default_rng())
    r = np.maximum(z, 0.0)
    half = params.config.d_model // 2
    return r[:half], r[half:]


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def multi_head_attention(e_t: np.ndarray, keys: np.ndarray, values: np.ndarray,
                         weights: Mapping[str, np.ndarray], heads: int, return_weights: bool = False):
    """Single-query scaled dot-product attention with ``heads`` heads.

    ``weights`` supplies ``attn_Wq``, ``attn_Wk``, ``attn_Wv``, ``attn_Wo``
    (row-vector convention: ``x @ W``).
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("attention needs at least one key")
    if keys.shape[0] != values.shape[0]:
        raise ValueError("keys and values must have the same length")
    d = e_t.shape[0]
    dh = d // heads
    q = e_t @ weights["attn_Wq"]
    K = keys @ weights["attn_Wk"]
    V = values @ weights["attn_Wv"]
    outs, probs = [], []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        p = _softmax(K[:, sl] @ q[sl] / np.sqrt(dh))
        probs.append(p)
        outs.append(p @ V[:, sl])
    out = np.concatenate(outs) @ weights["attn_Wo"]
    return (out, np.stack(probs)) if return_weights else out


def fuse_norm(e_t: np.ndarray, e_t_a: np.ndarray) -> np.ndarray:
    u = e_t + e_t_a
    n = np.linalg.norm(u)
    if n == 0:
        raise DegenerateFusionError("table and attention vectors cancel exactly")
    return u / n


def pad_related(e_q_s: np.ndarray, d_model: int) -> np.ndarray:
    """Zero-pad the related half of the question vector up to ``d_model``."""
    out = np.zeros(d_model)
    out[: e_q_s.shape[0]] = e_q_s
    return out


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pair_scores(params: CrossEncoderParams, e_q_s: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(cosine scores in [-1, 1], classifier probabilities in (0, 1)) per target row.

    A zero vector on either side has cosine score 0.
    """
    w = params.weights
    s = pad_related(e_q_s, params.config.d_model) if e_q_s.shape[0] != params.config.d_model else e_q_s
    targets = np.atleast_2d(targets)
    cos = np.array([_cos(s, t) for t in targets])
    X = np.hstack([np.tile(s, (targets.shape[0], 1)), targets])
    H = np.maximum(X @ w["cls_W1"] + w["cls_b1"], 0.0)
    cl = _sigmoid(H @ w["cls_w2"] + w["cls_b2"][0])
    return cos, cl


def bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def cosine_probability(score_cos):
    """Map a cosine score in [-1, 1] onto [0, 1] for the cross-entropy loss."""
    return (1.0 + np.asarray(score_cos)) / 2.0


def table_level_loss(prob_cos: np.ndarray, prob_cl: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    """Mean binary cross-entropy per branch and their sum."""
    labels = np.asarray(labels, dtype=np.float64)
    l_cos = float(np.mean(bce(np.asarray(prob_cos, dtype=np.float64), labels)))
    l_cl = float(np.mean(bce(np.asarray(prob_cl, dtype=np.float64), labels)))
    return l_cos, l_cl, l_cos + l_cl


# ----------------------------------------------------------------------------
# full forward / backward over one instance

@dataclass
class LabeledExample:
    instance: Instance
    catalog: SchemaCatalog
    gold: SchemaSet


def _labels_for(table: TableSchema, gold: SchemaSet) -> np.ndarray:
    y = [1.0 if SchemaElementId(table.name) in gold else 0.0]
    y += [1.0 if SchemaElementId(table.name, c.name) in gold else 0.0 for c in table.columns]
    return np.array(y)


def _fuse_backward(params, X, states, dh, grads):
    """BPTT through the tanh recurrence; accumulates into ``grads``."""
    if states is None or params.config.fusion != "recurrent":
        return
    w = params.weights
    for t in range(X.shape[0], 0, -1):
        h, h_prev = states[t], states[t - 1]
        da = dh * (1.0 - h * h)
        grads["fuse_Wx"] += np.outer(X[t - 1], da)
        grads["fuse_Wh"] += np.outer(h_prev, da)
        grads["fuse_b"] += da
        dh = w["fuse_Wh"] @ da


def _cos_grads_rows(s: np.ndarray, T: np.ndarray):
    """cos(s, t) per row t of ``T`` and gradients w.r.t. s and each t.

    Degenerate (zero) vectors give cosine 0 and zero gradients.
    """
    m = T.shape[0]
    ns, nt = np.linalg.norm(s), np.linalg.norm(T, axis=1)
    c, ds, dt = np.zeros(m), np.zeros((m, s.shape[0])), np.zeros_like(T)
    if ns == 0:
        return c, ds, dt
    ok = nt > 0
    sh = s / ns
    th = T[ok] / nt[ok, None]
    c[ok] = th @ sh
    ds[ok] = (th - c[ok, None] * sh) / ns
    dt[ok] = (sh - c[ok, None] * th) / nt[ok, None]
    return c, ds, dt


def _bce_dp(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d bce / d p, zero where the clamp is active."""
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    safe = np.where(inside, p, 0.5)
    return np.where(inside, -y / safe + (1.0 - y) / (1.0 - safe), 0.0)


def instance_loss_and_grad(
    params: CrossEncoderParams,
    spans: Sequence[TokenSpans],
    labels: Sequence[np.ndarray],
    dropout_mask: np.ndarray | None = None,
    need_grad: bool = True,
):
    """Table-level loss of one instance over all its tables, with exact gradients.

    ``spans[j]`` / ``labels[j]`` describe table j: label 0 is the table
    itself, the rest its columns.  Returns ``(L_cos, L_cl, L_t, grads)``.
    """
    cfg, w = params.config, params.weights
    d, half, H = cfg.d_model, cfg.d_model // 2, cfg.heads
    dh = d // H
    grads = {k: np.zeros_like(v) for k, v in w.items()} if need_grad else None
    n_total = sum(len(y) for y in labels)

    # the question span is identical for every table (it leads each sequence)
    Xq = spans[0].question
    e_q, q_states = _fuse(params, Xq)
    z = e_q @ w["dn_W"] + w["dn_b"]
    mask = np.ones(d) if dropout_mask is None else dropout_mask
    zm = z * mask
    r = np.maximum(zm, 0.0)
    s = pad_related(r[half:], d)
    ds = np.zeros(d)

    loss_cos = loss_cl = 0.0
    for sp_j, y in zip(spans, labels):
        e_t, t_states = _fuse(params, sp_j.table)
        col_fused = [_fuse(params, Xc) for Xc in sp_j.columns]
        E = np.stack([c[0] for c in col_fused]) if col_fused else np.zeros((0, d))

        if E.shape[0]:
            q = e_t @ w["attn_Wq"]
            K = E @ w["attn_Wk"]
            V = E @ w["attn_Wv"]
            probs, outs = [], []
            for i in range(H):
                sl = slice(i * dh, (i + 1) * dh)
                p = _softmax(K[:, sl] @ q[sl] / np.sqrt(dh))
                probs.append(p)
                outs.append(p @ V[:, sl])
            o = np.concatenate(outs)
            e_a = o @ w["attn_Wo"]
        else:
            e_a = np.zeros(d)
        u = e_t + e_a
        nu = np.linalg.norm(u)
        if nu == 0:
            raise DegenerateFusionError("table and attention vectors cancel exactly")
        e_tc = u / nu
        T = np.vstack([e_tc[None, :], E])

        # both branches, all targets of the table at once
        c, dc_ds, dc_dt = _cos_grads_rows(s, T)
        pc = (1.0 + c) / 2.0
        loss_cos += float(bce(pc, y).sum())
        X = np.hstack([np.broadcast_to(s, T.shape), T])
        A1 = X @ w["cls_W1"] + w["cls_b1"]
        H1 = np.maximum(A1, 0.0)
        pl = _sigmoid(H1 @ w["cls_w2"] + w["cls_b2"][0])
        loss_cl += float(bce(pl, y).sum())
        if not need_grad:
            continue

        g_c = 0.5 * _bce_dp(pc, y) / n_total
        ds += g_c @ dc_ds
        dT = g_c[:, None] * dc_dt
        g_logit = _bce_dp(pl, y) * pl * (1.0 - pl) / n_total
        grads["cls_w2"] += H1.T @ g_logit
        grads["cls_b2"][0] += g_logit.sum()
        dA1 = g_logit[:, None] * w["cls_w2"] * (A1 > 0)
        grads["cls_W1"] += X.T @ dA1
        grads["cls_b1"] += dA1.sum(axis=0)
        dX = dA1 @ w["cls_W1"].T
        ds += dX[:, :d].sum(axis=0)
        dT += dX[:, d:]
        # e_tc = u / |u|, u = e_t + e_a
        g = dT[0]
        du = (g - e_tc * (e_tc @ g)) / nu
        de_t = du.copy()
        dE = dT[1:].copy()
        if E.shape[0]:
            grads["attn_Wo"] += np.outer(o, du)
            do = w["attn_Wo"] @ du
            dq = np.zeros(d)
            dK = np.zeros_like(K)
            dV = np.zeros_like(V)
            for i in range(H):
                sl = slice(i * dh, (i + 1) * dh)
                p = probs[i]
                do_i = do[sl]
                dV[:, sl] += np.outer(p, do_i)
                dp = V[:, sl] @ do_i
                dl = p * (dp - p @ dp) / np.sqrt(dh)
                dq[sl] += K[:, sl].T @ dl
                dK[:, sl] += np.outer(dl, q[sl])
            grads["attn_Wq"] += np.outer(e_t, dq)
            de_t += w["attn_Wq"] @ dq
            grads["attn_Wk"] += E.T @ dK
            grads["attn_Wv"] += E.T @ dV
            dE += dK @ w["attn_Wk"].T + dV @ w["attn_Wv"].T
        _fuse_backward(params, sp_j.table, t_states, de_t, grads)
        for (_, states), Xc, g_c in zip(col_fused, sp_j.columns, dE):
            _fuse_backward(params, Xc, states, g_c, grads)

    l_cos, l_cl = loss_cos / n_total, loss_cl / n_total
    if need_grad:
        dr = np.zeros(d)
        dr[half:] = ds[:half]
        dz = dr * (zm > 0) * mask
        grads["dn_W"] += np.outer(e_q, dz)
        grads["dn_b"] += dz
        de_q = w["dn_W"] @ dz
        _fuse_backward(params, Xq, q_states, de_q, grads)
    return l_cos, l_cl, l_cos + l_cl, grads


def example_spans(provider: SequenceEncoder, example: LabeledExample, budget: int,
                  rng: np.random.Generator | None = None):
    spans, labels = [], []
    for t in example.catalog.tables:
        order = rng.permutation(len(t.columns)) if rng is not None else None
        spans.append(token_spans(provider, example.instance.anchor, t, budget, order))
        labels.append(_labels_for(t, example.gold))
    return spans, labels


def mean_table_loss(params: CrossEncoderParams, provider: SequenceEncoder, examples: Sequence[LabeledExample]) -> float:
    """Mean L_t over ``examples`` in inference mode (no dropout, catalog column order)."""
    total = 0.0
    for ex in examples:
        spans, labels = example_spans(provider, ex, params.config.token_budget)
        total += instance_loss_and_grad(params, spans, labels, need_grad=False)[2]
    return total / len(examples)


@dataclass(frozen=True)
class CrossTrainConfig:
    learning_rate: float = 0.005
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    shuffle_columns: bool = True


def train_cross_encoder(
    examples: Sequence[LabeledExample],
    provider: SequenceEncoder,
    config: CrossTrainConfig = CrossTrainConfig(),
    init: CrossEncoderParams | None = None,
    model: CrossEncoderConfig = CrossEncoderConfig(),
) -> CrossEncoderParams:
    """Adam on the mean L_t; provider frozen, column order shuffled per batch."""
    if not examples:
        raise ValueError("train_cross_encoder needs at least one example")
    params = (init if init is not None else init_cross_encoder(model, config.seed)).copy()
    params.history = []
    rng = np.random.default_rng(config.seed + 1)
    names = params.names()
    opt = {k: _Adam(params.weights[k].shape, config.learning_rate) for k in names}
    budget = params.config.token_budget

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            total = {k: np.zeros_like(params.weights[k]) for k in names}
            for ex in batch:
                spans, labels = example_spans(provider, ex, budget, rng if config.shuffle_columns else None)
                mask = None
                if params.config.dropout > 0:
                    mask = _dropout_mask(params.config.d_model, params.config.dropout, rng)
                _, _, lt, g = instance_loss_and_grad(params, spans, labels, mask)
                losses.append(lt)
                for k in names:
                    total[k] += g[k]
            for k in names:
                opt[k].step(params.weights[k], total[k] / len(batch))
        mean = float(np.mean(losses))
        if not np.isfinite(mean) or not all(np.all(np.isfinite(v)) for v in params.weights.values()):
            raise TrainingDivergedError(epoch, mean)
        params.history.append(mean)
        log.debug("cross-encoder epoch %d mean L_t %.4f", epoch, mean)
    return params


# ----------------------------------------------------------------------------
# inference

@dataclass(frozen=True)
class SelectionRule:
    table_threshold: float = 0.5
    top_tables: int = 2
    cols_top: int = 8
    cols_rest: int = 4


@dataclass
class TablePrediction:
    score_cos: dict[SchemaElementId, float]
    score_cl: dict[SchemaElementId, float]
    d_pred_cos: SchemaSet
    d_pred_cl: SchemaSet

    @property
    def d_f_t(self) -> SchemaSet:
        return self.d_pred_cos | self.d_pred_cl


def score_tables(params: CrossEncoderParams, provider: SequenceEncoder, instance: Instance, catalog: SchemaCatalog):
    """Cosine and classifier scores for every table and column of ``catalog``."""
    score_cos, score_cl = {}, {}
    e_q_s = None
    for t in catalog.tables:
        seq = encode_sequences(provider, instance.anchor, t, params)
        if e_q_s is None:
            e_q_s = disentangle(params, seq.e_q)[1]
        if seq.e_c.shape[0]:
            e_a = multi_head_attention(seq.e_t, seq.e_c, seq.e_c, params.weights, params.config.heads)
        else:
            e_a = np.zeros(params.config.d_model)
        targets = np.vstack([fuse_norm(seq.e_t, e_a)[None, :], seq.e_c])
        cos, cl = pair_scores(params, e_q_s, targets)
        ids = [SchemaElementId(t.name)] + [SchemaElementId(t.name, c.name) for c in t.columns]
        for e, a, b in zip(ids, cos, cl):
            score_cos[e] = float(a)
            score_cl[e] = float(b)
    return score_cos, score_cl


def select_elements(scores: Mapping[SchemaElementId, float], catalog: SchemaCatalog,
                    rule: SelectionRule = SelectionRule()) -> SchemaSet:
    """Tables above threshold; top-k columns per table depending on table rank.

    Ties go to the element that comes first in the catalog.
    """
    order = catalog.element_order()
    selected = [t for t in catalog.tables if scores[SchemaElementId(t.name)] > rule.table_threshold]
    ranked = sorted(selected, key=lambda t: (-scores[SchemaElementId(t.name)], order[SchemaElementId(t.name)]))
    out = []
    for rank, t in enumerate(ranked):
        k = rule.cols_top if rank < rule.top_tables else rule.cols_rest
        cols = [SchemaElementId(t.name, c.name) for c in t.columns]
        cols.sort(key=lambda e: (-scores[e], order[e]))
        out.append(SchemaElementId(t.name))
        out.extend(cols[:k])
    return SchemaSet(out)


def predict_table_level(params: CrossEncoderParams, provider: SequenceEncoder, instance: Instance,
                        catalog: SchemaCatalog, rule: SelectionRule = SelectionRule()) -> TablePrediction:
    score_cos, score_cl = score_tables(params, provider, instance, catalog)
    return TablePrediction(
        score_cos=score_cos,
        score_cl=score_cl,
        d_pred_cos=select_elements(score_cos, catalog, rule),
        d_pred_cl=select_elements(score_cl, catalog, rule),
    )
