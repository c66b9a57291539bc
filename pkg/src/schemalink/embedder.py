"""Column-level linking with a trainable hashed character n-gram embedder.

Texts are featurized into hashed character n-gram counts and linearly
projected; embeddings are L2-normalized.  The projection is trained with a
cosine-distance triplet loss whose anchor is the evidence plus question, the
positive a gold column and the negative a non-gold column.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import httpx
import numpy as np
import scipy.sparse as sp

from ._http import RemoteError, bearer_headers, post_json
from .catalog import ColumnSchema, SchemaCatalog, SchemaElementId, SchemaSet, ScoredElement, TableSchema
from .checkpoint import load_arrays, save_arrays
from .data import Instance

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    """Text whose features (or projection) are all zero cannot be normalized."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch


@dataclass(frozen=True)
class FeatureConfig:
    ngram_sizes: tuple[int, ...] = (2, 3)
    dim: int = 4096
    seed: int = 0


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def ngram_bucket(gram: str, config: FeatureConfig) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=config.seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") % config.dim


@lru_cache(maxsize=65536)
def _feature_counts(text: str, config: FeatureConfig) -> tuple[tuple[int, ...], tuple[float, ...]]:
    norm = normalize_text(text)
    counts: dict[int, float] = {}
    for n in config.ngram_sizes:
        for i in range(len(norm) - n + 1):
            b = ngram_bucket(norm[i : i + n], config)
            counts[b] = counts.get(b, 0.0) + 1.0
    keys = tuple(sorted(counts))
    return keys, tuple(counts[k] for k in keys)


def featurize(text: str, config: FeatureConfig = FeatureConfig()) -> sp.csr_matrix:
    """Hashed character n-gram counts as a 1 x ``config.dim`` sparse row."""
    keys, values = _feature_counts(text, config)
    return sp.csr_matrix(
        (np.asarray(values, dtype=np.float64), np.asarray(keys, dtype=np.int64), np.array([0, len(keys)])),
        shape=(1, config.dim),
    )


def featurize_many(texts, config: FeatureConfig) -> sp.csr_matrix:
    return sp.vstack([featurize(t, config) for t in texts], format="csr") if texts else sp.csr_matrix((0, config.dim))


@dataclass
class EmbedderParams:
    projection: np.ndarray
    features: FeatureConfig = FeatureConfig()
    history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def embed(self, text: str) -> np.ndarray:
        return embed(self, text)

    def embed_many(self, texts: list[str]) -> np.ndarray:
        X = featurize_many(texts, self.features)
        Z = np.asarray(X @ self.projection)
        norms = np.linalg.norm(Z, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise DegenerateInputError(f"degenerate embedding for {texts[bad[0]]!r}")
        return Z / norms[:, None]

    def save(self, path) -> None:
        f = self.features
        save_arrays(
            path,
            "embedder",
            {"projection": self.projection},
            {"ngram_sizes": list(f.ngram_sizes), "feature_dim": f.dim, "seed": f.seed, "history": self.history},
        )

    @classmethod
    def load(cls, path) -> EmbedderParams:
        kind, arrays, meta = load_arrays(path)
        if kind != "embedder":
            raise ValueError(f"{path} holds a {kind!r} checkpoint, not an embedder")
        features = FeatureConfig(tuple(meta["ngram_sizes"]), meta["feature_dim"], meta["seed"])
        return cls(arrays["projection"], features, list(meta.get("history", [])))


def init_embedder(dim: int = 256, features: FeatureConfig = FeatureConfig(), seed: int = 0) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    return EmbedderParams(rng.standard_normal((features.dim, dim)) / np.sqrt(dim), features)


def embed(params: EmbedderParams, text: str) -> np.ndarray:
    x = featurize(text, params.features)
    if x.nnz == 0:
        raise DegenerateInputError(f"text {text!r} has no features")
    z = np.asarray(x @ params.projection).ravel()
    norm = np.linalg.norm(z)
    if norm == 0:
        raise DegenerateInputError(f"text {text!r} projects to the zero vector")
    return z / norm


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - <u, v> for unit vectors, clipped to [0, 2]."""
    return float(np.clip(1.0 - np.dot(u, v), 0.0, 2.0))


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, beta: float) -> float:
    return max(cosine_distance(a, p) - cosine_distance(a, n) + beta, 0.0)


@dataclass(frozen=True)
class TripletExample:
    anchor_text: str
    positive_text: str
    negative_text: str
    # candidates the negative is re-drawn from each epoch; empty = fixed negative
    negative_pool: tuple[str, ...] = ()


@dataclass(frozen=True)
class TripletTrainConfig:
    margin: float = 0.3
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    dim: int = 256
    features: FeatureConfig = FeatureConfig()

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")


def _forward(params: EmbedderParams, texts: tuple[str, str, str]):
    X = featurize_many(list(texts), params.features)
    Z = np.asarray(X @ params.projection)
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError(f"degenerate triplet {texts!r}")
    return X, Z / norms[:, None], norms


def _triplet_terms(params: EmbedderParams, texts: tuple[str, str, str], beta: float):
    """Loss and sparse gradient pieces (feature rows, dL/dz rows) for one triplet."""
    X, U, norms = _forward(params, texts)
    a, p, n = U
    margin = (1.0 - a @ p) - (1.0 - a @ n) + beta
    if margin <= 0:
        return 0.0, None
    # L = a.n - a.p + const
    g_u = np.stack([n - p, -a, a])
    g_z = (g_u - U * np.sum(U * g_u, axis=1, keepdims=True)) / norms[:, None]
    return float(margin), (X, g_z)


def triplet_gradient(params: EmbedderParams, t: TripletExample, beta: float) -> np.ndarray:
    """Exact gradient of the triplet loss w.r.t. the projection (zero when inactive)."""
    _, pieces = _triplet_terms(params, (t.anchor_text, t.positive_text, t.negative_text), beta)
    grad = np.zeros_like(params.projection)
    if pieces is not None:
        X, g_z = pieces
        grad += np.asarray(X.T @ g_z)
    return grad


def triplet_example_loss(params: EmbedderParams, t: TripletExample, beta: float) -> float:
    return _triplet_terms(params, (t.anchor_text, t.positive_text, t.negative_text), beta)[0]


def mean_triplet_loss(params: EmbedderParams, triplets: list[TripletExample], beta: float) -> float:
    return float(np.mean([triplet_example_loss(params, t, beta) for t in triplets]))


class _Adam:
    def __init__(self, shape, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps, self.t = lr, b1, b2, eps, 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_embedder(
    triplets: list[TripletExample],
    config: TripletTrainConfig = TripletTrainConfig(),
    init: EmbedderParams | None = None,
) -> EmbedderParams:
    """Minibatch Adam on the mean triplet loss; ``history`` holds per-epoch means."""
    if not triplets:
        raise ValueError("train_embedder needs at least one triplet")
    params = init if init is not None else init_embedder(config.dim, config.features, config.seed)
    params = EmbedderParams(params.projection.copy(), params.features, [])
    rng = np.random.default_rng(config.seed + 1)
    opt = _Adam(params.projection.shape, config.learning_rate)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(triplets))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start : start + config.batch_size]]
            grad = np.zeros_like(params.projection)
            for t in batch:
                neg = t.negative_pool[rng.integers(len(t.negative_pool))] if t.negative_pool else t.negative_text
                loss, pieces = _triplet_terms(params, (t.anchor_text, t.positive_text, neg), config.margin)
                losses.append(loss)
                if pieces is not None:
                    X, g_z = pieces
                    # accumulate only the touched feature rows
                    coo = X.tocoo()
                    np.add.at(grad, coo.col, coo.data[:, None] * g_z[coo.row])
            grad /= len(batch)
            opt.step(params.projection, grad)
        mean = float(np.mean(losses))
        if not np.isfinite(mean) or not np.all(np.isfinite(params.projection)):
            raise TrainingDivergedError(epoch, mean)
        params.history.append(mean)
        log.debug("embedder epoch %d mean triplet loss %.4f", epoch, mean)
    return params


# ----------------------------------------------------------------------------
# triplet mining and inference

def column_text(table: TableSchema, column: ColumnSchema) -> str:
    text = f"{table.display_name}.{column.display_name} ({column.value_type})"
    if column.sample_values:
        text += ": " + ", ".join(column.sample_values)
    return text


def mine_triplets(
    instance: Instance, gold: SchemaSet, catalog: SchemaCatalog, seed: int = 0
) -> list[TripletExample]:
    """One triplet per gold column, negative drawn from the same table when possible."""
    gold.validate(catalog)
    gold_cols = gold.column_level()
    if not gold_cols:
        log.info("instance %s: gold schema has no columns, no triplets", instance.id)
        return []
    rng = np.random.default_rng(seed)
    anchor = instance.anchor
    out = []
    for t in catalog.tables:
        negatives_here = [column_text(t, c) for c in t.columns if SchemaElementId(t.name, c.name) not in gold_cols]
        for c in t.columns:
            if SchemaElementId(t.name, c.name) not in gold_cols:
                continue
            pool = negatives_here
            if not pool:
                pool = [
                    column_text(o, oc)
                    for o in catalog.tables
                    if o.name != t.name
                    for oc in o.columns
                    if SchemaElementId(o.name, oc.name) not in gold_cols
                ]
            if not pool:
                continue
            neg = pool[int(rng.integers(len(pool)))]
            out.append(TripletExample(anchor, column_text(t, c), neg, tuple(pool)))
    return out


def score_columns(embedder, instance: Instance, catalog: SchemaCatalog) -> list[ScoredElement]:
    """Cosine similarity between the anchor and every column, in catalog order.

    ``embedder`` is anything with ``embed_many(texts) -> unit rows``.
    """
    ids, texts = [], []
    for t in catalog.tables:
        for c in t.columns:
            ids.append(SchemaElementId(t.name, c.name))
            texts.append(column_text(t, c))
    if not ids:
        return []
    vecs = embedder.embed_many([instance.anchor, *texts])
    sims = vecs[1:] @ vecs[0]
    return [ScoredElement(e, float(s), "column.cosine") for e, s in zip(ids, sims)]


def score_and_filter_columns(
    embedder, instance: Instance, catalog: SchemaCatalog, threshold: float = 0.5
) -> tuple[list[ScoredElement], SchemaSet]:
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [-1, 1]")
    scores = score_columns(embedder, instance, catalog)
    return scores, SchemaSet(s.element for s in scores if s.score > threshold)


class RemoteEmbedder:
    """Embedding endpoint client exposing the same ``embed_many`` surface.

    Request: ``{"input": [...], "model": ...}``; response:
    ``{"data": [{"embedding": [...]}, ...]}`` in request order.
    """

    def __init__(
        self,
        url: str,
        model: str,
        token_env: str = "EMBED_API_KEY",
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
        sleep=None,
    ):
        self.url, self.model, self.token_env = url, model, token_env
        self.timeout, self.retries, self.backoff = timeout, retries, backoff
        self.client = client or httpx.Client()
        self._sleep = sleep

    def embed_many(self, texts: list[str]) -> np.ndarray:
        kwargs = {"sleep": self._sleep} if self._sleep else {}
        body = post_json(
            self.client,
            self.url,
            {"input": list(texts), "model": self.model},
            headers=bearer_headers(self.token_env),
            retries=self.retries,
            backoff=self.backoff,
            timeout=self.timeout,
            **kwargs,
        )
        try:
            Z = np.array([row["embedding"] for row in body["data"]], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise RemoteError(f"malformed embedding response from {self.url}", retryable=False) from exc
        if Z.shape[0] != len(texts):
            raise RemoteError(f"{self.url} returned {Z.shape[0]} embeddings for {len(texts)} inputs", retryable=False)
        norms = np.linalg.norm(Z, axis=1)
        if np.any(norms == 0):
            raise DegenerateInputError("remote embedder returned a zero vector")
        return Z / norms[:, None]

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]
