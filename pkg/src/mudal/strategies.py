"""Instance-level selection: Random, Margin, BADGE (last-layer gradient
embeddings + k-means++ seeding), and the discriminator-score-weighted variant
with a temperature-sharpened softmax. Strategies never touch the pool; they
return indices and the harness applies the reveals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelBundle
from .nn import softmax

STRATEGIES = ("random", "margin", "badge", "grads")


@dataclass(frozen=True)
class QueryRequest:
    """One domain's selection request: pick k of the given unlabeled indices.

    ``features`` holds the feature rows aligned with ``unlabeled``.
    """

    domain: int
    k: int
    unlabeled: np.ndarray
    features: np.ndarray
    bundle: ModelBundle
    seed: object = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "unlabeled", np.asarray(self.unlabeled, dtype=np.int64))
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        if self.k < 0 or self.k > self.unlabeled.size:
            raise ValueError(f"budget k={self.k} outside [0, {self.unlabeled.size}]")
        if self.features.shape[0] != self.unlabeled.size:
            raise ValueError("features must align with unlabeled indices")


def select_random(req: QueryRequest) -> np.ndarray:
    """Uniform without replacement, sorted ascending."""
    if req.k == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(req.seed)
    chosen = rng.choice(req.unlabeled, size=req.k, replace=False)
    return np.sort(chosen)


def margin_scores(bundle: ModelBundle, feats: np.ndarray) -> np.ndarray:
    """Top-1 minus top-2 predicted probability per sample (small = uncertain)."""
    probs = softmax(bundle.class_logits(feats))
    part = np.sort(probs, axis=1)
    return part[:, -1] - part[:, -2]


def select_margin(req: QueryRequest) -> np.ndarray:
    """The k smallest margins, ties broken by ascending index."""
    if req.k == 0:
        return np.empty(0, dtype=np.int64)
    margins = margin_scores(req.bundle, req.features)
    order = np.lexsort((req.unlabeled, margins))
    return req.unlabeled[order[:req.k]]


def badge_embeddings(bundle: ModelBundle, feats: np.ndarray,
                     temperature: float = 1.0) -> np.ndarray:
    """Last-layer gradient embedding at the predicted pseudo-label:
    flatten((p - onehot(argmax p)) outer z) with z the classifier's final-layer
    input; p is the temperature softmax of the logits."""
    z = bundle.trunk_net().predict(bundle.encode(feats))
    final = bundle.classifier.layers[-1]
    logits = z @ final.W.T + final.b
    probs = softmax(logits, temperature=temperature)
    pseudo = np.argmax(probs, axis=1)
    delta = probs.copy()
    delta[np.arange(delta.shape[0]), pseudo] -= 1.0
    emb = np.einsum("bc,bz->bcz", delta, z)
    return emb.reshape(feats.shape[0], -1)


def kmeanspp_select(vectors: np.ndarray, k: int, seed) -> np.ndarray:
    """k-means++ seeding; the chosen seeds are the selected batch.

    First pick is seeded-uniform; every next pick is drawn with probability
    proportional to squared Euclidean distance to the nearest pick so far.
    Returns positions into ``vectors`` in selection order.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if k > n:
        raise ValueError(f"cannot select {k} from {n} vectors")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((vectors - vectors[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0.0:
            # every remaining point duplicates a pick; fall back to uniform
            remaining = np.setdiff1d(np.arange(n), np.array(chosen))
            pick = int(rng.choice(remaining))
        else:
            u = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            pick = min(pick, n - 1)
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((vectors - vectors[pick]) ** 2, axis=1))
    return np.asarray(chosen, dtype=np.int64)


def select_badge(req: QueryRequest, temperature: float = 1.0) -> np.ndarray:
    """BADGE: k-means++ seeds over gradient embeddings, in selection order."""
    if req.k == 0:
        return np.empty(0, dtype=np.int64)
    emb = badge_embeddings(req.bundle, req.features, temperature=temperature)
    positions = kmeanspp_select(emb, req.k, req.seed)
    return req.unlabeled[positions]


def outlier_scores(bundle: ModelBundle, feats: np.ndarray, domain: int) -> np.ndarray:
    """Discriminator probability that a sample is original rather than part of
    the labeled mixture for its domain."""
    if bundle.discriminator is None:
        raise ValueError("outlier scores need a discriminator (composite-trained model)")
    z = bundle.encode(feats)
    logits = bundle.disc_logits(z, domain)
    return 1.0 / (1.0 + np.exp(-logits))


def grads_select(req: QueryRequest, temperature: float = 0.5) -> np.ndarray:
    """Gradient embeddings at the given temperature, each scaled by the
    sample's outlier score, then k-means++ selection."""
    if req.bundle.discriminator is None:
        raise ValueError("this strategy requires a discriminator-bearing model")
    if req.k == 0:
        return np.empty(0, dtype=np.int64)
    emb = badge_embeddings(req.bundle, req.features, temperature=temperature)
    scores = outlier_scores(req.bundle, req.features, req.domain)
    positions = kmeanspp_select(emb * scores[:, None], req.k, req.seed)
    return req.unlabeled[positions]


def select(strategy: str, req: QueryRequest, temperature: float = 0.5) -> np.ndarray:
    """Dispatch by strategy name: random | margin | badge | grads."""
    if strategy == "random":
        return select_random(req)
    if strategy == "margin":
        return select_margin(req)
    if strategy == "badge":
        return select_badge(req)
    if strategy == "grads":
        return grads_select(req, temperature=temperature)
    raise ValueError(f"unknown strategy {strategy!r}")
