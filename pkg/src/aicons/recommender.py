"""Embedding-based winner recommender.

A four-layer feedforward network (input, two tanh hidden layers, linear
embedding output) maps a node's monitoring features to a vector; nodes are
ranked by cosine similarity to a reference embedding built from recent
winners. Training minimizes a margin-based ranking loss with plain SGD,
pushing winner-winner similarity up and winner-nonwinner similarity down.
All arithmetic is float64 numpy; every random draw comes from a seeded
Generator so training is bitwise reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .domain import LabeledRecord, MonitoringSample

N_FEATURES = 5


class RecommenderError(ValueError):
    """Bad input to the recommender (shape mismatch, degenerate data, ...)."""


class DegenerateDataError(RecommenderError):
    """Training data without at least one winner and one non-winner."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters of the recommender and its training loop."""

    input_dim: int = N_FEATURES
    hidden_dims: tuple[int, int] = (16, 16)
    embed_dim: int = 8
    margin: float = 0.1
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int | None = None
    negatives_per_anchor: int = 4
    positives_per_anchor: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.embed_dim < 1:
            raise RecommenderError("input_dim and embed_dim must be >= 1")
        if len(self.hidden_dims) != 2 or any(h < 1 for h in self.hidden_dims):
            raise RecommenderError("exactly two hidden layers, each >= 1 wide")
        if self.margin < 0:
            raise RecommenderError("margin must be >= 0")
        if self.learning_rate <= 0:
            raise RecommenderError("learning_rate must be > 0")
        if self.epochs < 0:
            raise RecommenderError("epochs must be >= 0")
        if self.negatives_per_anchor < 1 or self.positives_per_anchor < 1:
            raise RecommenderError("need >= 1 positive and negative per anchor")

    def layer_dims(self) -> tuple[int, int, int, int]:
        return (self.input_dim, self.hidden_dims[0], self.hidden_dims[1],
                self.embed_dim)


@dataclass(frozen=True)
class ModelParams:
    """Weights of the four-layer network plus feature normalization constants.

    Three weight matrices and bias vectors (input->h1, h1->h2, h2->embed).
    feature_min/feature_max are the min-max constants fitted on the training
    trace, carried here so inference normalizes exactly like training did.
    Arrays are frozen read-only on construction.
    """

    weights: tuple[np.ndarray, np.ndarray, np.ndarray]
    biases: tuple[np.ndarray, np.ndarray, np.ndarray]
    feature_min: np.ndarray
    feature_max: np.ndarray

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise RecommenderError("expected exactly 3 weight/bias layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise RecommenderError(f"layer {i}: inconsistent shapes")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise RecommenderError(f"layer {i}: input width mismatch")
        if self.feature_min.shape != (self.input_dim,) or \
                self.feature_max.shape != (self.input_dim,):
            raise RecommenderError("normalization constants mismatch input_dim")
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise RecommenderError("non-finite parameter entries")
            arr.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[2].shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        """All parameter arrays in canonical order."""
        return (*self.weights, *self.biases, self.feature_min, self.feature_max)

    def to_bytes(self) -> bytes:
        """Flat little-endian float64 stream prefixed by a shape header."""
        arrays = self.arrays()
        header = [struct.pack("<I", len(arrays))]
        for arr in arrays:
            header.append(struct.pack("<I", arr.ndim))
            header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in arrays)
        return b"".join(header) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        offset = 0
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            shapes.append(shape)
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
            offset += 8 * n
            arrays.append(arr.reshape(shape).astype(np.float64))
        if len(arrays) != 8:
            raise RecommenderError(f"expected 8 arrays, found {len(arrays)}")
        return cls(weights=tuple(arrays[0:3]), biases=tuple(arrays[3:6]),
                   feature_min=arrays[6], feature_max=arrays[7])


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Uniform [-0.1, 0.1] weights and biases; identity normalization."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    dims = cfg.layer_dims()
    weights = tuple(rng.uniform(-0.1, 0.1, size=(dims[i], dims[i + 1]))
                    for i in range(3))
    biases = tuple(rng.uniform(-0.1, 0.1, size=dims[i + 1]) for i in range(3))
    return ModelParams(weights=weights, biases=biases,
                       feature_min=np.zeros(cfg.input_dim),
                       feature_max=np.ones(cfg.input_dim))


def features_matrix(samples: list[MonitoringSample]) -> np.ndarray:
    return np.array([s.features() for s in samples], dtype=np.float64)


def normalize_features(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Min-max normalization with the constants carried in params.

    Constant features (zero span) map to 0; values outside the fitted range
    deliberately fall outside [0, 1] so ordering information survives.
    """
    span = params.feature_max - params.feature_min
    safe = np.where(span == 0.0, 1.0, span)
    out = (x - params.feature_min) / safe
    return np.where(span == 0.0, 0.0, out)


def forward_pass(params: ModelParams, x_norm: np.ndarray):
    """Forward the (already normalized) batch; returns embeddings and cache."""
    w1, w2, w3 = params.weights
    b1, b2, b3 = params.biases
    a1 = np.tanh(x_norm @ w1 + b1)
    a2 = np.tanh(a1 @ w2 + b2)
    z = a2 @ w3 + b3
    return z, (x_norm, a1, a2)


def backward_pass(params: ModelParams, cache, d_z: np.ndarray):
    """Backpropagate d(loss)/d(embeddings); returns (weight, bias) grads."""
    w1, w2, w3 = params.weights
    x_norm, a1, a2 = cache
    d_w3 = a2.T @ d_z
    d_b3 = d_z.sum(axis=0)
    d_a2 = d_z @ w3.T
    d_pre2 = d_a2 * (1.0 - a2 * a2)
    d_w2 = a1.T @ d_pre2
    d_b2 = d_pre2.sum(axis=0)
    d_a1 = d_pre2 @ w2.T
    d_pre1 = d_a1 * (1.0 - a1 * a1)
    d_w1 = x_norm.T @ d_pre1
    d_b1 = d_pre1.sum(axis=0)
    return (d_w1, d_w2, d_w3), (d_b1, d_b2, d_b3)


def embed(features, params: ModelParams) -> np.ndarray:
    """Embed one feature vector (or a batch of them) into the ranking space."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise RecommenderError(
            f"feature dim {x.shape[1]} != input_dim {params.input_dim}")
    z, _ = forward_pass(params, normalize_features(x, params))
    return z[0] if single else z


def embed_samples(samples: list[MonitoringSample], params: ModelParams) -> np.ndarray:
    return embed(features_matrix(samples), params)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two embeddings, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise RecommenderError("cosine similarity undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def margin_loss(anchor, positives, negatives, margin: float) -> float:
    """Single-anchor hinge: max(0, mean neg sim + margin - mean pos sim)."""
    if len(positives) == 0 or len(negatives) == 0:
        raise RecommenderError("margin loss needs non-empty positives and negatives")
    pos = float(np.mean([cosine_similarity(anchor, p) for p in positives]))
    neg = float(np.mean([cosine_similarity(anchor, n) for n in negatives]))
    return max(0.0, neg + margin - pos)


def margin_loss_and_grads(params: ModelParams, x_raw: np.ndarray,
                          anchor_idx: np.ndarray, pos_idx: np.ndarray,
                          neg_idx: np.ndarray, margin: float):
    """Batch ranking loss and its analytic parameter gradients.

    x_raw is the raw feature matrix for every record referenced by the index
    arrays; anchor_idx has shape (A,), pos_idx (A, h), neg_idx (A, m). The
    loss is the mean over anchors of the per-anchor hinge. Gradients flow to
    anchors, positives and negatives alike.
    """
    x_norm = normalize_features(np.asarray(x_raw, dtype=np.float64), params)
    z, cache = forward_pass(params, x_norm)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise RecommenderError("zero-norm embedding in training batch")
    unit = z / norms[:, None]

    n_anchors = len(anchor_idx)
    d_z = np.zeros_like(z)
    total = 0.0
    for a_pos in range(n_anchors):
        a = int(anchor_idx[a_pos])
        p = pos_idx[a_pos]
        m = neg_idx[a_pos]
        cos_p = unit[p] @ unit[a]
        cos_m = unit[m] @ unit[a]
        hinge = float(np.mean(cos_m)) + margin - float(np.mean(cos_p))
        if hinge <= 0.0:
            continue
        total += hinge
        for idx, sign, count in ((p, -1.0, len(p)), (m, 1.0, len(m))):
            w = sign / (n_anchors * count)
            cos = unit[idx] @ unit[a]
            # d cos(u, v) / du = (v_hat - cos * u_hat) / |u|, same for v.
            d_anchor = w * (unit[idx] - cos[:, None] * unit[a]) / norms[a]
            d_z[a] += d_anchor.sum(axis=0)
            d_partner = w * (unit[a][None, :] - cos[:, None] * unit[idx]) \
                / norms[idx, None]
            np.add.at(d_z, idx, d_partner)
    loss = total / n_anchors
    grads_w, grads_b = backward_pass(params, cache, d_z)
    return loss, grads_w, grads_b


def _fit_normalization(x_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x_raw.min(axis=0), x_raw.max(axis=0)


def train_local(data: list[LabeledRecord], init: ModelParams,
                cfg: ModelConfig) -> ModelParams:
    """Train the recommender on labeled history with plain full-batch SGD.

    Anchors are winner records; positives are sampled from the other winner
    records (the anchor itself when it is the only winner) and negatives
    from non-winners, resampled every epoch from cfg.seed. epochs=0 returns
    init untouched.
    """
    if cfg.epochs == 0:
        return init
    winners = [i for i, r in enumerate(data) if r.is_winner]
    losers = [i for i, r in enumerate(data) if not r.is_winner]
    if not winners or not losers:
        raise DegenerateDataError(
            "training needs at least one winner and one non-winner")

    x_raw = features_matrix([r.sample for r in data])
    fmin, fmax = _fit_normalization(x_raw)
    params = ModelParams(weights=init.weights, biases=init.biases,
                         feature_min=fmin, feature_max=fmax)

    rng = np.random.default_rng(cfg.seed)
    winners_arr = np.array(winners)
    losers_arr = np.array(losers)
    h = cfg.positives_per_anchor
    m = cfg.negatives_per_anchor
    batch = cfg.batch_size or len(winners)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(winners_arr))
        for start in range(0, len(order), batch):
            anchors = winners_arr[order[start:start + batch]]
            pos = np.empty((len(anchors), h), dtype=np.int64)
            for row, a in enumerate(anchors):
                others = winners_arr[winners_arr != a]
                pool = others if len(others) else winners_arr
                pos[row] = rng.choice(pool, size=h, replace=True)
            neg = rng.choice(losers_arr, size=(len(anchors), m), replace=True)
            _, grads_w, grads_b = margin_loss_and_grads(
                params, x_raw, anchors, pos, neg, cfg.margin)
            new_w = tuple(w - cfg.learning_rate * g
                          for w, g in zip(params.weights, grads_w))
            new_b = tuple(b - cfg.learning_rate * g
                          for b, g in zip(params.biases, grads_b))
            params = ModelParams(weights=new_w, biases=new_b,
                                 feature_min=fmin, feature_max=fmax)
    return params


def epoch_loss(data: list[LabeledRecord], params: ModelParams,
               cfg: ModelConfig, seed: int = 0) -> float:
    """Full-batch ranking loss of params on data (fixed resample seed)."""
    winners = np.array([i for i, r in enumerate(data) if r.is_winner])
    losers = np.array([i for i, r in enumerate(data) if not r.is_winner])
    if not len(winners) or not len(losers):
        raise DegenerateDataError("loss needs winners and non-winners")
    rng = np.random.default_rng(seed)
    x_raw = features_matrix([r.sample for r in data])
    pos = np.empty((len(winners), cfg.positives_per_anchor), dtype=np.int64)
    for row, a in enumerate(winners):
        others = winners[winners != a]
        pool = others if len(others) else winners
        pos[row] = rng.choice(pool, size=cfg.positives_per_anchor, replace=True)
    neg = rng.choice(losers, size=(len(winners), cfg.negatives_per_anchor),
                     replace=True)
    loss, _, _ = margin_loss_and_grads(params, x_raw, winners, pos, neg,
                                       cfg.margin)
    return loss


def fedavg(models: list[ModelParams]) -> ModelParams:
    """Elementwise arithmetic mean of every parameter array."""
    if not models:
        raise RecommenderError("fedavg of an empty model list")
    first = models[0]
    for other in models[1:]:
        for a, b in zip(first.arrays(), other.arrays()):
            if a.shape != b.shape:
                raise RecommenderError("fedavg shape mismatch")
    k = float(len(models))
    mean = [sum(m.arrays()[i] for m in models) / k for i in range(8)]
    return ModelParams(weights=(mean[0], mean[1], mean[2]),
                       biases=(mean[3], mean[4], mean[5]),
                       feature_min=mean[6], feature_max=mean[7])


def reference_embedding(params: ModelParams,
                        winner_samples: list[MonitoringSample]) -> np.ndarray:
    """Mean embedding of recent historical winners (the expected winner)."""
    if not winner_samples:
        raise RecommenderError("reference embedding needs at least one winner")
    return embed_samples(winner_samples, params).mean(axis=0)


def rank_nodes(params: ModelParams, current: list[MonitoringSample],
               reference: np.ndarray) -> list[tuple[int, float]]:
    """Nodes ordered by cosine similarity to the reference embedding.

    Descending score; exact ties break to the lowest node_id. The first
    entry is the recommended winner.
    """
    if not current:
        raise RecommenderError("rank_nodes on an empty node set")
    z = embed_samples(current, params)
    scores = [cosine_similarity(z[i], reference) for i in range(len(current))]
    order = sorted(range(len(current)),
                   key=lambda i: (-scores[i], current[i].node_id))
    return [(current[i].node_id, scores[i]) for i in order]


class AccuracyEvaluator:
    """Precompiled top-1 winner accuracy over a fixed set of labeled rounds.

    Subset-utility evaluation calls this thousands of times with different
    aggregated models, so the feature matrices are built once here; the
    normalized input is cached per distinct normalization constant pair.
    """

    def __init__(self, rounds: list[list[LabeledRecord]],
                 reference_samples: list[MonitoringSample] | None = None):
        if not rounds:
            raise RecommenderError("accuracy needs a non-empty test set")
        for k, rnd in enumerate(rounds):
            if sum(1 for r in rnd if r.is_winner) != 1:
                raise RecommenderError(f"test round {k} must have exactly one winner")
        self.n_rounds = len(rounds)
        flat = [rec for rnd in rounds for rec in rnd]
        self._x = features_matrix([r.sample for r in flat])
        self._node_ids = np.array([r.sample.node_id for r in flat])
        bounds = np.cumsum([0] + [len(rnd) for rnd in rounds])
        self._slices = [(bounds[i], bounds[i + 1]) for i in range(len(rounds))]
        self._winner_ids = np.array(
            [next(r.sample.node_id for r in rnd if r.is_winner) for rnd in rounds])
        if reference_samples is None:
            reference_samples = [next(r.sample for r in rnd if r.is_winner)
                                 for rnd in rounds]
        self._ref = features_matrix(reference_samples)
        self._norm_cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def normalized_inputs(self, params: ModelParams):
        """(test matrix, reference matrix) normalized with params' constants."""
        key = params.feature_min.tobytes() + params.feature_max.tobytes()
        hit = self._norm_cache.get(key)
        if hit is None:
            hit = (normalize_features(self._x, params),
                   normalize_features(self._ref, params))
            if len(self._norm_cache) > 64:
                self._norm_cache.clear()
            self._norm_cache[key] = hit
        return hit

    def evaluate_arrays(self, weights, biases, x_norm: np.ndarray,
                        ref_norm: np.ndarray) -> float:
        """Core scoring on raw weight arrays and pre-normalized inputs."""
        w1, w2, w3 = weights
        b1, b2, b3 = biases
        combined = np.vstack((x_norm, ref_norm))
        a1 = np.tanh(combined @ w1 + b1)
        z = np.tanh(a1 @ w2 + b2) @ w3 + b3
        split = x_norm.shape[0]
        reference = z[split:].mean(axis=0)
        z = z[:split]
        ref_len = np.linalg.norm(reference)
        norms = np.linalg.norm(z, axis=1)
        if ref_len == 0.0 or np.any(norms == 0.0):
            raise RecommenderError("zero-norm embedding in accuracy evaluation")
        sims = (z @ reference) / (norms * ref_len)
        hits = 0
        for k, (lo, hi) in enumerate(self._slices):
            seg = slice(lo, hi)
            best = np.lexsort((self._node_ids[seg], -sims[seg]))[0]
            if self._node_ids[lo + best] == self._winner_ids[k]:
                hits += 1
        return hits / self.n_rounds

    def evaluate(self, params: ModelParams) -> float:
        """Fraction of rounds whose top-1 ranked node is the labeled winner."""
        x_norm, ref_norm = self.normalized_inputs(params)
        return self.evaluate_arrays(params.weights, params.biases,
                                    x_norm, ref_norm)

    def evaluate_many(self, weights, biases, x_norm: np.ndarray,
                      ref_norm: np.ndarray) -> np.ndarray:
        """Score a stack of models in one pass.

        weights/biases hold per-layer tensors with a leading model axis,
        e.g. (B, in, h1); returns the B accuracies. Equivalent to calling
        evaluate_arrays per model, just batched through the matmuls.
        """
        w1, w2, w3 = weights
        b1, b2, b3 = biases
        combined = np.vstack((x_norm, ref_norm))
        a1 = np.tanh(combined @ w1 + b1[:, None, :])
        a2 = np.tanh(a1 @ w2 + b2[:, None, :])
        z = a2 @ w3 + b3[:, None, :]
        split = x_norm.shape[0]
        reference = z[:, split:, :].mean(axis=1)
        z = z[:, :split, :]
        ref_len = np.linalg.norm(reference, axis=1)
        norms = np.linalg.norm(z, axis=2)
        if np.any(ref_len == 0.0) or np.any(norms == 0.0):
            raise RecommenderError("zero-norm embedding in accuracy evaluation")
        sims = np.einsum("bte,be->bt", z, reference) / (norms * ref_len[:, None])
        hits = np.zeros(len(ref_len), dtype=np.int64)
        big = np.iinfo(np.int64).max
        for k, (lo, hi) in enumerate(self._slices):
            seg = sims[:, lo:hi]
            ids = self._node_ids[lo:hi]
            # top-1 with ties to the lowest node id, batched
            candidates = seg == seg.max(axis=1, keepdims=True)
            chosen = np.where(candidates, ids[None, :], big).min(axis=1)
            hits += chosen == self._winner_ids[k]
        return hits / self.n_rounds


def accuracy(params: ModelParams, test: list[list[LabeledRecord]],
             reference_samples: list[MonitoringSample] | None = None) -> float:
    """Top-1 winner accuracy of params over labeled test rounds.

    The reference embedding is the mean embedding of reference_samples
    (historical winners); when omitted, the winners of the test rounds
    themselves are used.
    """
    return AccuracyEvaluator(test, reference_samples).evaluate(params)
