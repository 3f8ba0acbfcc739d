"""Ratings ingestion, matrix factorization, market construction and the class probe."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import (
    DegenerateSplit,
    DimensionMismatch,
    DuplicateRating,
    EmptyDataset,
    IndexOutOfRange,
    OddN,
    ParseError,
    TrainingDiverged,
)
from .market import MarketInstance, make_market

log = logging.getLogger(__name__)

VALUATION_FLOOR = 0.01


# -- ratings -------------------------------------------------------------------


@dataclass
class RatingsDataset:
    """Rating triples with dense user/item indices in order of first appearance."""

    users: list
    items: list
    user_idx: np.ndarray
    item_idx: np.ndarray
    ratings: np.ndarray
    groups: Optional[np.ndarray] = None  # per user, aligned with ``users``

    def __post_init__(self):
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {it: k for k, it in enumerate(self.items)}

    def __len__(self):
        return len(self.ratings)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @classmethod
    def from_triples(cls, triples, groups: Optional[dict] = None) -> "RatingsDataset":
        users, items, seen = {}, {}, set()
        rows = []
        for user, item, rating in triples:
            user, item = str(user), str(item)
            if (user, item) in seen:
                raise DuplicateRating(user, item)
            seen.add((user, item))
            rating = float(rating)
            if not math.isfinite(rating):
                raise ValueError(f"non-finite rating for ({user}, {item})")
            rows.append((users.setdefault(user, len(users)), items.setdefault(item, len(items)), rating))
        arr = np.array(rows, dtype=float).reshape(-1, 3)
        g = None
        if groups is not None:
            g = np.array([int(groups[u]) for u in users])
        return cls(
            users=list(users),
            items=list(items),
            user_idx=arr[:, 0].astype(int),
            item_idx=arr[:, 1].astype(int),
            ratings=arr[:, 2],
            groups=g,
        )


def load_ratings(path) -> RatingsDataset:
    """Read a ``user,item,rating[,group]`` CSV with a header row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "empty file")
        header = [h.strip() for h in header]
        if header not in (["user", "item", "rating"], ["user", "item", "rating", "group"]):
            raise ParseError(1, f"expected header user,item,rating[,group], got {','.join(header)}")
        has_group = len(header) == 4
        triples, groups, seen = [], {}, set()
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(line, f"expected {len(header)} fields, got {len(row)}")
            user, item = row[0].strip(), row[1].strip()
            try:
                rating = float(row[2])
            except ValueError:
                raise ParseError(line, f"rating {row[2]!r} is not a number") from None
            if not math.isfinite(rating):
                raise ParseError(line, f"rating {row[2]!r} is not finite")
            if (user, item) in seen:
                raise DuplicateRating(user, item)
            seen.add((user, item))
            if has_group:
                try:
                    z = int(row[3])
                except ValueError:
                    raise ParseError(line, f"group {row[3]!r} is not 0 or 1") from None
                if z not in (0, 1):
                    raise ParseError(line, f"group {z} is not 0 or 1")
                if groups.setdefault(user, z) != z:
                    raise ParseError(line, f"user {user} has conflicting group labels")
            triples.append((user, item, rating))
    return RatingsDataset.from_triples(triples, groups if has_group else None)


def save_ratings(data: RatingsDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "rating"] + (["group"] if data.groups is not None else []))
        for u, j, r in zip(data.user_idx, data.item_idx, data.ratings):
            row = [data.users[u], data.items[j], repr(float(r))]
            if data.groups is not None:
                row.append(int(data.groups[u]))
            writer.writerow(row)


# -- factorization ---------------------------------------------------------------


@dataclass
class FactorizationModel:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    weight_decay: float = 0.0
    literal_sign: bool = False
    user_ids: Optional[list] = None
    item_ids: Optional[list] = None
    history: list = field(default_factory=list, repr=False)  # training MSE per epoch

    @property
    def d(self) -> int:
        return self.user_vectors.shape[1]

    def predict(self, users, items) -> np.ndarray:
        u = np.asarray(users, dtype=int)
        j = np.asarray(items, dtype=int)
        dot = np.einsum("...k,...k->...", self.user_vectors[u], self.item_vectors[j])
        if self.literal_sign:
            return self.user_bias[u] - self.item_bias[j] - dot
        return self.user_bias[u] + self.item_bias[j] + dot

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_users": len(self.user_bias),
            "n_items": len(self.item_bias),
            "user_vectors": self.user_vectors.tolist(),
            "item_vectors": self.item_vectors.tolist(),
            "user_bias": self.user_bias.tolist(),
            "item_bias": self.item_bias.tolist(),
            "weight_decay": self.weight_decay,
            "literal_sign": self.literal_sign,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FactorizationModel":
        d = int(doc["d"])
        return cls(
            user_vectors=np.array(doc["user_vectors"], dtype=float).reshape(-1, d),
            item_vectors=np.array(doc["item_vectors"], dtype=float).reshape(-1, d),
            user_bias=np.array(doc["user_bias"], dtype=float),
            item_bias=np.array(doc["item_bias"], dtype=float),
            weight_decay=float(doc.get("weight_decay", 0.0)),
            literal_sign=bool(doc.get("literal_sign", False)),
            user_ids=doc.get("user_ids"),
            item_ids=doc.get("item_ids"),
        )


def _mse(model, u, j, r):
    return float(np.mean((r - model.predict(u, j)) ** 2)) if len(r) else float("nan")


def train_factorization(
    data: RatingsDataset,
    d: int = 10,
    weight_decay: float = 1e-5,
    epochs: int = 50,
    learning_rate: float = 0.01,
    seed: int = 0,
    holdout_fraction: float = 0.1,
    batch_size: int = 256,
    literal_sign: bool = False,
):
    """Minibatch SGD on squared error with an L2 penalty on the factor vectors.

    The prediction is ``alpha_i + beta_j + u_i . m_j``; ``literal_sign``
    switches to ``alpha_i - beta_j - u_i . m_j``. Returns
    ``(model, train_mse, validation_mse)``.
    """
    if len(data) == 0:
        raise EmptyDataset("no ratings to train on")
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in (0, 1)")
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = int(round(holdout_fraction * len(data)))
    if len(data) > 1:
        n_val = min(max(n_val, 1), len(data) - 1)
    else:
        n_val = 0
    val, train = order[:n_val], order[n_val:]
    u_all, j_all, r_all = data.user_idx, data.item_idx, data.ratings

    model = FactorizationModel(
        user_vectors=rng.normal(0.0, 0.1, (data.n_users, d)),
        item_vectors=rng.normal(0.0, 0.1, (data.n_items, d)),
        user_bias=np.zeros(data.n_users),
        item_bias=np.zeros(data.n_items),
        weight_decay=weight_decay,
        literal_sign=literal_sign,
        user_ids=list(data.users),
        item_ids=list(data.items),
    )
    U, M, a, b = model.user_vectors, model.item_vectors, model.user_bias, model.item_bias
    sign = -1.0 if literal_sign else 1.0
    model.history.append(_mse(model, u_all[train], j_all[train], r_all[train]))
    for _ in range(epochs):
        rng.shuffle(train)
        for start in range(0, len(train), batch_size):
            batch = train[start : start + batch_size]
            u, j, r = u_all[batch], j_all[batch], r_all[batch]
            err = model.predict(u, j) - r  # d(0.5 err^2)/d pred
            g_u = sign * err[:, None] * M[j] + weight_decay * U[u]
            g_m = sign * err[:, None] * U[u] + weight_decay * M[j]
            np.add.at(a, u, -learning_rate * err)
            np.add.at(b, j, -learning_rate * sign * err)
            np.add.at(U, u, -learning_rate * g_u)
            np.add.at(M, j, -learning_rate * g_m)
        mse = _mse(model, u_all[train], j_all[train], r_all[train])
        if not math.isfinite(mse) or not np.all(np.isfinite(U)) or not np.all(np.isfinite(M)):
            raise TrainingDiverged(f"training diverged after {len(model.history)} epochs")
        model.history.append(mse)
    train_mse = model.history[-1]
    val_mse = _mse(model, u_all[val], j_all[val], r_all[val])
    return model, train_mse, val_mse


class MatrixFactorization(BaseEstimator):
    """Estimator wrapper: ``fit(dataset)``, ``predict((users, items))``."""

    def __init__(self, d=10, weight_decay=1e-5, epochs=50, learning_rate=0.01, seed=0,
                 holdout_fraction=0.1, batch_size=256, literal_sign=False):
        self.d = d
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.holdout_fraction = holdout_fraction
        self.batch_size = batch_size
        self.literal_sign = literal_sign

    def fit(self, data: RatingsDataset, y=None):
        self.model_, self.train_mse_, self.validation_mse_ = train_factorization(
            data, self.d, self.weight_decay, self.epochs, self.learning_rate, self.seed,
            self.holdout_fraction, self.batch_size, self.literal_sign,
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        users, items = X
        return self.model_.predict(users, items)


def complete_valuations(
    model: FactorizationModel,
    users: Optional[Sequence[int]] = None,
    items: Optional[Sequence[int]] = None,
    floor: float = VALUATION_FLOOR,
) -> np.ndarray:
    """Dense predicted ratings for ``users x items``, clamped below at ``floor``."""
    n_u, n_i = len(model.user_bias), len(model.item_bias)
    users = np.arange(n_u) if users is None else np.asarray(users, dtype=int)
    items = np.arange(n_i) if items is None else np.asarray(items, dtype=int)
    for name, idx, size in (("user", users, n_u), ("item", items, n_i)):
        bad = idx[(idx < 0) | (idx >= size)]
        if bad.size:
            raise IndexOutOfRange(f"{name} index {int(bad[0])} outside [0, {size})")
    pred = model.predict(users[:, None], items[None, :])
    return np.maximum(pred, floor)


def select_top(data: RatingsDataset, top_users: int, top_items: int):
    """Indices of the most-rated users and items (ties broken by index)."""
    user_counts = np.bincount(data.user_idx, minlength=data.n_users)
    item_counts = np.bincount(data.item_idx, minlength=data.n_items)
    if top_users > data.n_users:
        log.warning("top_users=%d exceeds %d users; clamping", top_users, data.n_users)
    if top_items > data.n_items:
        log.warning("top_items=%d exceeds %d items; clamping", top_items, data.n_items)
    users = np.sort(np.argsort(-user_counts, kind="stable")[:top_users])
    items = np.sort(np.argsort(-item_counts, kind="stable")[:top_items])
    return users, items


# -- synthetic markets -------------------------------------------------------------


def make_biased_market(base: MarketInstance, group_scale: float) -> MarketInstance:
    """Copy of ``base`` with every class-1 row multiplied by ``group_scale``."""
    if not 0 < group_scale <= 1:
        raise ValueError("group_scale must be in (0, 1]")
    v = base.valuations.copy()
    v[base.groups == 1] *= group_scale
    return base.replace(valuations=v, max_valuation=base.max_valuation)


def synth_market(
    n: int,
    m: int,
    group_shift: float = 0.0,
    seed: int = 0,
    max_valuation: float = 1.0,
    block: Optional[Sequence[int]] = None,
) -> MarketInstance:
    """Balanced random market whose class-1 rows lean toward an item block.

    Class-1 rows start as copies of class-0 rows, so ``group_shift=0`` gives
    an exactly class-symmetric market. A shift ``t`` in [0, 1] moves class-1
    values on ``block`` (default: the first half of the items) toward
    ``max_valuation`` and all other values toward the floor.
    """
    if n % 2:
        raise OddN(f"n must be even for balanced classes, got {n}")
    if m < 2:
        raise ValueError("m must be >= 2")
    if not 0 <= group_shift <= 1:
        raise ValueError("group_shift must be in [0, 1]")
    rng = np.random.default_rng(seed)
    half = n // 2
    base = VALUATION_FLOOR + (max_valuation - VALUATION_FLOOR) * (1.0 - rng.random((half, m)))
    twin = base.copy()
    on_block = np.zeros(m, dtype=bool)
    on_block[np.arange(m // 2) if block is None else np.asarray(block, dtype=int)] = True
    twin[:, on_block] += group_shift * (max_valuation - twin[:, on_block])
    twin[:, ~on_block] -= group_shift * (twin[:, ~on_block] - VALUATION_FLOOR)
    v = np.vstack([base, twin])
    groups = np.repeat([0, 1], half)
    perm = rng.permutation(n)
    return make_market(v[perm], groups=groups[perm], max_valuation=max_valuation)


# -- probe -----------------------------------------------------------------------------


class LogisticProbe(ClassifierMixin, BaseEstimator):
    """L2-regularized logistic regression fitted by full-batch gradient descent.

    Features are standardized with training statistics; ``decision_function``
    applies the same standardization, so it can score any vector of the
    training dimension.
    """

    def __init__(self, l2=1e-2, learning_rate=0.5, steps=500):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.steps = steps

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise DegenerateSplit("probe needs both classes in the training data")
        t = (y == self.classes_[1]).astype(float)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Z = (X - self.mean_) / self.scale_
        w, c = np.zeros(Z.shape[1]), 0.0
        for _ in range(self.steps):
            p = 1.0 / (1.0 + np.exp(-(Z @ w + c)))
            g = p - t
            w -= self.learning_rate * (Z.T @ g / len(t) + self.l2 * w)
            c -= self.learning_rate * g.mean()
        self.coef_ = w
        self.intercept_ = c
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.coef_.size:
            raise DimensionMismatch(f"probe expects {self.coef_.size} features, got {X.shape[1]}")
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


@dataclass
class ProbeReport:
    auc: float
    weights: np.ndarray
    intercept: float
    split_seed: int
    probe: Optional[LogisticProbe] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "weights": np.asarray(self.weights).tolist(),
            "intercept": float(self.intercept),
            "split_seed": self.split_seed,
        }


def _paired_split(y, pairs, holdout_fraction, seed):
    """Train/test row indices that never separate the two members of a pair."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_test = max(1, int(round(holdout_fraction * len(pairs))))
    test = pairs[order[:n_test]].ravel()
    train = pairs[order[n_test:]].ravel()
    rest = np.setdiff1d(np.arange(len(y)), pairs.ravel())
    if rest.size:
        rest = rng.permutation(rest)
        k = int(round(holdout_fraction * rest.size))
        test, train = np.concatenate([test, rest[:k]]), np.concatenate([train, rest[k:]])
    return np.sort(train), np.sort(test)


def probe_auc(
    features,
    labels,
    split_seed: int = 0,
    holdout_fraction: float = 0.3,
    pairs=None,
    **probe_params,
) -> ProbeReport:
    """Held-out AUC of a logistic probe predicting the class from ``features``.

    With ``pairs`` (e.g. a debiasing matching) both members of a pair land in
    the same split; otherwise the split is stratified by label. Pairs of
    identical rows split across train and test let the probe memorize one
    label and score its twin as the other class, pushing AUC far below 0.5.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    if len(np.unique(y)) != 2:
        raise DegenerateSplit("both classes must be present")
    if pairs is not None:
        train, test = _paired_split(y, pairs, holdout_fraction, split_seed)
        X_tr, X_te, y_tr, y_te = X[train], X[test], y[train], y[test]
    else:
        try:
            X_tr, X_te, y_tr, y_te = train_test_split(
                X, y, test_size=holdout_fraction, random_state=split_seed, stratify=y
            )
        except ValueError as exc:
            raise DegenerateSplit(str(exc)) from None
    if len(np.unique(y_tr)) != 2 or len(np.unique(y_te)) != 2:
        raise DegenerateSplit("each split needs both classes")
    probe = LogisticProbe(**probe_params).fit(X_tr, y_tr)
    auc = float(roc_auc_score(y_te, probe.decision_function(X_te)))
    return ProbeReport(auc=auc, weights=probe.coef_.copy(), intercept=float(probe.intercept_),
                       split_seed=split_seed, probe=probe)


def item_stereotype_scores(model: FactorizationModel, probe) -> list:
    """Items ranked by the probe's score of their factor vectors, highest first.

    Returns ``(item_id, score, label)`` tuples; the top half is labeled
    ``"class 1"`` and the bottom half ``"class 0"``. Ties keep index order.
    """
    scorer = probe.probe if isinstance(probe, ProbeReport) else probe
    if isinstance(probe, ProbeReport) and scorer is None:
        w = np.asarray(probe.weights, dtype=float)
        if w.size != model.d:
            raise DimensionMismatch(f"probe has {w.size} weights, model has d={model.d}")
        scores = model.item_vectors @ w + probe.intercept
    else:
        scores = scorer.decision_function(model.item_vectors)
    order = np.argsort(-scores, kind="stable")
    ids = model.item_ids or [str(k) for k in range(len(scores))]
    half = len(order) / 2
    return [
        (ids[k], float(scores[k]), "class 1" if rank < half else "class 0")
        for rank, k in enumerate(order)
    ]
