"""scikit-learn style wrapper around the training loop and network."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .datamodel import RankingSample
from .evaluation import auc
from .model import encode_samples, map_batches
from .training import TrainConfig, fit

__all__ = ["HIFNClassifier", "check_samples", "check_binary_labels", "infer_vocab_sizes"]


def check_samples(X) -> list[RankingSample]:
    """Accept ranking samples or their JSON dicts; reject anything else."""
    if isinstance(X, (RankingSample, dict)):
        raise TypeError("expected a sequence of samples, got a single sample")
    try:
        items = list(X)
    except TypeError as exc:
        raise TypeError("X must be a sequence of RankingSample objects or dicts") from exc
    if not items:
        raise ValueError("X is empty")
    out = []
    for i, s in enumerate(items):
        if isinstance(s, dict):
            s = RankingSample.from_json(s)
        if not isinstance(s, RankingSample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, not a RankingSample")
        if not s.query_tokens:
            raise ValueError(f"X[{i}] has no query tokens")
        out.append(s)
    return out


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be a 1-d array of length {n}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(int)


def infer_vocab_sizes(samples: Sequence[RankingSample]) -> dict[str, int]:
    """Smallest table sizes covering every id in ``samples`` (row 0 is padding)."""
    items, cats, toks, ctx = [0], [0], [0], [0]
    for s in samples:
        items.append(s.target_item)
        cats.append(s.target_category)
        toks.extend(s.query_tokens)
        ctx.append(s.context_id)
        for e in (*s.long_seq, *s.short_seq):
            items.append(e.item_id)
            cats.append(e.category_id)
        for w in s.proxy_windows:
            for it, ca, _ in w:
                items.append(it)
                cats.append(ca)
    return {
        "n_items": max(items) + 1,
        "n_categories": max(cats) + 1,
        "n_tokens": max(toks) + 1,
        "n_contexts": max(max(ctx) + 1, 25),
    }


class HIFNClassifier(BaseEstimator, ClassifierMixin):
    """Click-probability classifier over :class:`RankingSample` inputs.

    ``transform`` returns the fused user interest fed to the prediction
    layer; ``score`` is AUC. ``vocab_sizes`` fixes the embedding tables (pass
    ``Vocabulary.sizes()``); otherwise they are sized from the training data.
    """

    def __init__(
        self,
        epochs=5,
        batch_size=512,
        learning_rate=0.001,
        lam=0.1,
        beta=0.55,
        short_len=10,
        long_len=50,
        embed_dim=16,
        hidden_dim=16,
        attn_dim=32,
        encoders=("tdie", "qdie", "cdie"),
        gate="softmax",
        fusion="adaptive",
        fixed_alpha=0.5,
        proxy="updating",
        patience=3,
        vocab_sizes=None,
        random_state=0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lam = lam
        self.beta = beta
        self.short_len = short_len
        self.long_len = long_len
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.attn_dim = attn_dim
        self.encoders = encoders
        self.gate = gate
        self.fusion = fusion
        self.fixed_alpha = fixed_alpha
        self.proxy = proxy
        self.patience = patience
        self.vocab_sizes = vocab_sizes
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lam=self.lam,
            beta=self.beta,
            short_len=self.short_len,
            long_len=self.long_len,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            attn_dim=self.attn_dim,
            encoders=tuple(self.encoders),
            gate=self.gate,
            fusion=self.fusion,
            fixed_alpha=self.fixed_alpha,
            proxy=self.proxy,
            patience=self.patience,
            rng_seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, y=None, eval_set=None):
        """Train on samples ``X``; labels come from ``y`` or the samples themselves."""
        samples = check_samples(X)
        if y is not None:
            labels = check_binary_labels(y, len(samples))
            samples = [s.with_target(s.target_item, int(v)) for s, v in zip(samples, labels)]
        cfg = self._train_config()
        sizes = dict(self.vocab_sizes) if self.vocab_sizes else infer_vocab_sizes(samples)
        model_cfg = cfg.model_config(sizes)
        train = encode_samples(samples, model_cfg)
        valid = None
        if eval_set is not None:
            valid = encode_samples(check_samples(eval_set), model_cfg)
        result = fit(cfg, model_cfg, train, valid)
        self.network_ = result.net
        self.history_ = result.history
        self.classes_ = np.array([0, 1])
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("HIFNClassifier is not fitted yet; call fit first")

    def _forward(self, X, fn=None) -> dict[str, np.ndarray]:
        self._check_fitted()
        arrays = encode_samples(check_samples(X), self.network_.cfg)
        return map_batches(self.network_, arrays, fn=fn)

    def decision_function(self, X) -> np.ndarray:
        return self._forward(X, lambda b, o: {"logit": o.logit.data})["logit"]

    def predict_proba(self, X) -> np.ndarray:
        p = self._forward(X)["y_hat"]
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def transform(self, X) -> np.ndarray:
        """Fused interest vectors, one row per sample."""
        return self._forward(X, lambda b, o: {"u": o.u.data})["u"]

    def fusion_weights(self, X) -> np.ndarray:
        """Short-term share of the fused interest per sample (NaN for concat fusion)."""
        return self._forward(X)["alpha_fuse"]

    def score(self, X, y=None, sample_weight=None) -> float:
        samples = check_samples(X)
        labels = np.array([s.label for s in samples]) if y is None else check_binary_labels(y, len(samples))
        return auc(self.predict_proba(samples)[:, 1], labels)
