"""Long/short interest proxies and the four-way BPR contrastive loss.

Proxies act as labels: the embedding means they are built from are treated
as constants, while the proxy network that maps those means into the
interest space is trained by the contrastive loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkernel as nk
from .model import Batch, HIFNNetwork
from .numkernel import Tensor

__all__ = [
    "ProxyState",
    "update_long_proxy",
    "ema_weights",
    "short_proxy",
    "proxy_inputs",
    "proxy_valid",
    "long_proxy",
    "bpr",
    "contrastive_terms",
    "contrastive_loss",
    "similarity",
]


@dataclass
class ProxyState:
    p_long: np.ndarray
    sessions_consumed: int = 0
    initialized: bool = False

    @classmethod
    def empty(cls, dim: int) -> "ProxyState":
        return cls(np.zeros(dim), 0, False)


def update_long_proxy(
    state: ProxyState,
    window: np.ndarray,
    beta: float,
    proxy_net: Callable[[np.ndarray], np.ndarray],
    window_len: int,
) -> ProxyState:
    """Fold one completed window of event embeddings into the long proxy.

    The first window initializes the proxy outright; later windows move it
    by ``beta`` towards ``proxy_net(mean(window))``. Partial windows leave
    the state unchanged.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[0] != window_len:
        return state
    target = np.asarray(proxy_net(window.mean(axis=0)), dtype=float)
    if not state.initialized:
        return ProxyState(target, state.sessions_consumed + 1, True)
    return ProxyState((1.0 - beta) * state.p_long + beta * target, state.sessions_consumed + 1, True)


def ema_weights(n_windows: int, beta: float) -> np.ndarray:
    """Weight of each window's network output in the streamed long proxy.

    Oldest first; sums to one whenever ``n_windows >= 1``.
    """
    if n_windows <= 0:
        return np.zeros(0)
    k = np.arange(n_windows)
    w = beta * (1.0 - beta) ** (n_windows - 1 - k)
    w[0] = (1.0 - beta) ** (n_windows - 1)
    return w


def _proxy_net(net: HIFNNetwork, x: Tensor) -> Tensor:
    return net.mlp("proxy", x, len(net.cfg.proxy_layers))


def _event_means(net: HIFNNetwork, items, cats, types, mask) -> np.ndarray:
    p = net.params
    emb = np.concatenate(
        [p["emb.item"].data[items], p["emb.category"].data[cats], p["emb.behavior"].data[types]], axis=-1
    )
    m = mask.astype(float)[..., None]
    return (emb * m).sum(axis=-2) / np.maximum(m.sum(axis=-2), 1.0)


def proxy_inputs(net: HIFNNetwork, batch: Batch) -> dict[str, np.ndarray]:
    """The constant embedding means the proxies are built from.

    ``short``: (B, D) mean of the real short events; ``long``: (B, K, D)
    window means for the updating proxy, or (B, D) long-window means for
    ``proxy="whole_mean"``.
    """
    a = batch.arrays
    real = batch.s_mask & ~batch.no_history[:, None]
    out = {"short": _event_means(net, a.s_item, a.s_cat, a.s_type, real)}
    if net.cfg.proxy == "whole_mean":
        out["long"] = _event_means(net, a.l_item, a.l_cat, a.l_type, batch.l_mask)
    else:
        out["long"] = _event_means(net, a.w_item, a.w_cat, a.w_type, a.w_item > 0)
    return out


def short_proxy(net: HIFNNetwork, batch: Batch, inputs: dict | None = None) -> Tensor:
    """Proxy network applied to the (constant) mean of the real short events."""
    inputs = inputs or proxy_inputs(net, batch)
    return _proxy_net(net, Tensor(inputs["short"]))


def long_proxy(net: HIFNNetwork, batch: Batch, beta: float, inputs: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """Long-term proxy per sample and the mask of samples that have one.

    ``proxy="updating"`` replays the windowed update in closed form over the
    completed windows; ``"whole_mean"`` maps the mean of the whole long
    window.
    """
    inputs = inputs or proxy_inputs(net, batch)
    h = inputs["long"]
    if net.cfg.proxy == "whole_mean":
        return _proxy_net(net, Tensor(h)), proxy_valid(net, batch)
    B, K, D = h.shape
    weights = np.zeros((B, K))
    for r, n in enumerate(batch.arrays.w_count):
        if n:
            weights[r, :n] = ema_weights(int(n), beta)
    out = _proxy_net(net, Tensor(h.reshape(B * K, D)))
    out = nk.reshape(out, (B, K, out.shape[-1]))
    return net.weighted_sum(weights, out), proxy_valid(net, batch)


def proxy_valid(net: HIFNNetwork, batch: Batch) -> np.ndarray:
    """Samples whose long proxy is initialized (and so carry contrastive loss)."""
    if net.cfg.proxy == "whole_mean":
        return batch.has_long & ~batch.no_history
    return (batch.arrays.w_count > 0) & ~batch.no_history


def similarity(a, b) -> Tensor:
    """Row-wise inner product."""
    return nk.sum(nk.mul(a, b), axis=-1)


def bpr(anchor, positive, negative) -> Tensor:
    """softplus(<a, q> - <a, p>) per row."""
    return nk.softplus(nk.sub(similarity(anchor, negative), similarity(anchor, positive)))


def contrastive_terms(u_long, u_short, p_long, p_short) -> list[Tensor]:
    return [
        bpr(u_long, p_long, p_short),
        bpr(p_long, u_long, u_short),
        bpr(u_short, p_short, p_long),
        bpr(p_short, u_short, u_long),
    ]


def contrastive_loss(u_long, u_short, p_long, p_short, valid: np.ndarray | None = None) -> tuple[Tensor, int]:
    """Batch-mean of the four BPR terms over samples with initialized proxies.

    Samples outside ``valid`` add zero but still count in the mean's
    denominator, so the loss weights like the CTR term. Returns the loss and
    the number of skipped samples.
    """
    terms = contrastive_terms(u_long, u_short, p_long, p_short)
    per_sample = terms[0]
    for t in terms[1:]:
        per_sample = nk.add(per_sample, t)
    n = per_sample.shape[0] if per_sample.ndim else 1
    if valid is None:
        valid = np.ones(n, dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(per_sample.shape)
    masked = nk.where(valid, per_sample, Tensor(np.zeros(per_sample.shape)))
    return nk.mul(nk.sum(masked), 1.0 / n), int((~valid).sum())
