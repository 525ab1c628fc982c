"""The interest-fusing CTR network.

Short-term interests come from a GRU over the recent window, read out by
query-, target- and causality-driven encoders and mixed by a softmax gate.
Long-term interest is an attention read-out of the older behaviors probed
by the short-term interest. A sigmoid fusion weight mixes the two before
the prediction MLP.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .datamodel import RankingSample
from .numkernel import Tensor

__all__ = [
    "ModelConfig",
    "HifnParams",
    "InterestBundle",
    "SampleArrays",
    "Batch",
    "VocabularyError",
    "HIFNNetwork",
    "encode_samples",
    "map_batches",
    "causal_selection",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

ENCODERS = ("tdie", "qdie", "cdie")
CHECKPOINT_VERSION = 1


class VocabularyError(ValueError):
    """An id is outside the vocabulary the network was built for."""


@dataclass(frozen=True)
class ModelConfig:
    """Vocabulary sizes, dimensions and structural switches.

    ``encoders`` lists the active short-term encoders; ``sie_pooling="mean"``
    replaces all of them with mean pooling over the GRU states. ``fusion`` is
    ``"adaptive"``, ``"fixed"`` (uses ``fixed_alpha``) or ``"concat"``.
    """

    n_items: int
    n_categories: int
    n_tokens: int
    n_contexts: int = 25
    embed_dim: int = 16
    hidden_dim: int = 16
    attn_dim: int = 32
    short_len: int = 10
    long_len: int = 50
    cdie_layers: tuple[int, ...] = (128, 64, 32, 1)
    gate_layers: tuple[int, ...] = (128, 64, 32, 3)
    fusion_layers: tuple[int, ...] = (64, 32, 1)
    mlp_layers: tuple[int, ...] = (64, 32, 1)
    proxy_layers: tuple[int, ...] = (128, 64, 32, 16)
    encoders: tuple[str, ...] = ENCODERS
    sie_pooling: str = "attention"
    gate: str = "softmax"
    lie_probe: str = "short"
    fusion: str = "adaptive"
    fixed_alpha: float = 0.5
    proxy: str = "updating"
    cdie_source: str = "short"

    def __post_init__(self):
        for name in ("cdie_layers", "gate_layers", "fusion_layers", "mlp_layers", "proxy_layers", "encoders"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.gate_layers[-1] != 3:
            raise ValueError("gate network must end in 3 outputs")
        if self.cdie_layers[-1] != 1 or self.fusion_layers[-1] != 1 or self.mlp_layers[-1] != 1:
            raise ValueError("scoring, fusion and prediction networks end in a single logit")
        if self.proxy_layers[-1] != self.hidden_dim:
            raise ValueError("proxy network must end at the hidden width")
        if not set(self.encoders) <= set(ENCODERS) or not self.encoders:
            raise ValueError(f"encoders must be a non-empty subset of {ENCODERS}")
        checks = {
            "sie_pooling": ("attention", "mean"),
            "gate": ("softmax", "mean"),
            "lie_probe": ("short", "query", "target", "mean"),
            "fusion": ("adaptive", "fixed", "concat"),
            "proxy": ("updating", "whole_mean"),
            "cdie_source": ("short", "full"),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")
        if not 0.0 <= self.fixed_alpha <= 1.0:
            raise ValueError("fixed_alpha must lie in [0, 1]")

    @property
    def event_dim(self) -> int:
        return 3 * self.embed_dim

    @property
    def target_dim(self) -> int:
        return 2 * self.embed_dim

    def uses(self, encoder: str) -> bool:
        return self.sie_pooling == "attention" and encoder in self.encoders

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class HifnParams(dict):
    """Named parameter tensors, in a fixed creation order."""

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self[k].shape} vs {v.shape}")
            self[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def n_values(self) -> int:
        return int(sum(t.size for t in self.values()))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> HifnParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero padding rows."""
    rng = np.random.default_rng(seed)
    p = HifnParams()
    d, H, A, D = cfg.embed_dim, cfg.hidden_dim, cfg.attn_dim, cfg.event_dim

    def add(name, value):
        p[name] = Tensor(value, requires_grad=True, name=name)

    def table(name, rows):
        # embedding rows drawn with fan-in d; row 0 is the frozen padding row
        w = _uniform(rng, (rows, d), d)
        w[0] = 0.0
        add(name, w)

    def mlp(prefix, d_in, widths):
        for i, w in enumerate(widths):
            add(f"{prefix}.{i}.W", _uniform(rng, (d_in, w), d_in))
            add(f"{prefix}.{i}.b", np.zeros(w))
            d_in = w

    def linear(prefix, d_in, d_out):
        add(f"{prefix}.W", _uniform(rng, (d_in, d_out), d_in))
        add(f"{prefix}.b", np.zeros(d_out))

    def gru(prefix, d_in):
        add(f"{prefix}.W", _uniform(rng, (d_in, 3 * H), d_in))
        add(f"{prefix}.U", _uniform(rng, (H, 3 * H), H))
        add(f"{prefix}.b", np.zeros(3 * H))

    def attention(prefix):
        add(f"{prefix}.W_f", _uniform(rng, (H, A, H), H))
        add(f"{prefix}.b_f", np.zeros((H, A)))
        add(f"{prefix}.W_h", _uniform(rng, (A,), A))

    table("emb.item", cfg.n_items)
    table("emb.category", cfg.n_categories)
    table("emb.behavior", 4)
    table("emb.token", cfg.n_tokens)
    table("emb.context", cfg.n_contexts)
    add("no_history", _uniform(rng, (D,), d))
    gru("gru_short", D)
    gru("gru_long", D)
    if cfg.uses("qdie"):
        linear("qdie.probe", d, H)
        attention("qdie")
    if cfg.uses("tdie"):
        linear("tdie.probe", cfg.target_dim, H)
        attention("tdie")
    if cfg.uses("cdie"):
        mlp("cdie", 4 * D, cfg.cdie_layers)
    if cfg.sie_pooling == "attention" and cfg.gate == "softmax":
        mlp("gate", 3 * H, cfg.gate_layers)
    linear("lie.key", D, H)
    if cfg.lie_probe != "mean":
        attention("lie")
    if cfg.lie_probe == "query":
        linear("lie.probe", d, H)
    elif cfg.lie_probe == "target":
        linear("lie.probe", cfg.target_dim, H)
    add("lie.default", _uniform(rng, (H,), H))
    if cfg.fusion == "adaptive":
        mlp("fusion", cfg.target_dim + d + 3 * H, cfg.fusion_layers)
    interest = 2 * H if cfg.fusion == "concat" else H
    mlp("predict", interest + cfg.target_dim + 2 * d, cfg.mlp_layers)
    mlp("proxy", D, cfg.proxy_layers)
    return p


# ---------------------------------------------------------------------------
# sample encoding


@dataclass
class SampleArrays:
    """Padded integer arrays for a list of samples (row per sample)."""

    s_item: np.ndarray
    s_cat: np.ndarray
    s_type: np.ndarray
    s_len: np.ndarray
    l_item: np.ndarray
    l_cat: np.ndarray
    l_type: np.ndarray
    l_len: np.ndarray
    target_item: np.ndarray
    target_cat: np.ndarray
    q_tok: np.ndarray
    q_len: np.ndarray
    context: np.ndarray
    label: np.ndarray
    w_item: np.ndarray
    w_cat: np.ndarray
    w_type: np.ndarray
    w_count: np.ndarray
    list_id: np.ndarray
    event_type: np.ndarray
    user_id: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    def take(self, idx) -> "SampleArrays":
        return SampleArrays(**{k: v[idx] for k, v in self.__dict__.items()})


def encode_samples(samples: Sequence[RankingSample], cfg: ModelConfig, max_windows: int | None = None) -> SampleArrays:
    """Pad samples into fixed-width arrays; short windows are left-aligned.

    Keeps at most ``short_len`` short events (the most recent) and
    ``long_len`` long events (the most recent).
    """
    n = len(samples)
    Ts, L = cfg.short_len, cfg.long_len
    q_max = max([len(s.query_tokens) for s in samples] + [1])
    k_max = max([len(s.proxy_windows) for s in samples] + [1])
    if max_windows is not None:
        k_max = min(k_max, max_windows)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.int64)

    a = SampleArrays(
        s_item=zeros(n, Ts), s_cat=zeros(n, Ts), s_type=zeros(n, Ts), s_len=zeros(n),
        l_item=zeros(n, L), l_cat=zeros(n, L), l_type=zeros(n, L), l_len=zeros(n),
        target_item=zeros(n), target_cat=zeros(n), q_tok=zeros(n, q_max), q_len=zeros(n),
        context=zeros(n), label=np.zeros(n), w_item=zeros(n, k_max, Ts), w_cat=zeros(n, k_max, Ts),
        w_type=zeros(n, k_max, Ts), w_count=zeros(n), list_id=zeros(n), event_type=zeros(n),
        user_id=zeros(n),
    )
    for r, s in enumerate(samples):
        short = s.short_seq[-Ts:]
        for j, e in enumerate(short):
            a.s_item[r, j], a.s_cat[r, j], a.s_type[r, j] = e.item_id, e.category_id, int(e.behavior_type)
        a.s_len[r] = len(short)
        long_ = s.long_seq[-L:] if L else []
        for j, e in enumerate(long_):
            a.l_item[r, j], a.l_cat[r, j], a.l_type[r, j] = e.item_id, e.category_id, int(e.behavior_type)
        a.l_len[r] = len(long_)
        a.target_item[r], a.target_cat[r] = s.target_item, s.target_category
        a.q_tok[r, : len(s.query_tokens)] = s.query_tokens
        a.q_len[r] = len(s.query_tokens)
        a.context[r] = s.context_id
        a.label[r] = s.label
        wins = [w for w in s.proxy_windows if len(w) == Ts]
        wins = wins[-k_max:]
        for k, w in enumerate(wins):
            for j, (it, ca, ty) in enumerate(w):
                a.w_item[r, k, j], a.w_cat[r, k, j], a.w_type[r, k, j] = it, ca, ty
        # windows beyond k_max are dropped oldest-first; their EMA weight is
        # (1 - beta) ** n and vanishes quickly
        a.w_count[r] = len(wins)
        a.list_id[r] = s.list_id
        a.event_type[r] = s.event_type
        a.user_id[r] = s.user_id
    return a


def causal_selection(cats: np.ndarray, types: np.ndarray, valid: np.ndarray, focal: np.ndarray) -> np.ndarray:
    """Sub-sequence membership for every focal position.

    ``cats``, ``types``, ``valid`` have shape (B, S) over source positions in
    chronological order; ``focal`` (B, T) holds the source index of each
    focal position (-1 for none). Returns float (B, T, 4, S) with the four
    planes before-click, before-purchase, after-click, after-purchase.
    """
    B, S = cats.shape
    T = focal.shape[1]
    pos = np.arange(S)
    fidx = np.clip(focal, 0, S - 1)
    fcat = np.take_along_axis(cats, fidx, axis=1)  # (B, T)
    ok = (focal >= 0)[:, :, None] & valid[:, None, :] & (cats[:, None, :] == fcat[:, :, None])
    ok &= pos[None, None, :] != focal[:, :, None]
    before = pos[None, None, :] < focal[:, :, None]
    click = (types == 1)[:, None, :]
    purchase = (types == 3)[:, None, :]
    out = np.zeros((B, T, 4, S))
    out[:, :, 0] = ok & before & click
    out[:, :, 1] = ok & before & purchase
    out[:, :, 2] = ok & ~before & click
    out[:, :, 3] = ok & ~before & purchase
    return out


@dataclass
class Batch:
    """Trimmed arrays plus the masks the forward pass needs."""

    arrays: SampleArrays
    s_mask: np.ndarray
    no_history: np.ndarray
    l_mask: np.ndarray
    has_long: np.ndarray
    q_mask: np.ndarray
    cdie_sel: np.ndarray | None
    cdie_src: str

    @property
    def size(self) -> int:
        return len(self.arrays)

    @classmethod
    def build(cls, arrays: SampleArrays, cfg: ModelConfig) -> "Batch":
        T = max(1, int(arrays.s_len.max()) if len(arrays) else 1)
        L = max(1, int(arrays.l_len.max()) if len(arrays) else 1)
        K = max(1, int(arrays.w_count.max()) if len(arrays) else 1)
        Q = max(1, int(arrays.q_len.max()) if len(arrays) else 1)
        a = replace(
            arrays,
            s_item=arrays.s_item[:, :T], s_cat=arrays.s_cat[:, :T], s_type=arrays.s_type[:, :T],
            l_item=arrays.l_item[:, :L], l_cat=arrays.l_cat[:, :L], l_type=arrays.l_type[:, :L],
            q_tok=arrays.q_tok[:, :Q], w_item=arrays.w_item[:, :K], w_cat=arrays.w_cat[:, :K],
            w_type=arrays.w_type[:, :K],
        )
        s_mask = np.arange(T)[None, :] < a.s_len[:, None]
        no_hist = a.s_len == 0
        s_mask[no_hist, 0] = True
        l_mask = np.arange(L)[None, :] < a.l_len[:, None]
        q_mask = np.arange(Q)[None, :] < a.q_len[:, None]
        if np.any(a.q_len == 0):
            raise ValueError("every sample needs at least one query token")
        return cls.from_masks(a, cfg, s_mask, no_hist, l_mask, q_mask)

    @classmethod
    def from_masks(cls, a, cfg, s_mask, no_hist, l_mask, q_mask) -> "Batch":
        """Assemble a batch from explicit masks; padding may sit anywhere."""
        has_long = l_mask.any(axis=1)
        sel = None
        if cfg.uses("cdie"):
            real_s = s_mask & ~no_hist[:, None]
            if cfg.cdie_source == "short":
                cats, types, valid = a.s_cat, a.s_type, real_s
                focal = np.where(real_s, np.arange(s_mask.shape[1])[None, :], -1)
            else:
                cats = np.concatenate([a.l_cat, a.s_cat], axis=1)
                types = np.concatenate([a.l_type, a.s_type], axis=1)
                valid = np.concatenate([l_mask, real_s], axis=1)
                offset = l_mask.shape[1]
                focal = np.where(real_s, offset + np.arange(s_mask.shape[1])[None, :], -1)
            sel = causal_selection(cats, types, valid, focal)
        return cls(a, s_mask, no_hist, l_mask, has_long, q_mask, sel, cfg.cdie_source)


# ---------------------------------------------------------------------------
# network


@dataclass
class InterestBundle:
    """Intermediate vectors of one forward pass (tensors, batch-major)."""

    u_q: Tensor | None
    u_t: Tensor | None
    u_c: Tensor | None
    u_short: Tensor
    u_long: Tensor
    tau_long: Tensor
    alpha_fuse: Tensor | None
    gate_weights: Tensor | None
    u: Tensor
    logit: Tensor
    y_hat: Tensor
    e_i: Tensor
    e_q: Tensor
    e_c: Tensor
    event_emb: Tensor
    cdie_weights: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def as_numpy(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, Tensor):
                out[k] = v.data
        if self.alpha_fuse is None:
            out["alpha_fuse"] = np.full(self.y_hat.shape, np.nan)
        return out


def _masked_mean_weights(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(float)
    return m / np.maximum(m.sum(axis=-1, keepdims=True), 1.0)


class HIFNNetwork:
    """Forward computation over a :class:`Batch` with a parameter set."""

    def __init__(self, cfg: ModelConfig, params: HifnParams | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # small building blocks -------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def mlp(self, prefix: str, x: Tensor, n_layers: int) -> Tensor:
        """ReLU hidden layers, linear output."""
        for i in range(n_layers):
            x = nk.add(nk.matmul(x, self._p(f"{prefix}.{i}.W")), self._p(f"{prefix}.{i}.b"))
            if i < n_layers - 1:
                x = nk.relu(x)
        return x

    def linear(self, prefix: str, x: Tensor) -> Tensor:
        return nk.add(nk.matmul(x, self._p(f"{prefix}.W")), self._p(f"{prefix}.b"))

    def _rows(self, x: Tensor, lead: tuple[int, ...], fn) -> Tensor:
        # apply a row-wise map to an (..., d) tensor through a 2-D view
        flat = nk.reshape(x, (-1, x.shape[-1]))
        out = fn(flat)
        return nk.reshape(out, lead + (out.shape[-1],))

    def _check_ids(self, name: str, ids: np.ndarray, n: int) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise VocabularyError(f"unknown {name} id (vocabulary has {n - 1} entries)")

    # embeddings ------------------------------------------------------------

    def embed_events(self, items, cats, types) -> Tensor:
        """Item, category and behavior-type embeddings, concatenated."""
        items, cats, types = (np.asarray(x, dtype=np.int64) for x in (items, cats, types))
        self._check_ids("item", items, self.cfg.n_items)
        self._check_ids("category", cats, self.cfg.n_categories)
        self._check_ids("behavior", types, 4)
        return nk.concat(
            [
                nk.embedding(self._p("emb.item"), items),
                nk.embedding(self._p("emb.category"), cats),
                nk.embedding(self._p("emb.behavior"), types),
            ],
            axis=-1,
        )

    def embed_target(self, items, cats) -> Tensor:
        items, cats = np.asarray(items, dtype=np.int64), np.asarray(cats, dtype=np.int64)
        self._check_ids("item", items, self.cfg.n_items)
        self._check_ids("category", cats, self.cfg.n_categories)
        return nk.concat(
            [nk.embedding(self._p("emb.item"), items), nk.embedding(self._p("emb.category"), cats)],
            axis=-1,
        )

    def embed_query(self, tokens, mask) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_ids("token", tokens, self.cfg.n_tokens)
        emb = nk.embedding(self._p("emb.token"), tokens)
        w = _masked_mean_weights(np.asarray(mask))
        B, Q = tokens.shape
        return nk.reshape(nk.matmul(Tensor(w.reshape(B, 1, Q)), emb), (B, self.cfg.embed_dim))

    def embed_context(self, ctx) -> Tensor:
        ctx = np.asarray(ctx, dtype=np.int64)
        self._check_ids("context", ctx, self.cfg.n_contexts)
        return nk.embedding(self._p("emb.context"), ctx)

    # sequence encoders -------------------------------------------------------

    def encode(self, prefix: str, seq: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Masked GRU over (B, T, D); padded steps carry the state through.

        Returns all states (B, T, H) and the final state (B, H).
        """
        params = nk.GRUParams(self._p(f"{prefix}.W"), self._p(f"{prefix}.U"), self._p(f"{prefix}.b"))
        B, T, _ = seq.shape
        H = params.hidden
        x_proj = nk.add(nk.matmul(seq, params.W), params.b)
        h = Tensor(np.zeros((B, H)))
        states = []
        for t in range(T):
            m = mask[:, t]
            if not m.any():
                states.append(h)
                continue
            h_new = nk.gru_step(None, h, params, x_proj=x_proj[:, t, :])
            h = h_new if m.all() else nk.where(m[:, None], h_new, h)
            states.append(h)
        return nk.stack(states, axis=1), h

    def attention_pool(self, prefix: str, keys: Tensor, mask: np.ndarray, probe: Tensor) -> tuple[Tensor, Tensor]:
        """score_i = (k_i . tanh(W_f probe + b_f)) . W_h, softmax over unmasked keys.

        ``keys`` (B, T, H), ``probe`` (B, H). Returns the pooled (B, H) vector
        and the attention weights (B, T).
        """
        B, T, H = keys.shape
        if probe.shape != (B, H):
            raise nk.DimensionError(f"probe shape {probe.shape} != {(B, H)}")
        W_f = self._p(f"{prefix}.W_f")
        A = W_f.shape[1]
        flat = nk.transpose(nk.reshape(W_f, (H * A, H)))
        proj = nk.add(nk.matmul(probe, flat), nk.reshape(self._p(f"{prefix}.b_f"), (H * A,)))
        M = nk.reshape(nk.tanh(proj), (B, H, A))
        v = nk.matmul(M, nk.reshape(self._p(f"{prefix}.W_h"), (A, 1)))
        scores = nk.reshape(nk.matmul(keys, v), (B, T))
        w = nk.softmax(scores, mask=mask)
        pooled = nk.reshape(nk.matmul(nk.reshape(w, (B, 1, T)), keys), (B, H))
        return pooled, w

    def weighted_sum(self, weights: Tensor | np.ndarray, values: Tensor) -> Tensor:
        B, T, H = values.shape
        w = weights if isinstance(weights, Tensor) else Tensor(weights)
        return nk.reshape(nk.matmul(nk.reshape(w, (B, 1, T)), values), (B, H))

    def qdie(self, states: Tensor, mask: np.ndarray, e_q: Tensor):
        return self.attention_pool("qdie", states, mask, self.linear("qdie.probe", e_q))

    def tdie(self, states: Tensor, mask: np.ndarray, e_i: Tensor):
        return self.attention_pool("tdie", states, mask, self.linear("tdie.probe", e_i))

    def cdie(self, source: Tensor, selection: np.ndarray, states: Tensor, mask: np.ndarray):
        """Sigmoid-scored sum of GRU states from sum-pooled causal sub-sequences.

        ``source`` (B, S, D) holds the event embeddings the selection indexes.
        Returns u_c (B, H) and the per-position weights (B, T).
        """
        B, T, H = states.shape
        S, D = source.shape[1], source.shape[2]
        sel = Tensor(selection.reshape(B, T * 4, S))
        pools = nk.reshape(nk.matmul(sel, source), (B, T, 4 * D))
        n_layers = len(self.cfg.cdie_layers)
        logit = self._rows(pools, (B, T), lambda x: self.mlp("cdie", x, n_layers))
        alpha = nk.sigmoid(nk.reshape(logit, (B, T)))
        alpha = nk.mul(alpha, Tensor(mask.astype(float)))
        return self.weighted_sum(alpha, states), alpha

    def fuse_short(self, u_t, u_q, u_c, batch_size: int):
        """Gate-weighted sum of the active short-term interests."""
        H = self.cfg.hidden_dim
        zero = Tensor(np.zeros((batch_size, H)))
        parts = [x if x is not None else zero for x in (u_t, u_q, u_c)]
        active = np.array([x is not None for x in (u_t, u_q, u_c)])
        if self.cfg.gate == "softmax":
            logits = self.mlp("gate", nk.concat(parts, axis=-1), len(self.cfg.gate_layers))
            w = nk.softmax(logits, mask=np.broadcast_to(active, (batch_size, 3)))
        else:
            w = Tensor(np.broadcast_to(active / active.sum(), (batch_size, 3)))
        return self.weighted_sum(w, nk.stack(parts, axis=1)), w

    def lie(self, long_emb: Tensor, batch: Batch, probe: Tensor | None) -> tuple[Tensor, Tensor]:
        """Attention read-out of long behaviors; empty histories get the learned default."""
        B, L, _ = long_emb.shape
        keys = self._rows(long_emb, (B, L), lambda x: self.linear("lie.key", x))
        mask = batch.l_mask.copy()
        mask[~batch.has_long, 0] = True
        if self.cfg.lie_probe == "mean":
            w = Tensor(_masked_mean_weights(mask))
            pooled = self.weighted_sum(w, keys)
        else:
            pooled, w = self.attention_pool("lie", keys, mask, probe)
        if batch.has_long.all():
            return pooled, w
        fallback = nk.broadcast_to(self._p("lie.default"), pooled.shape)
        return nk.where(batch.has_long[:, None], pooled, fallback), w

    def ifm_fuse(self, e_i, e_q, u_short, u_long, tau):
        """Adaptive fusion weight and the fused interest."""
        B, H = u_short.shape
        cfg = self.cfg
        if cfg.fusion == "concat":
            return nk.concat([u_short, u_long], axis=-1), None
        if cfg.fusion == "fixed":
            a = Tensor(np.full((B, 1), cfg.fixed_alpha))
        else:
            z = self.mlp("fusion", nk.concat([e_i, e_q, u_short, u_long, tau], axis=-1), len(cfg.fusion_layers))
            a = nk.sigmoid(z)
        a_h = nk.broadcast_to(a, (B, H))
        u = nk.add(nk.mul(a_h, u_short), nk.mul(nk.sub(1.0, a_h), u_long))
        return u, nk.reshape(a, (B,))

    def predict_logit(self, u, e_i, e_q, e_c) -> Tensor:
        z = self.mlp("predict", nk.concat([u, e_i, e_q, e_c], axis=-1), len(self.cfg.mlp_layers))
        return nk.reshape(z, (z.shape[0],))

    # full pass -------------------------------------------------------------

    def forward(self, batch: Batch) -> InterestBundle:
        cfg, a = self.cfg, batch.arrays
        B = batch.size
        E_s = self.embed_events(a.s_item, a.s_cat, a.s_type)
        if batch.no_history.any():
            ind = np.zeros(E_s.shape)
            ind[batch.no_history, 0, :] = 1.0
            E_s = nk.add(E_s, nk.mul(Tensor(ind), self._p("no_history")))
        states, _ = self.encode("gru_short", E_s, batch.s_mask)
        e_i = self.embed_target(a.target_item, a.target_cat)
        e_q = self.embed_query(a.q_tok, batch.q_mask)
        e_c = self.embed_context(a.context)
        E_l = self.embed_events(a.l_item, a.l_cat, a.l_type)

        u_q = u_t = u_c = gate_w = cdie_w = None
        if cfg.sie_pooling == "mean":
            u_short = self.weighted_sum(_masked_mean_weights(batch.s_mask), states)
        else:
            if cfg.uses("qdie"):
                u_q, _ = self.qdie(states, batch.s_mask, e_q)
            if cfg.uses("tdie"):
                u_t, _ = self.tdie(states, batch.s_mask, e_i)
            if cfg.uses("cdie"):
                source = E_s if cfg.cdie_source == "short" else nk.concat([E_l, E_s], axis=1)
                u_c, cdie_w = self.cdie(source, batch.cdie_sel, states, batch.s_mask)
            u_short, gate_w = self.fuse_short(u_t, u_q, u_c, B)

        probe = None
        if cfg.lie_probe == "short":
            probe = u_short
        elif cfg.lie_probe == "query":
            probe = self.linear("lie.probe", e_q)
        elif cfg.lie_probe == "target":
            probe = self.linear("lie.probe", e_i)
        u_long, _ = self.lie(E_l, batch, probe)
        _, tau = self.encode("gru_long", E_l, batch.l_mask)
        u, alpha = self.ifm_fuse(e_i, e_q, u_short, u_long, tau)
        logit = self.predict_logit(u, e_i, e_q, e_c)
        return InterestBundle(
            u_q=u_q, u_t=u_t, u_c=u_c, u_short=u_short, u_long=u_long, tau_long=tau,
            alpha_fuse=alpha, gate_weights=gate_w, u=u, logit=logit, y_hat=nk.sigmoid(logit),
            e_i=e_i, e_q=e_q, e_c=e_c, event_emb=E_s, cdie_weights=cdie_w,
        )


def map_batches(net: HIFNNetwork, arrays: SampleArrays, batch_size: int = 2048, fn=None) -> dict[str, np.ndarray]:
    """Untaped forward over ``arrays`` in order, concatenating per-batch outputs.

    ``fn(batch, bundle)`` returns a dict of per-sample arrays; the default
    collects predicted probabilities and fusion weights.
    """
    if fn is None:
        def fn(batch, bundle):
            d = bundle.as_numpy()
            return {"y_hat": d["y_hat"], "alpha_fuse": d["alpha_fuse"]}
    parts: dict[str, list] = {}
    with nk.no_grad():
        for start in range(0, len(arrays), batch_size):
            batch = Batch.build(arrays.take(slice(start, start + batch_size)), net.cfg)
            for k, v in fn(batch, net.forward(batch)).items():
                parts.setdefault(k, []).append(np.asarray(v))
    return {k: np.concatenate(v) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: HifnParams, extra: dict | None = None) -> None:
    """JSON manifest line followed by little-endian float64 parameter blobs."""
    entries, offset = [], 0
    for name, t in params.items():
        nbytes = t.size * 8
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "params": entries,
        "extra": extra or {},
    }
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelConfig, HifnParams, dict]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        blob = fh.read()
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    params = HifnParams()
    for e in manifest["params"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float64), requires_grad=True, name=e["name"])
    return cfg, params, manifest.get("extra", {})
