"""Joint CTR + contrastive objective, Adam, and the deterministic training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import datamodel as dm
from . import disentangle as dis
from . import numkernel as nk
from .evaluation import auc, logloss
from .model import Batch, HIFNNetwork, ModelConfig, SampleArrays, encode_samples, map_batches, save_checkpoint
from .numkernel import Tensor
from .synthgen import ConfigError

__all__ = [
    "TrainConfig",
    "NonFiniteLossError",
    "Adam",
    "ctr_loss",
    "joint_loss",
    "batch_loss",
    "make_batches",
    "fit",
    "TrainResult",
    "PreparedData",
    "load_prepared",
    "train",
    "repeat_seeds",
    "run_repeats",
]

log = logging.getLogger(__name__)

_ALIASES = {"lambda": "lam", "Ts": "short_len", "L_max": "long_len"}


class NonFiniteLossError(FloatingPointError):
    """The loss (or something feeding it) became NaN or infinite."""


@dataclass
class TrainConfig:
    """Flat experiment configuration; JSON keys ``lambda``, ``Ts`` and ``L_max`` are accepted."""

    batch_size: int = 512
    learning_rate: float = 0.001
    lam: float = 0.1
    short_len: int = 10
    beta: float = 0.55
    long_len: int = 50
    epochs: int = 5
    rng_seed: int = 0
    patience: int = 3
    embed_dim: int = 16
    hidden_dim: int = 16
    attn_dim: int = 32
    cdie_layers: tuple = (128, 64, 32, 1)
    gate_layers: tuple = (128, 64, 32, 3)
    fusion_layers: tuple = (64, 32, 1)
    mlp_layers: tuple = (64, 32, 1)
    proxy_hidden: tuple = (128, 64, 32)
    encoders: tuple = ("tdie", "qdie", "cdie")
    sie_pooling: str = "attention"
    gate: str = "softmax"
    lie_probe: str = "short"
    fusion: str = "adaptive"
    fixed_alpha: float = 0.5
    proxy: str = "updating"
    cdie_source: str = "short"
    max_windows: int | None = None
    eval_batch_size: int = 2048
    data_dir: str | None = None

    def __post_init__(self):
        for f in ("cdie_layers", "gate_layers", "fusion_layers", "mlp_layers", "proxy_hidden", "encoders"):
            setattr(self, f, tuple(getattr(self, f)))
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("beta must lie in (0, 1]")
        if self.short_len < 1:
            raise ConfigError("Ts must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.long_len < 0 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("L_max and epochs must be >= 0, patience >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        out = {}
        for k, v in obj.items():
            k = _ALIASES.get(k, k)
            if k not in known:
                raise ConfigError(f"unknown training config key: {k!r}")
            out[k] = v
        try:
            return cls(**out)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        for k, v in changes.items():
            k = _ALIASES.get(k, k)
            if k not in d:
                raise ConfigError(f"unknown training config key: {k!r}")
            d[k] = v
        return TrainConfig(**d)

    def model_config(self, sizes: dict[str, int]) -> ModelConfig:
        try:
            return ModelConfig(
                n_items=sizes["n_items"],
                n_categories=sizes["n_categories"],
                n_tokens=sizes["n_tokens"],
                n_contexts=sizes["n_contexts"],
                embed_dim=self.embed_dim,
                hidden_dim=self.hidden_dim,
                attn_dim=self.attn_dim,
                short_len=self.short_len,
                long_len=self.long_len,
                cdie_layers=self.cdie_layers,
                gate_layers=self.gate_layers,
                fusion_layers=self.fusion_layers,
                mlp_layers=self.mlp_layers,
                proxy_layers=tuple(self.proxy_hidden) + (self.hidden_dim,),
                encoders=self.encoders,
                sie_pooling=self.sie_pooling,
                gate=self.gate,
                lie_probe=self.lie_probe,
                fusion=self.fusion,
                fixed_alpha=self.fixed_alpha,
                proxy=self.proxy,
                cdie_source=self.cdie_source,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# objective


def ctr_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy from logits: mean(softplus(z) - y z)."""
    z = nk.constant(logits)
    y = Tensor(np.asarray(labels, dtype=float).reshape(z.shape))
    return nk.mean(nk.sub(nk.softplus(z), nk.mul(y, z)))


def joint_loss(ctr, contrastive, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    ctr = nk.constant(ctr)
    if contrastive is None or lam == 0:
        return ctr
    return nk.add(ctr, nk.mul(nk.constant(contrastive), float(lam)))


def _check_finite(loss: Tensor, bundle, params) -> None:
    if np.all(np.isfinite(loss.data)):
        return
    for name in ("event_emb", "u_q", "u_t", "u_c", "u_short", "u_long", "tau_long", "alpha_fuse", "u", "logit"):
        t = getattr(bundle, name)
        if t is not None and not np.all(np.isfinite(t.data)):
            raise NonFiniteLossError(f"non-finite loss; first non-finite tensor: {name}")
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteLossError(f"non-finite loss; first non-finite tensor: parameter {name}")
    raise NonFiniteLossError("non-finite loss; first non-finite tensor: loss")


def batch_loss(net: HIFNNetwork, batch: Batch, lam: float, beta: float, proxy_inputs: dict | None = None) -> tuple[Tensor, dict]:
    """Joint loss on one batch, plus its parts as floats.

    ``proxy_inputs`` pins the (gradient-free) embedding means behind the
    proxies; by default they are read from the current embeddings.
    """
    bundle = net.forward(batch)
    ctr = ctr_loss(bundle.logit, batch.arrays.label)
    con = None
    if lam > 0:
        inputs = proxy_inputs or dis.proxy_inputs(net, batch)
        p_long, valid = dis.long_proxy(net, batch, beta, inputs)
        p_short = dis.short_proxy(net, batch, inputs)
        con, skipped = dis.contrastive_loss(bundle.u_long, bundle.u_short, p_long, p_short, valid)
    else:
        skipped = int((~dis.proxy_valid(net, batch)).sum())
    loss = joint_loss(ctr, con, lam)
    _check_finite(loss, bundle, net.params)
    parts = {
        "loss": float(loss.data),
        "ctr": float(ctr.data),
        "con": float(con.data) if con is not None else 0.0,
        "skipped": skipped,
    }
    return loss, parts


class Adam:
    """Adam with bias correction; parameters without a gradient are left alone."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# loop


def make_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator, group: int = 8) -> list[np.ndarray]:
    """Shuffled mini-batches of similar short-sequence length.

    Samples are shuffled, cut into pools of ``group`` batches, sorted by
    length inside each pool and batched; batch order is shuffled again.
    """
    perm = rng.permutation(len(lengths))
    batches = []
    pool = batch_size * group
    for start in range(0, len(perm), pool):
        chunk = perm[start : start + pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class TrainResult:
    net: HIFNNetwork
    history: list[dict]
    best_epoch: int
    best_valid_auc: float | None = None
    extra: dict = field(default_factory=dict)


def _full_pass_loss(net: HIFNNetwork, arrays: SampleArrays, cfg: TrainConfig) -> dict:
    totals = {"loss": 0.0, "ctr": 0.0, "skipped": 0}
    with nk.no_grad():
        for start in range(0, len(arrays), cfg.eval_batch_size):
            sub = arrays.take(slice(start, start + cfg.eval_batch_size))
            _, parts = batch_loss(net, Batch.build(sub, net.cfg), cfg.lam, cfg.beta)
            totals["loss"] += parts["loss"] * len(sub)
            totals["ctr"] += parts["ctr"] * len(sub)
            totals["skipped"] += parts["skipped"]
    n = max(len(arrays), 1)
    return {"loss": totals["loss"] / n, "ctr": totals["ctr"] / n, "skipped": totals["skipped"]}


def _valid_metrics(net: HIFNNetwork, arrays: SampleArrays | None, cfg: TrainConfig) -> tuple[float | None, float | None]:
    if arrays is None or len(arrays) == 0:
        return None, None
    y_hat = map_batches(net, arrays, cfg.eval_batch_size)["y_hat"]
    labels = arrays.label
    if labels.min() == labels.max():
        return None, logloss(y_hat, labels)
    return auc(y_hat, labels), logloss(y_hat, labels)


def fit(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_arrays: SampleArrays,
    valid_arrays: SampleArrays | None = None,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch; returns the network holding the best-validation parameters."""
    with threadpool_limits(limits=1):
        return _fit(cfg, model_cfg, train_arrays, valid_arrays, metrics_path, on_epoch)


def _fit(cfg, model_cfg, train_arrays, valid_arrays, metrics_path, on_epoch) -> TrainResult:
    net = HIFNNetwork(model_cfg, seed=int(np.random.SeedSequence([cfg.rng_seed, 1]).generate_state(1)[0]))
    opt = Adam(net.params, lr=cfg.learning_rate)
    history: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None

    def record(row: dict) -> None:
        history.append(row)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d: %s", row["epoch"], row)

    try:
        init = _full_pass_loss(net, train_arrays, cfg)
        v_auc, v_ll = _valid_metrics(net, valid_arrays, cfg)
        record(
            {
                "epoch": 0,
                "train_loss": init["loss"],
                "train_logloss": init["ctr"],
                "valid_auc": v_auc,
                "valid_logloss": v_ll,
                "skipped_contrastive_count": init["skipped"],
            }
        )
        best = (v_auc if v_auc is not None else -np.inf, 0, net.params.copy_values())
        stale = 0
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 2, epoch]))
            tot_loss = tot_ctr = 0.0
            skipped = 0
            for idx in make_batches(train_arrays.s_len, cfg.batch_size, rng):
                batch = Batch.build(train_arrays.take(idx), model_cfg)
                net.params.zero_grad()
                loss, parts = batch_loss(net, batch, cfg.lam, cfg.beta)
                nk.backward(loss)
                opt.step()
                tot_loss += parts["loss"] * len(idx)
                tot_ctr += parts["ctr"] * len(idx)
                skipped += parts["skipped"]
            net.params.zero_grad()
            n = len(train_arrays)
            v_auc, v_ll = _valid_metrics(net, valid_arrays, cfg)
            record(
                {
                    "epoch": epoch,
                    "train_loss": tot_loss / n,
                    "train_logloss": tot_ctr / n,
                    "valid_auc": v_auc,
                    "valid_logloss": v_ll,
                    "skipped_contrastive_count": skipped,
                }
            )
            score = v_auc if v_auc is not None else -np.inf
            if valid_arrays is None or score > best[0]:
                best = (score, epoch, net.params.copy_values())
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after epoch %d", epoch)
                    break
    finally:
        if sink:
            sink.close()
    net.params.load_values(best[2])
    return TrainResult(net, history, best[1], None if best[0] == -np.inf else best[0])


# ---------------------------------------------------------------------------
# files


@dataclass
class PreparedData:
    vocab: dm.Vocabulary
    splits: dict[str, list[dm.RankingSample]]

    def arrays(self, cfg: ModelConfig, max_windows: int | None = None) -> dict[str, SampleArrays]:
        return {k: encode_samples(v, cfg, max_windows) for k, v in self.splits.items() if v}


def load_prepared(data_dir) -> PreparedData:
    d = Path(data_dir)
    missing = [n for n in ("vocab.json", "train.jsonl") if not (d / n).exists()]
    if missing:
        raise FileNotFoundError(f"prepared dataset incomplete in {d}: missing {missing}")
    vocab = dm.load_vocabulary(d / "vocab.json")
    splits = {}
    for name in ("train", "valid", "test"):
        path = d / f"{name}.jsonl"
        splits[name] = dm.read_samples(path) if path.exists() else []
    return PreparedData(vocab, splits)


def train(cfg: TrainConfig, out_dir, data: PreparedData | None = None) -> dict:
    """Train on a prepared dataset; writes ``checkpoint.bin`` and ``metrics.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        if not cfg.data_dir:
            raise ConfigError("data_dir is required")
        data = load_prepared(cfg.data_dir)
    model_cfg = cfg.model_config(data.vocab.sizes())
    arrays = data.arrays(model_cfg, cfg.max_windows)
    if "train" not in arrays:
        raise ValueError("training split is empty")
    result = fit(cfg, model_cfg, arrays["train"], arrays.get("valid"), out / "metrics.jsonl")
    extra = {"train_config": cfg.to_dict(), "best_epoch": result.best_epoch}
    save_checkpoint(out / "checkpoint.bin", model_cfg, result.net.params, extra)
    return {"best_epoch": result.best_epoch, "best_valid_auc": result.best_valid_auc, "epochs_run": len(result.history) - 1}


def repeat_seeds(base_seed: int, n: int = 10) -> list[int]:
    """Seeds for repeated runs: base + 1 .. base + n."""
    return [base_seed + i for i in range(1, n + 1)]


def run_repeats(cfg: TrainConfig, run: Callable[[TrainConfig], dict], n: int = 10) -> dict:
    """Call ``run`` once per derived seed; report per-seed metrics and mean/std."""
    rows = [dict(run(cfg.replace(rng_seed=s)), seed=s) for s in repeat_seeds(cfg.rng_seed, n)]
    keys = [k for k in rows[0] if k != "seed" and isinstance(rows[0][k], (int, float))]
    summary = {k: {"mean": float(np.mean([r[k] for r in rows])), "std": float(np.std([r[k] for r in rows]))} for k in keys}
    return {"runs": rows, "summary": summary}
