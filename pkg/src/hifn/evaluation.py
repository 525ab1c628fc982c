"""Classification and ranking metrics, the fusion-weight report and ablations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .synthgen import ConfigError

__all__ = [
    "UndefinedMetricError",
    "NoRelevantError",
    "auc",
    "auc_pairwise",
    "logloss",
    "RankedList",
    "group_lists",
    "mrr",
    "ndcg_at",
    "average_precision",
    "corpus_metrics",
    "evaluate",
    "AlphaReport",
    "alpha_report",
    "constraint_satisfaction",
    "ARMS",
    "MATRICES",
    "resolve_matrix",
    "run_ablation",
    "AblationTable",
]


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. a single class)."""


class NoRelevantError(ValueError):
    """A ranked list holds no relevant candidate."""


def _check_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def auc(scores, labels) -> float:
    """Area under the ROC curve via average-tie rank sums."""
    s, y = _check_pair(scores, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) pair count; ties count one half."""
    s, y = _check_pair(scores, labels)
    p, n = s[y == 1], s[y != 1]
    if len(p) == 0 or len(n) == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def logloss(probs, labels, eps: float = 1e-15) -> float:
    p, y = _check_pair(probs, labels)
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# ranking


@dataclass
class RankedList:
    """Candidates of one (user, query) list with scores and binary relevance."""

    list_id: int
    items: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items)
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels)
        if not (len(self.items) == len(self.scores) == len(self.labels)):
            raise ValueError("items, scores and labels must align")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def relevant_ranks(self) -> np.ndarray:
        """1-based ranks of relevant candidates; ties keep candidate order."""
        if not np.any(self.labels == 1):
            raise NoRelevantError(f"list {self.list_id} has no relevant candidate")
        order = np.argsort(-self.scores, kind="stable")
        return np.flatnonzero(self.labels[order] == 1) + 1


def mrr(lst: RankedList) -> float:
    return 1.0 / float(lst.relevant_ranks()[0])


def ndcg_at(lst: RankedList, k: int = 10) -> float:
    """Binary-gain NDCG with discount 1/log2(rank + 1)."""
    ranks = lst.relevant_ranks()
    dcg = float(np.sum(1.0 / np.log2(ranks[ranks <= k] + 1.0)))
    ideal = np.arange(1, min(len(ranks), k) + 1)
    return dcg / float(np.sum(1.0 / np.log2(ideal + 1.0)))


def average_precision(lst: RankedList) -> float:
    ranks = lst.relevant_ranks()
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def group_lists(list_ids, items, scores, labels) -> list[RankedList]:
    """Group flat per-candidate arrays into lists, in first-appearance order."""
    list_ids = np.asarray(list_ids)
    _, first, inverse = np.unique(list_ids, return_index=True, return_inverse=True)
    out = []
    for g in np.argsort(first, kind="stable"):
        rows = np.flatnonzero(inverse == g)
        out.append(RankedList(int(list_ids[rows[0]]), np.asarray(items)[rows], np.asarray(scores)[rows], np.asarray(labels)[rows]))
    return out


def corpus_metrics(lists: Iterable[RankedList], k: int = 10) -> dict:
    """Mean MRR / NDCG@k / MAP over lists; lists without a positive are skipped and counted."""
    vals = {"mrr": [], f"ndcg@{k}": [], "map": []}
    skipped = 0
    for lst in lists:
        if not np.any(lst.labels == 1):
            skipped += 1
            continue
        vals["mrr"].append(mrr(lst))
        vals[f"ndcg@{k}"].append(ndcg_at(lst, k))
        vals["map"].append(average_precision(lst))
    out = {name: float(np.mean(v)) if v else None for name, v in vals.items()}
    out["lists"] = len(vals["mrr"])
    out["skipped_lists"] = skipped
    return out


def evaluate(net, arrays, batch_size: int = 2048) -> dict:
    """AUC, logloss and the ranking metrics of ``net`` on encoded samples."""
    from .model import map_batches

    y_hat = map_batches(net, arrays, batch_size)["y_hat"]
    labels = arrays.label
    out = {"auc": auc(y_hat, labels), "logloss": logloss(y_hat, labels)}
    out.update(corpus_metrics(group_lists(arrays.list_id, arrays.target_item, y_hat, labels)))
    out["samples"] = int(len(labels))
    return out


# ---------------------------------------------------------------------------
# fusion weight by behavior type


@dataclass
class AlphaReport:
    slices: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"slices": self.slices}

    @property
    def total(self) -> int:
        return int(sum(s["count"] for s in self.slices.values()))

    def mean_alpha(self, name: str) -> float | None:
        return self.slices[name]["mean_alpha"]


def alpha_report(net, slices: dict, batch_size: int = 2048) -> AlphaReport:
    """Mean fusion weight, AUC and logloss per evaluation slice.

    ``slices`` maps a slice name to encoded samples (or None / empty).
    """
    from .model import map_batches

    report = AlphaReport()
    for name, arrays in slices.items():
        if arrays is None or len(arrays) == 0:
            report.slices[name] = {"count": 0, "mean_alpha": None, "auc": None, "logloss": None}
            continue
        out = map_batches(net, arrays, batch_size)
        y = arrays.label
        defined = y.min() != y.max()
        report.slices[name] = {
            "count": int(len(y)),
            "mean_alpha": float(np.mean(out["alpha_fuse"])),
            "auc": auc(out["y_hat"], y) if defined else None,
            "logloss": logloss(out["y_hat"], y),
        }
    return report


def constraint_satisfaction(net, arrays, beta: float, batch_size: int = 2048) -> dict:
    """Share of proxy-valid samples with sim(u_long, p_long) > sim(u_long, p_short)."""
    from . import disentangle as dis
    from .model import map_batches

    def collect(batch, bundle):
        p_long, valid = dis.long_proxy(net, batch, beta)
        p_short = dis.short_proxy(net, batch)
        u_long = bundle.u_long.data
        gap = np.sum(u_long * p_long.data, axis=-1) - np.sum(u_long * p_short.data, axis=-1)
        return {"gap": gap, "valid": valid}

    out = map_batches(net, arrays, batch_size, collect)
    gap = out["gap"][out["valid"]]
    return {"rate": float(np.mean(gap > 0)) if len(gap) else None, "samples": int(len(gap))}


# ---------------------------------------------------------------------------
# ablations

FIXED_ALPHAS = (0.15, 0.3, 0.45, 0.6, 0.75, 0.9)

ARMS: dict[str, dict] = {
    "hifn": {},
    "hifn_star": {"sie_pooling": "mean"},
    "add_qdie": {"encoders": ["qdie"]},
    "add_tdie": {"encoders": ["tdie"]},
    "add_cdie": {"encoders": ["cdie"]},
    "wo_qdie": {"encoders": ["tdie", "cdie"]},
    "wo_tdie": {"encoders": ["qdie", "cdie"]},
    "wo_cdie": {"encoders": ["tdie", "qdie"]},
    "gate_mean": {"gate": "mean"},
    "lie_mean": {"lie_probe": "mean"},
    "lie_target": {"lie_probe": "target"},
    "lie_query": {"lie_probe": "query"},
    "lie_short": {"lie_probe": "short"},
    "ifm_concat": {"fusion": "concat"},
    **{f"ifm_fixed_{a}": {"fusion": "fixed", "fixed_alpha": a} for a in FIXED_ALPHAS},
    "proxy_whole_mean": {"proxy": "whole_mean"},
    "proxy_updating": {"proxy": "updating"},
    "lambda_0": {"lam": 0.0},
    "lambda_0.1": {"lam": 0.1},
}

MATRICES: dict[str, list[str]] = {
    "sie": ["add_qdie", "add_tdie", "add_cdie", "wo_cdie", "wo_tdie", "wo_qdie", "gate_mean", "hifn"],
    "modules": ["hifn", "wo_cdie", "wo_tdie", "wo_qdie", "gate_mean"],
    "lie": ["lie_mean", "lie_target", "lie_query", "lie_short"],
    "ifm": ["ifm_concat", *[f"ifm_fixed_{a}" for a in FIXED_ALPHAS], "hifn"],
    "proxy": ["proxy_whole_mean", "proxy_updating"],
    "idm": ["lambda_0", "lambda_0.1"],
}


def resolve_matrix(spec) -> dict[str, dict]:
    """Arm name -> config overrides.

    ``spec`` is a matrix name, a list of arm names, or a dict with either
    ``"matrix"``, ``"arms"`` (list of names) or ``"custom"`` (name -> overrides).
    """
    from .training import TrainConfig

    if isinstance(spec, str):
        if spec not in MATRICES:
            raise ConfigError(f"unknown ablation matrix {spec!r}; known: {sorted(MATRICES)}")
        names, custom = MATRICES[spec], {}
    elif isinstance(spec, (list, tuple)):
        names, custom = list(spec), {}
    elif isinstance(spec, dict):
        unknown = set(spec) - {"matrix", "arms", "custom"}
        if unknown:
            raise ConfigError(f"unknown ablation spec keys: {sorted(unknown)}")
        names = list(MATRICES[spec["matrix"]]) if "matrix" in spec else []
        if "matrix" in spec and spec["matrix"] not in MATRICES:
            raise ConfigError(f"unknown ablation matrix {spec['matrix']!r}")
        names += list(spec.get("arms", []))
        custom = dict(spec.get("custom", {}))
    else:
        raise ConfigError("ablation spec must be a matrix name, a list of arms or a dict")
    arms = {}
    for name in names:
        if name not in ARMS:
            raise ConfigError(f"unknown ablation arm {name!r}")
        arms[name] = ARMS[name]
    switches = set(TrainConfig().to_dict()) | {"lambda", "Ts", "L_max"}
    for name, overrides in custom.items():
        bad = set(overrides) - switches
        if bad:
            raise ConfigError(f"unknown switch in arm {name!r}: {sorted(bad)}")
        arms[name] = overrides
    if not arms:
        raise ConfigError("ablation spec names no arms")
    return arms


@dataclass
class AblationTable:
    metrics: Sequence[str]
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"metrics": list(self.metrics), "rows": self.rows}

    def summary(self, arm: str, metric: str) -> float:
        for r in self.rows:
            if r["arm"] == arm:
                return r[metric]["mean"]
        raise KeyError(arm)

    def to_text(self) -> str:
        head = ["arm", *self.metrics]
        cells = [[r["arm"], *[f"{r[m]['mean']:.4f} ± {r[m]['std']:.4f}" for m in self.metrics]] for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *cells)]
        lines = ["  ".join(str(h).ljust(w) for h, w in zip(head, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in cells]
        return "\n".join(lines)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def run_ablation(spec, base, data, n_repeats: int = 1, metrics: Sequence[str] = ("auc", "logloss", "ndcg@10", "mrr", "map"), split: str = "test", on_run=None) -> AblationTable:
    """Train every arm on the same data with the same seeds; mean ± std per metric.

    ``base`` is a :class:`~hifn.training.TrainConfig`; ``data`` a
    :class:`~hifn.training.PreparedData`. Seeds follow the repeat runner
    (base + 1 .. base + n), and are shared by every arm.
    """
    from .training import fit, repeat_seeds

    arms = resolve_matrix(spec)
    cache: dict = {}
    table = AblationTable(list(metrics))
    seeds = repeat_seeds(base.rng_seed, n_repeats)
    for name, overrides in arms.items():
        cfg = base.replace(**overrides)
        model_cfg = cfg.model_config(data.vocab.sizes())
        key = (cfg.short_len, cfg.long_len, cfg.max_windows)
        if key not in cache:
            cache[key] = data.arrays(model_cfg, cfg.max_windows)
        arrays = cache[key]
        runs = []
        for seed in seeds:
            res = fit(cfg.replace(rng_seed=seed), model_cfg, arrays["train"], arrays.get("valid"))
            m = evaluate(res.net, arrays[split], cfg.eval_batch_size)
            runs.append({k: m[k] for k in metrics})
            if on_run:
                on_run(name, seed, m, res)
        row = {"arm": name, "overrides": overrides, "runs": runs}
        for k in metrics:
            v = [r[k] for r in runs]
            row[k] = {"mean": float(np.mean(v)), "std": float(np.std(v))}
        table.rows.append(row)
    return table
