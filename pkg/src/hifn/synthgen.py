"""Synthetic behavior logs with known long- and short-term generating factors.

Each user owns a stable category affinity and a stable item taste. Events
come in sessions that share a focus category (and a session-level item
taste); the focus drifts between sessions with ``short_drift_prob``. An
event of behavior type ``b`` draws its category from the long-term
affinity with probability ``behavior_cost_bias[b]`` (tag ``long``), else
takes the session focus (tag ``short``). The item inside the category is
then picked by the matching taste vector.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datamodel import BehaviorType

__all__ = [
    "SynthConfig",
    "GroundTruth",
    "ConfigError",
    "generate",
    "category_names",
    "oracle_scores",
]


class ConfigError(ValueError):
    """A generator or training configuration violates an invariant."""


_FIRST = ["Sports", "Home", "Kids", "Outdoor", "Office", "Travel", "Garden", "Pet", "Kitchen", "Beauty"]
_SECOND = ["Shoes", "Toys", "Games", "Tools", "Bags", "Books", "Lights", "Decor", "Gear", "Wear"]


def category_names(n: int) -> list[str]:
    """Distinct two-word category names; words are shared across names."""
    width = max(1, min(len(_FIRST), math.ceil(math.sqrt(n))))
    names = []
    for c in range(n):
        a, b = _FIRST[c % width], _SECOND[(c // width) % len(_SECOND)]
        lap = c // (width * len(_SECOND))
        names.append(f"{a} & {b}" + (f" {lap}" if lap else ""))
    return names


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_items: int = 2000
    n_categories: int = 20
    events_per_user: tuple[int, int] = (30, 60)
    long_factor_dim: int = 8
    short_session_length: int = 8
    short_drift_prob: float = 0.7
    behavior_cost_bias: dict = field(
        default_factory=lambda: {"click": 0.2, "favorite": 0.5, "purchase": 0.8}
    )
    behavior_mix: dict = field(
        default_factory=lambda: {"click": 0.6, "favorite": 0.2, "purchase": 0.2}
    )
    affinity_scale: float = 2.0
    taste_sharpness: float = 3.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 1 or self.n_categories < 1:
            raise ConfigError("n_users, n_items and n_categories must be positive")
        if self.n_items < 2 * self.n_categories:
            raise ConfigError("need at least two items per category for negative sampling")
        lo, hi = self.events_per_user
        if lo < 1 or hi < lo:
            raise ConfigError("events_per_user must be a range (lo, hi) with 1 <= lo <= hi")
        if self.short_session_length < 1 or self.long_factor_dim < 1:
            raise ConfigError("short_session_length and long_factor_dim must be positive")
        if not 0.0 <= self.short_drift_prob <= 1.0:
            raise ConfigError("short_drift_prob must lie in [0, 1]")
        bias = self.behavior_cost_bias
        if set(bias) != {"click", "favorite", "purchase"}:
            raise ConfigError("behavior_cost_bias needs click, favorite and purchase")
        if any(not 0.0 <= v <= 1.0 for v in bias.values()):
            raise ConfigError("behavior_cost_bias values must lie in [0, 1]")
        if not bias["purchase"] >= bias["favorite"] >= bias["click"]:
            raise ConfigError(
                "behavior_cost_bias must respect cost ordering purchase >= favorite >= click"
            )
        mix = self.behavior_mix
        if set(mix) != {"click", "favorite", "purchase"} or any(v < 0 for v in mix.values()):
            raise ConfigError("behavior_mix needs non-negative click, favorite and purchase")
        if sum(mix.values()) <= 0:
            raise ConfigError("behavior_mix must not be all zero")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        obj = dict(obj)
        if "events_per_user" in obj:
            obj["events_per_user"] = tuple(obj["events_per_user"])
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["events_per_user"] = list(self.events_per_user)
        return d


@dataclass
class GroundTruth:
    """Generating factors; never part of the behavior log itself."""

    category_affinity: dict[int, list[float]]
    session_focus: dict[int, list[int]]
    event_tags: list[dict]
    item_factors: np.ndarray
    item_category: np.ndarray
    user_taste: dict[int, list[float]]
    session_taste: dict[int, list[list[float]]]

    def sidecar_lines(self) -> list[str]:
        return [json.dumps(t, separators=(",", ":")) for t in self.event_tags]

    def factors_json(self) -> dict:
        return {
            "category_affinity": {str(k): v for k, v in self.category_affinity.items()},
            "session_focus": {str(k): v for k, v in self.session_focus.items()},
            "user_taste": {str(k): v for k, v in self.user_taste.items()},
            "session_taste": {str(k): v for k, v in self.session_taste.items()},
            "item_factors": self.item_factors.tolist(),
            "item_category": self.item_category.tolist(),
        }


_TYPES = [BehaviorType.CLICK, BehaviorType.FAVORITE, BehaviorType.PURCHASE]


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def generate(config: SynthConfig) -> tuple[str, GroundTruth]:
    """Return the behavior-log TSV text and its ground truth."""
    config.validate()
    k = config.long_factor_dim
    seed = int(config.rng_seed)
    item_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x17E5]))
    item_factors = item_rng.standard_normal((config.n_items, k))
    item_category = np.arange(config.n_items) % config.n_categories
    by_cat = [np.flatnonzero(item_category == c) for c in range(config.n_categories)]
    names = category_names(config.n_categories)

    def pick_item(rng, cat: int, taste: np.ndarray) -> int:
        pool = by_cat[cat]
        logits = config.taste_sharpness * (item_factors[pool] @ taste) / math.sqrt(k)
        return int(pool[rng.choice(len(pool), p=_softmax(logits))])

    mix = np.array([config.behavior_mix[t.label] for t in _TYPES], dtype=float)
    mix /= mix.sum()
    bias = [config.behavior_cost_bias[t.label] for t in _TYPES]

    out = io.StringIO()
    out.write("user_id\ttimestamp\titem_id\tcategory\tbehavior_type\n")
    affinity, focus_log, tags, tastes, session_tastes = {}, {}, [], {}, {}
    for u in range(1, config.n_users + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, u]))
        aff = _softmax(rng.normal(0.0, config.affinity_scale, config.n_categories))
        taste = rng.standard_normal(k)
        n_events = int(rng.integers(config.events_per_user[0], config.events_per_user[1] + 1))
        ts = int(rng.integers(0, 30 * 86400))
        focus = int(rng.integers(config.n_categories))
        s_taste = rng.standard_normal(k)
        foci, s_tastes = [focus], [s_taste.tolist()]
        session = 0
        for idx in range(n_events):
            if idx and idx % config.short_session_length == 0:
                session += 1
                ts += int(rng.integers(3600, 48 * 3600))
                if rng.random() < config.short_drift_prob:
                    focus = int(rng.integers(config.n_categories))
                s_taste = rng.standard_normal(k)
                foci.append(focus)
                s_tastes.append(s_taste.tolist())
            elif idx:
                ts += int(rng.integers(30, 600))
            t = int(rng.choice(3, p=mix))
            if rng.random() < bias[t]:
                tag, cat = "long", int(rng.choice(config.n_categories, p=aff))
                item = pick_item(rng, cat, taste)
            else:
                tag, cat = "short", focus
                item = pick_item(rng, cat, s_taste)
            out.write(f"{u}\t{ts}\t{item + 1}\t{names[cat]}\t{_TYPES[t].label}\n")
            tags.append({"user_id": u, "event_index": idx, "factor_tag": tag, "session_id": session})
        affinity[u] = aff.tolist()
        focus_log[u] = foci
        tastes[u] = taste.tolist()
        session_tastes[u] = s_tastes
    truth = GroundTruth(affinity, focus_log, tags, item_factors, item_category, tastes, session_tastes)
    return out.getvalue(), truth


def oracle_scores(
    truth: GroundTruth,
    config: SynthConfig,
    user: int,
    session_id: int,
    behavior: str,
    candidates: list[int],
) -> np.ndarray:
    """Generative likelihood of each raw candidate item for one event.

    Mixes the long-term and session-level item choice probabilities with
    the true cost bias; uses the generator's own latent factors.
    """
    k = config.long_factor_dim
    b = config.behavior_cost_bias[behavior]
    aff = np.asarray(truth.category_affinity[user])
    taste = np.asarray(truth.user_taste[user])
    s_taste = np.asarray(truth.session_taste[user][session_id])
    focus = truth.session_focus[user][session_id]
    scores = []
    for raw in candidates:
        j = raw - 1
        cat = int(truth.item_category[j])
        pool = np.flatnonzero(truth.item_category == cat)
        f = truth.item_factors[pool]
        pos = int(np.flatnonzero(pool == j)[0])
        p_long = _softmax(config.taste_sharpness * f @ taste / math.sqrt(k))[pos]
        p_short = _softmax(config.taste_sharpness * f @ s_taste / math.sqrt(k))[pos]
        scores.append(b * aff[cat] * p_long + (1 - b) * float(cat == focus) * p_short)
    return np.asarray(scores)
