import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hifn import datamodel as dm
from hifn.synthgen import ConfigError, SynthConfig, category_names, generate, oracle_scores


def rows(tsv: str) -> list[list[str]]:
    return [line.split("\t") for line in tsv.strip().split("\n")[1:]]


def long_fraction(tsv, truth, behavior):
    tags = [t["factor_tag"] for r, t in zip(rows(tsv), truth.event_tags) if r[4] == behavior]
    return sum(t == "long" for t in tags) / len(tags), len(tags)


@pytest.fixture(scope="module")
def standard():
    cfg = SynthConfig(n_users=1000, n_items=2000, n_categories=20, rng_seed=0)
    return cfg, *generate(cfg)


class TestGenerate:
    def test_full_purchase_bias_is_all_long(self):
        cfg = SynthConfig(n_users=30, n_items=100, n_categories=5,
                          behavior_cost_bias={"click": 0.2, "favorite": 0.5, "purchase": 1.0})
        tsv, truth = generate(cfg)
        frac, n = long_fraction(tsv, truth, "purchase")
        assert n > 0 and frac == 1.0

    def test_zero_drift_keeps_one_focus(self):
        cfg = SynthConfig(n_users=30, n_items=100, n_categories=5, short_drift_prob=0.0)
        _, truth = generate(cfg)
        for foci in truth.session_focus.values():
            assert len(set(foci)) == 1

    def test_short_events_follow_session_focus(self):
        cfg = SynthConfig(n_users=30, n_items=100, n_categories=5)
        tsv, truth = generate(cfg)
        names = category_names(5)
        for r, tag in zip(rows(tsv), truth.event_tags):
            if tag["factor_tag"] == "short":
                focus = truth.session_focus[tag["user_id"]][tag["session_id"]]
                assert r[3] == names[focus]

    def test_purchase_long_fraction(self, standard):
        _, tsv, truth = standard
        frac, _ = long_fraction(tsv, truth, "purchase")
        assert abs(frac - 0.8) <= 0.03

    @pytest.mark.parametrize("behavior", ["click", "favorite", "purchase"])
    def test_long_frequency_within_three_sigma(self, standard, behavior):
        cfg, tsv, truth = standard
        p = cfg.behavior_cost_bias[behavior]
        frac, n = long_fraction(tsv, truth, behavior)
        assert abs(frac - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_one_tag_per_event(self, standard):
        _, tsv, truth = standard
        assert len(rows(tsv)) == len(truth.event_tags)
        assert {t["factor_tag"] for t in truth.event_tags} == {"long", "short"}

    def test_byte_identical(self):
        cfg = SynthConfig(n_users=50, n_items=100, n_categories=5, rng_seed=9)
        a, _ = generate(cfg)
        b, _ = generate(cfg)
        assert hashlib.sha256(a.encode()).digest() == hashlib.sha256(b.encode()).digest()
        c, _ = generate(SynthConfig(n_users=50, n_items=100, n_categories=5, rng_seed=10))
        assert a != c

    def test_passes_ingestion(self, tmp_path):
        cfg = SynthConfig(n_users=40, n_items=100, n_categories=5, rng_seed=2)
        tsv, _ = generate(cfg)
        path = tmp_path / "log.tsv"
        path.write_text(tsv)
        vocab, users, dropped = dm.ingest_log(path)
        assert len(users) + dropped == 40
        for evs in users.values():
            ts = [e.timestamp for e in evs]
            assert all(a < b for a, b in zip(ts, ts[1:]))
        splits, report = dm.prepare_dataset(vocab, users, seed=0, dropped=dropped)
        assert report.samples["test"] == 11 * report.positives["test"]

    def test_oracle_prefers_generating_category(self):
        cfg = SynthConfig(n_users=5, n_items=40, n_categories=4, rng_seed=1)
        _, truth = generate(cfg)
        focus = truth.session_focus[1][0]
        in_focus = [j + 1 for j in range(40) if truth.item_category[j] == focus]
        other = [j + 1 for j in range(40) if truth.item_category[j] != focus]
        s = oracle_scores(truth, cfg, 1, 0, "click", in_focus[:3] + other[:3])
        assert s.shape == (6,) and np.all(s >= 0)
        assert s[:3].sum() > 0


class TestConfig:
    def test_bias_ordering(self):
        cfg = SynthConfig(behavior_cost_bias={"click": 0.9, "favorite": 0.5, "purchase": 0.8})
        with pytest.raises(ConfigError, match="purchase >= favorite >= click"):
            cfg.validate()

    @pytest.mark.parametrize("field", ["n_users", "n_items"])
    def test_degenerate(self, field):
        with pytest.raises(ConfigError):
            generate(SynthConfig(**{field: 0}))

    def test_drift_range(self):
        with pytest.raises(ConfigError):
            SynthConfig(short_drift_prob=1.5).validate()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            SynthConfig.from_dict({"n_user": 3})

    def test_dict_roundtrip(self):
        cfg = SynthConfig(n_users=7, events_per_user=(20, 25))
        assert SynthConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400))
def test_category_names_distinct(n):
    names = category_names(n)
    assert len(set(names)) == n
    assert all(dm.tokenize_category(x) for x in names)
