import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hifn import disentangle as dis
from hifn import numkernel as nk
from hifn.model import Batch, encode_samples
from hifn.numkernel import Tensor

from conftest import perturb

FOUR_LN2 = 2.77258872223978123767
SOFTPLUS_MINUS_10 = 4.5398899216864646769e-05


def T(x):
    return Tensor(np.atleast_2d(np.asarray(x, dtype=float)))


def net_fn(net):
    def f(h):
        with nk.no_grad():
            return dis._proxy_net(net, Tensor(np.atleast_2d(h))).data[0]
    return f


vecs = arrays(np.float64, (2, 3), elements=st.floats(-3, 3))


class TestContrastive:
    def test_all_equal(self):
        v = T([0.3, -1.2, 2.0])
        loss, skipped = dis.contrastive_loss(v, v, v, v)
        assert abs(loss.item() - FOUR_LN2) < 1e-14 and skipped == 0

    def test_constructed_gap(self):
        x = math.sqrt(10.0)
        a, b = T([x, 0.0]), T([0.0, x])
        terms = dis.contrastive_terms(a, b, a, b)
        for t in terms:
            assert abs(t.item() - SOFTPLUS_MINUS_10) < 1e-18
        loss, _ = dis.contrastive_loss(a, b, a, b)
        assert abs(loss.item() - 4 * SOFTPLUS_MINUS_10) < 1e-17

    def test_term_one_decreases(self):
        p_long, p_short, u_short = T([1.0, 0.0]), T([0.0, 1.0]), T([0.5, 0.5])
        before = dis.contrastive_terms(T([1.0, 0.5]), u_short, p_long, p_short)[0].item()
        after = dis.contrastive_terms(T([1.0, 0.2]), u_short, p_long, p_short)[0].item()
        assert after < before

    def test_invalid_samples_skipped(self):
        rng = np.random.default_rng(0)
        u_l, u_s, p_l, p_s = (Tensor(rng.normal(size=(4, 3))) for _ in range(4))
        valid = np.array([True, False, True, False])
        loss, skipped = dis.contrastive_loss(u_l, u_s, p_l, p_s, valid)
        per = sum(t.data for t in dis.contrastive_terms(u_l, u_s, p_l, p_s))
        assert skipped == 2
        assert abs(loss.item() - per[valid].sum() / 4) < 1e-14

    def test_no_valid_sample(self):
        v = Tensor(np.ones((3, 2)))
        loss, skipped = dis.contrastive_loss(v, v, v, v, np.zeros(3, bool))
        assert loss.item() == 0.0 and skipped == 3

    @settings(max_examples=60, deadline=None)
    @given(vecs, vecs, vecs, vecs)
    def test_swap_symmetry(self, u_l, u_s, p_l, p_s):
        a, _ = dis.contrastive_loss(Tensor(u_l), Tensor(u_s), Tensor(p_l), Tensor(p_s))
        b, _ = dis.contrastive_loss(Tensor(u_s), Tensor(u_l), Tensor(p_s), Tensor(p_l))
        assert abs(a.item() - b.item()) <= 1e-12 * max(1.0, abs(a.item()))

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-20, 20), st.floats(0.01, 5))
    def test_bpr_positive_and_decreasing_in_margin(self, margin, step):
        def term(m):
            return dis.bpr(T([1.0, 0.0]), T([m, 0.0]), T([0.0, 1.0])).item()
        assert term(margin) > 0
        assert term(margin + step) < term(margin)


class TestUpdate:
    f = staticmethod(lambda h: np.tanh(2.0 * h))

    def window(self, seed, n=3):
        return np.random.default_rng(seed).normal(size=(n, 4))

    def test_beta_one_forgets(self):
        s = dis.update_long_proxy(dis.ProxyState.empty(4), self.window(0), 0.3, self.f, 3)
        s = dis.update_long_proxy(s, self.window(1), 1.0, self.f, 3)
        np.testing.assert_array_equal(s.p_long, self.f(self.window(1).mean(axis=0)))

    @pytest.mark.parametrize("beta", [0.1, 0.55, 1.0])
    def test_first_window_initializes(self, beta):
        s = dis.update_long_proxy(dis.ProxyState.empty(4), self.window(2), beta, self.f, 3)
        assert s.initialized and s.sessions_consumed == 1
        np.testing.assert_array_equal(s.p_long, self.f(self.window(2).mean(axis=0)))

    def test_beta_055_from_zero(self):
        s = dis.ProxyState(np.zeros(4), 1, True)
        s = dis.update_long_proxy(s, self.window(3), 0.55, self.f, 3)
        np.testing.assert_allclose(s.p_long, 0.55 * self.f(self.window(3).mean(axis=0)), atol=1e-16)
        assert s.sessions_consumed == 2

    def test_partial_window_ignored(self):
        s0 = dis.ProxyState.empty(4)
        assert dis.update_long_proxy(s0, self.window(4, n=2), 0.5, self.f, 3) is s0

    @pytest.mark.parametrize("beta", [0.0, -0.1, 1.5])
    def test_beta_range(self, beta):
        with pytest.raises(ValueError):
            dis.update_long_proxy(dis.ProxyState.empty(4), self.window(0), beta, self.f, 3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.floats(0.05, 1.0))
    def test_closed_form_matches_streaming(self, n, beta):
        wins = [self.window(100 + k) for k in range(n)]
        s = dis.ProxyState.empty(4)
        for w in wins:
            s = dis.update_long_proxy(s, w, beta, self.f, 3)
        w = dis.ema_weights(n, beta)
        closed = sum(wk * self.f(win.mean(axis=0)) for wk, win in zip(w, wins))
        np.testing.assert_allclose(s.p_long, closed, atol=1e-12)
        assert abs(w.sum() - 1.0) < 1e-12


class TestNetworkProxies:
    def test_short_proxy_masked_mean(self, small_net, small_batch):
        perturb(small_net)
        a, p = small_batch.arrays, small_net.params
        got = dis.proxy_inputs(small_net, small_batch)["short"]
        for r in range(small_batch.size):
            n = int(a.s_len[r])
            if n == 0:
                continue
            rows = [np.concatenate([p["emb.item"].data[a.s_item[r, j]], p["emb.category"].data[a.s_cat[r, j]],
                                    p["emb.behavior"].data[a.s_type[r, j]]]) for j in range(n)]
            np.testing.assert_allclose(got[r], np.mean(rows, axis=0), atol=1e-15)

    def test_short_proxy_symmetric_events(self, small_net):
        f = net_fn(perturb(small_net))
        e = np.random.default_rng(0).normal(size=small_net.cfg.event_dim)
        np.testing.assert_allclose(f(np.mean([e, -e], axis=0)), f(np.zeros_like(e)), atol=1e-15)

    def test_long_proxy_matches_streaming(self, tiny_data, small_net):
        perturb(small_net)
        samples = [s for s in tiny_data.splits["train"] if len(s.proxy_windows) >= 3][:10]
        arrays = encode_samples(samples, small_net.cfg)
        batch = Batch.build(arrays, small_net.cfg)
        with nk.no_grad():
            p_long, valid = dis.long_proxy(small_net, batch, 0.55)
        f = net_fn(small_net)
        p = small_net.params
        assert valid.all()
        for r, s in enumerate(samples):
            state = dis.ProxyState.empty(small_net.cfg.hidden_dim)
            for w in s.proxy_windows:
                emb = np.array([np.concatenate([p["emb.item"].data[i], p["emb.category"].data[c],
                                                p["emb.behavior"].data[t]]) for i, c, t in w])
                state = dis.update_long_proxy(state, emb, 0.55, f, small_net.cfg.short_len)
            np.testing.assert_allclose(p_long.data[r], state.p_long, atol=1e-12)

    def test_no_gradient_into_embedding_means(self, small_net, small_batch):
        small_net.params.zero_grad()
        p_short = dis.short_proxy(small_net, small_batch)
        nk.backward(nk.sum(p_short))
        assert small_net.params["emb.item"].grad is None or not np.any(small_net.params["emb.item"].grad)
        assert np.any(small_net.params["proxy.0.W"].grad)

    def test_uninitialized_samples_invalid(self, tiny_data, small_net):
        samples = tiny_data.splits["train"][:60]
        batch = Batch.build(encode_samples(samples, small_net.cfg), small_net.cfg)
        valid = dis.proxy_valid(small_net, batch)
        n_windows = np.array([len([w for w in s.proxy_windows if len(w) == 3]) for s in samples])
        np.testing.assert_array_equal(valid, n_windows > 0)
