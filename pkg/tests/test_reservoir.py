import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import emd_linprog

from gagstream.errors import ContractError
from gagstream.model import GAGModel, ModelConfig, loss
from gagstream.reservoir import (
    DistanceKind,
    Reservoir,
    UpdateSet,
    advance,
    build_update_set,
    distances,
    distribution_distance,
    load_reservoir,
    maybe_store,
    online_update,
    save_reservoir,
    weighted_sample,
)
from gagstream.session_graph import Session, prefix_examples

W, KL, TV = DistanceKind.WASSERSTEIN, DistanceKind.KL, DistanceKind.TOTAL_VARIATION


class FixedRandom:
    """Generator stand-in returning a scripted uniform draw."""

    def __init__(self, u):
        self.u = u
        self.replaced = None

    def random(self):
        return self.u

    def integers(self, n):
        self.replaced = n - 1
        return n - 1


class TestMaybeStore:
    def test_fill_phase(self):
        r = Reservoir(5, ["a", "b", "c"], t=3)
        maybe_store(r, "d", FixedRandom(0.999))
        assert r.entries[-1] == "d" and r.t == 4

    def test_probability_quarter(self):
        # t becomes 400, so storage happens iff u < 100 / 400
        full = list(range(100))
        r = Reservoir(100, list(full), t=399)
        maybe_store(r, "x", FixedRandom(0.2499))
        assert "x" in r.entries
        r = Reservoir(100, list(full), t=399)
        maybe_store(r, "x", FixedRandom(0.25))
        assert "x" not in r.entries and r.t == 400

    def test_boundary_always_stored(self):
        r = Reservoir(100, list(range(99)), t=99)
        maybe_store(r, "x", FixedRandom(0.999))
        assert r.entries[-1] == "x" and r.t == 100

    def test_empirical_quarter(self):
        rng = np.random.default_rng(0)
        stored = 0
        for _ in range(4000):
            r = Reservoir(100, list(range(100)), t=399)
            maybe_store(r, "x", rng)
            stored += "x" in r.entries
        assert abs(stored / 4000 - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 4000)

    def test_bad_capacity(self):
        with pytest.raises(ContractError):
            Reservoir(0)


class TestAdvance:
    def test_fill(self):
        r = advance(Reservoir(3), ["a", "b"], np.random.default_rng(0))
        assert r.entries == ["a", "b"] and r.t == 2

    def test_capacity_one(self):
        r = advance(Reservoir(1, ["z"], t=7), range(1000), np.random.default_rng(0))
        assert len(r) == 1 and r.t == 1007

    @given(st.integers(1, 20), st.integers(0, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=50)
    def test_invariants(self, cap, n, seed):
        r = advance(Reservoir(cap), range(n), np.random.default_rng(seed))
        assert len(r) == min(cap, n) <= cap
        assert r.t == n >= len(r)
        assert len(set(r.entries)) == len(r)

    def test_snapshot_roundtrip(self, tmp_path):
        sessions = [Session(u, (u, u + 1, 2), arrival_index=k, timestamp=10.0 * k) for k, u in enumerate(range(8))]
        r = advance(Reservoir(4), sessions, np.random.default_rng(3))
        path = tmp_path / "res.jsonl"
        save_reservoir(path, r)
        back = load_reservoir(path)
        assert back.capacity == 4 and back.t == 8
        assert back.entries == r.entries

    def test_resume_matches_uninterrupted(self, tmp_path):
        sessions = [Session(0, (k, k + 1), arrival_index=k) for k in range(30)]
        rng = np.random.default_rng(9)
        whole = advance(Reservoir(5), sessions, rng)
        rng = np.random.default_rng(9)
        half = advance(Reservoir(5), sessions[:15], rng)
        save_reservoir(tmp_path / "r.jsonl", half)
        resumed = advance(load_reservoir(tmp_path / "r.jsonl"), sessions[15:], rng)
        assert resumed.entries == whole.entries and resumed.t == whole.t


class TestDistances:
    @pytest.mark.parametrize("kind", list(DistanceKind))
    def test_onehot_is_zero(self, kind):
        assert distribution_distance(kind, 1, np.array([0.0, 1.0, 0.0])) == 0.0

    def test_kl_half(self):
        assert distribution_distance(KL, 0, np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)

    def test_kl_clamped(self):
        assert distribution_distance(KL, 0, np.array([0.0, 1.0])) == pytest.approx(-math.log(1e-12))

    def test_tv(self):
        assert distribution_distance(TV, 0, np.array([0.5, 0.3, 0.2])) == 0.5

    def test_tv_other_dominates(self):
        assert distribution_distance(TV, 2, np.array([0.05, 0.9, 0.05])) == pytest.approx(0.95)

    def test_wasserstein_examples(self):
        assert distribution_distance(W, 0, np.array([0.5, 0.5, 0.0])) == pytest.approx(0.5, abs=1e-15)
        assert distribution_distance(W, 0, np.array([0.0, 0.0, 1.0])) == 2.0

    def test_wasserstein_matches_transport_solver(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = int(rng.integers(2, 7))
            p = rng.dirichlet(np.ones(m))
            t = int(rng.integers(m))
            exact = emd_linprog(np.eye(m)[t], p)
            assert distribution_distance(W, t, p) == pytest.approx(exact, abs=1e-9)

    def test_unnormalised(self):
        with pytest.raises(ContractError):
            distribution_distance(W, 0, np.array([0.5, 0.6]))
        with pytest.raises(ContractError):
            distribution_distance(KL, 0, np.array([1.5, -0.5]))

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(7), size=5)
        targets = rng.integers(7, size=5)
        for kind in DistanceKind:
            batch = distances(kind, targets, probs)
            single = [distribution_distance(kind, int(t), p) for t, p in zip(targets, probs)]
            np.testing.assert_allclose(batch, single, rtol=0, atol=0)

    @given(st.integers(2, 12), st.integers(0, 2**32 - 1))
    @settings(max_examples=100)
    def test_bounds(self, m, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(m, 0.3))
        t = int(rng.integers(m))
        tv = distribution_distance(TV, t, p)
        w = distribution_distance(W, t, p)
        kl = distribution_distance(KL, t, p)
        assert 0 <= tv <= 1 + 1e-15
        assert 0 <= w <= m - 1 + 1e-12
        assert kl >= 0
        if p[t] < 1:
            assert tv > 0 and w > 0


class TestWeightedSample:
    def test_distinct(self):
        picks = weighted_sample([1, 2, 3, 4], 4, np.random.default_rng(0))
        assert sorted(picks) == [0, 1, 2, 3]

    def test_zero_weight_drawn_last(self):
        for seed in range(50):
            picks = weighted_sample([0, 1, 1, 0], 2, np.random.default_rng(seed))
            assert sorted(picks) == [1, 2]

    def test_all_zero_uniform(self):
        rng = np.random.default_rng(1)
        counts = np.bincount([weighted_sample([0, 0, 0], 1, rng)[0] for _ in range(3000)], minlength=3)
        assert (np.abs(counts / 3000 - 1 / 3) < 0.04).all()

    @pytest.mark.parametrize("weights,expected", [([2, 2], [0.5, 0.5]), ([1, 3], [0.25, 0.75])])
    def test_single_draw_probabilities(self, weights, expected):
        rng = np.random.default_rng(2)
        n = 20000
        counts = np.bincount([weighted_sample(weights, 1, rng)[0] for _ in range(n)], minlength=2)
        sigma = np.sqrt(np.array(expected) * (1 - np.array(expected)) / n)
        assert (np.abs(counts / n - expected) <= 4 * sigma).all()

    def test_second_draw_renormalised(self):
        # P(second = 2 | first = 0) = 3 / (1 + 3)
        rng = np.random.default_rng(5)
        firsts, hits = 0, 0
        for _ in range(20000):
            a, b = weighted_sample([4, 1, 3], 2, rng)
            if a == 0:
                firsts += 1
                hits += b == 2
        assert abs(hits / firsts - 0.75) < 0.02

    def test_negative_rejected(self):
        with pytest.raises(ContractError):
            weighted_sample([1, -1], 1, np.random.default_rng(0))


def tiny_model(m=12, n=4, seed=0):
    return GAGModel.create(ModelConfig(embed_dim=8, rng_seed=seed, batch_size=16), m, n)


class TestBuildUpdateSet:
    def setup_method(self):
        self.model = tiny_model()
        self.known_items = set(range(10))
        self.known_users = {0, 1, 2}
        self.reservoir = Reservoir(5, [Session(0, (1, 2, 3)), Session(1, (4, 5)), Session(2, (6, 7, 8))], t=3)

    def test_forced_always_included(self):
        novel = Session(1, (2, 11, 3))
        new = [Session(0, (1, 5)), Session(2, (7, 3)), novel]
        for seed in range(20):
            s = build_update_set(
                self.reservoir, new, self.model, 2, self.known_items, self.known_users, np.random.default_rng(seed)
            )
            assert s.sessions[0] is novel and s.forced_count == 1
            assert len(s.sessions) == 2
            assert len({id(x) for x in s.sessions}) == 2

    def test_novel_user_forced(self):
        new = [Session(3, (1, 2))]
        s = build_update_set(self.reservoir, new, self.model, 1, self.known_items, self.known_users, np.random.default_rng(0))
        assert s.forced_count == 1 and s.sessions == new

    def test_overflow_keeps_all_forced(self):
        new = [Session(3, (1, 2)), Session(0, (10, 11)), Session(1, (11, 1))]
        s = build_update_set(self.reservoir, new, self.model, 1, self.known_items, self.known_users, np.random.default_rng(0))
        assert s.sessions == new and s.forced_count == 3 and s.window_size == 1

    def test_without_forcing(self):
        new = [Session(3, (1, 2))]
        s = build_update_set(
            self.reservoir, new, self.model, 2, self.known_items, self.known_users,
            np.random.default_rng(0), force_novel=False,
        )
        assert s.forced_count == 0 and len(s.sessions) == 2

    def test_window_filled_when_pool_large_enough(self):
        new = [Session(0, (1, 5)), Session(2, (7, 3))]
        s = build_update_set(self.reservoir, new, self.model, 4, self.known_items, self.known_users, np.random.default_rng(0))
        assert len(s.sessions) == 4

    def test_small_pool(self):
        s = build_update_set(self.reservoir, [], self.model, 10, self.known_items, self.known_users, np.random.default_rng(0))
        assert len(s.sessions) == 3

    def test_deterministic(self):
        new = [Session(0, (1, 5)), Session(2, (7, 3)), Session(1, (9, 9, 4))]
        runs = [
            build_update_set(self.reservoir, new, self.model, 3, self.known_items, self.known_users, np.random.default_rng(4))
            for _ in range(2)
        ]
        assert runs[0].sessions == runs[1].sessions


def prefix_loss(model, sessions):
    ex = [e for s in sessions for e in prefix_examples(s)]
    return loss(model.predict([g for g, _ in ex]), [t for _, t in ex])


class TestOnlineUpdate:
    def test_zero_epochs(self):
        model = tiny_model()
        before = model.params.copy()
        online_update(model, UpdateSet([Session(0, (1, 2))], 0, 1), online_epochs=0)
        for k in before.tensors:
            assert before.tensors[k].tobytes() == model.params.tensors[k].tobytes()

    def test_empty_is_noop(self, caplog):
        model = tiny_model()
        online_update(model, UpdateSet([], 0, 1), online_epochs=3)
        assert model.params.step == 0
        assert "empty update set" in caplog.text

    def test_single_session_loss_drops(self):
        model = tiny_model()
        s = [Session(1, (3, 7, 2, 7))]
        start = prefix_loss(model, s)
        online_update(model, UpdateSet(s, 0, 1), online_epochs=200, rng=np.random.default_rng(0))
        assert prefix_loss(model, s) < start

    def test_descent_on_small_set(self):
        drops = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            model = tiny_model(seed=seed)
            sessions = [Session(int(rng.integers(4)), tuple(int(v) for v in rng.integers(12, size=4))) for _ in range(10)]
            before = prefix_loss(model, sessions)
            online_update(model, UpdateSet(sessions, 0, 10), online_epochs=1, rng=rng)
            drops.append(before - prefix_loss(model, sessions))
        assert np.mean(drops) > 0

    def test_deterministic(self):
        s = UpdateSet([Session(1, (3, 7, 2)), Session(2, (1, 1, 5))], 0, 2)
        a, b = tiny_model(), tiny_model()
        online_update(a, s, 2, np.random.default_rng(1))
        online_update(b, s, 2, np.random.default_rng(1))
        assert a.params.item_embeddings.tobytes() == b.params.item_embeddings.tobytes()
