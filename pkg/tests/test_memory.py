import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smemvos.memory import (
    DuplicateFrameError,
    Embedding,
    EmbeddingDimensionMismatch,
    FrameOrderError,
    MemoryBank,
    MemoryEntry,
    ProtectedBankError,
    freshness,
    relevance,
    removal_score,
)


def bank_of(vectors, frames, lam=1.0, tau_mem=0.85, protected=None, capacity=None):
    bank = MemoryBank(lam=lam, tau_mem=tau_mem, capacity_limit=capacity)
    protected = protected or set()
    for i, (vec, f) in enumerate(zip(vectors, frames)):
        bank.insert(MemoryEntry(f, Embedding(vec), protected=(i in protected)))
    return bank


def oracle_cosine(a, b):
    num = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    if list(a) == list(b):
        return 1.0  # identical keys score exactly 1 (documented semantics)
    return max(-1.0, min(1.0, num / (na * nb)))


def oracle_evict(entries, current, current_frame, lam):
    """Exhaustive argmax over removal scores with the oldest-wins tie-break."""
    best = None
    for idx, (vec, f, prot) in enumerate(entries):
        if prot:
            continue
        score = oracle_cosine(vec, current) * (1.0 + lam / (current_frame - f))
        if best is None or score > best[1]:
            best = (idx, score)
    return best


class TestEmbedding:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Embedding([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            Embedding([float("inf"), 0.0])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Embedding([])

    def test_dim_matches_length(self):
        e = Embedding([1.0, 2.0, 3.0])
        assert e.dim == 3
        assert list(e.values) == [1.0, 2.0, 3.0]

    def test_values_immutable(self):
        e = Embedding([1.0, 2.0])
        with pytest.raises(ValueError):
            e.values[0] = 5.0


class TestRelevance:
    def test_identical_vectors(self):
        assert relevance(Embedding([1, 0, 0]), Embedding([1, 0, 0])) == 1.0

    def test_orthogonal_vectors(self):
        assert relevance(Embedding([1, 0]), Embedding([0, 1])) == 0.0

    def test_derived_value(self):
        # oracle: dot/(norm*norm) computed independently
        expected = oracle_cosine([1, 1, 0], [1, 0, 0])
        assert expected == pytest.approx(0.7071068, abs=1e-6)
        got = relevance(Embedding([1, 1, 0]), Embedding([1, 0, 0]))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_zero_norm_is_zero(self):
        assert relevance(Embedding([0, 0]), Embedding([1, 2])) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(EmbeddingDimensionMismatch):
            relevance(Embedding([1, 0]), Embedding([1, 0, 0]))

    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=8),
        st.floats(0.1, 100.0),
    )
    def test_scale_invariance(self, values, scale):
        a = Embedding(values)
        b = Embedding([v * scale for v in values])
        ref = Embedding([1.0] + [0.0] * (len(values) - 1))
        assert relevance(a, ref) == pytest.approx(relevance(b, ref), abs=1e-9)


class TestFreshness:
    def test_age_one(self):
        assert freshness(4, 5) == 1.0

    def test_age_ten(self):
        assert freshness(0, 10) == 0.1

    def test_age_four(self):
        assert freshness(2, 6) == 0.25

    def test_future_frame_rejected(self):
        with pytest.raises(FrameOrderError):
            freshness(5, 5)
        with pytest.raises(FrameOrderError):
            freshness(6, 5)


class TestRemovalScore:
    def test_closed_form(self):
        assert removal_score(0.9, 1.0, 1.0) == pytest.approx(1.8)

    def test_zero_relevance_annihilates(self):
        assert removal_score(0.0, 0.5, 3.0) == 0.0

    def test_closed_form_2(self):
        assert removal_score(0.5, 0.1, 2.0) == pytest.approx(0.6)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            removal_score(0.5, 0.5, -1.0)


class TestEvictCandidate:
    def test_spec_example_scores(self):
        bank = bank_of(
            [[1, 0], [0, 1], [0.7071, 0.7071]], [0, 1, 2], lam=1.0
        )
        got = bank.evict_candidate(Embedding([1, 0]), 3)
        assert got is not None
        idx, score = got
        # brute-force enumeration of all three scores
        oracle = oracle_evict(
            [([1, 0], 0, False), ([0, 1], 1, False), ([0.7071, 0.7071], 2, False)],
            [1, 0],
            3,
            1.0,
        )
        assert idx == oracle[0] == 2
        assert score == pytest.approx(oracle[1], abs=1e-12)
        assert score == pytest.approx(1.4142, abs=1e-4)

    def test_empty_bank(self):
        bank = MemoryBank()
        assert bank.evict_candidate(Embedding([1, 0]), 5) is None

    def test_tie_break_smallest_frame(self):
        # identical keys, lambda 0 -> identical scores -> oldest wins
        bank = bank_of([[1, 0], [1, 0]], [0, 1], lam=0.0)
        got = bank.evict_candidate(Embedding([1, 0]), 2)
        assert got is not None and got[0] == 0

    def test_all_protected_returns_none(self):
        bank = bank_of([[1, 0], [0, 1]], [0, 1], protected={0, 1})
        assert bank.evict_candidate(Embedding([1, 0]), 2) is None

    def test_dim_mismatch(self):
        bank = bank_of([[1, 0]], [0])
        with pytest.raises(EmbeddingDimensionMismatch):
            bank.evict_candidate(Embedding([1, 0, 0]), 1)

    def test_stale_current_frame_rejected(self):
        bank = bank_of([[1, 0]], [4])
        with pytest.raises(FrameOrderError):
            bank.evict_candidate(Embedding([1, 0]), 4)

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(20240817)
        for _ in range(300):
            n = int(rng.integers(1, 9))
            dim = int(rng.integers(1, 17))
            lam = float(rng.uniform(0, 3)) if rng.random() < 0.8 else 0.0
            vectors = rng.normal(size=(n, dim)).round(3)
            if rng.random() < 0.3 and n >= 2:
                vectors[1] = vectors[0]  # force potential ties
            frames = sorted(rng.choice(200, size=n, replace=False).tolist())
            protected = {0} if rng.random() < 0.4 else set()
            bank = bank_of(vectors.tolist(), frames, lam=lam, protected=protected)
            current = rng.normal(size=dim).round(3)
            entries = [
                (vectors[i].tolist(), frames[i], i in protected)
                for i in range(n)
            ]
            expected = oracle_evict(entries, current.tolist(), 200, lam)
            got = bank.evict_candidate(Embedding(current), 200)
            if expected is None:
                assert got is None
            else:
                assert got is not None and got[0] == expected[0]

    def test_scale_invariance_of_selection(self):
        rng = np.random.default_rng(7)
        vectors = rng.normal(size=(5, 6))
        frames = [0, 2, 3, 7, 9]
        current = rng.normal(size=6)
        bank_a = bank_of(vectors.tolist(), frames)
        bank_b = bank_of((vectors * 13.7).tolist(), frames)
        got_a = bank_a.evict_candidate(Embedding(current), 12)
        got_b = bank_b.evict_candidate(Embedding(current * 13.7), 12)
        assert got_a[0] == got_b[0]


class TestUpdate:
    def spec_bank(self, tau_mem):
        return bank_of(
            [[1, 0], [0, 1], [0.7071, 0.7071]], [0, 1, 2], tau_mem=tau_mem
        )

    def test_replacement_branch(self):
        bank = self.spec_bank(tau_mem=0.6)
        report = bank.update(Embedding([1, 0]), 3)
        assert report.action == "replace"
        assert report.removed_frame == 2
        assert len(bank) == 3
        assert bank.frame_indices() == [0, 1, 3]

    def test_growth_branch(self):
        bank = self.spec_bank(tau_mem=0.8)
        report = bank.update(Embedding([1, 0]), 3)
        assert report.action == "grow"
        assert report.removed_frame is None
        assert len(bank) == 4

    def test_identical_stream_stays_constant(self):
        bank = MemoryBank(tau_mem=0.5)
        bank.insert(MemoryEntry(0, Embedding([1, 1]), protected=True))
        sizes = []
        for t in range(1, 40):
            bank.update(Embedding([1, 1]), t)
            sizes.append(len(bank))
        assert sizes[0] == 2
        assert all(s == 2 for s in sizes)

    def test_duplicate_frame_rejected(self):
        bank = bank_of([[1, 0]], [5])
        with pytest.raises(DuplicateFrameError):
            bank.update(Embedding([1, 0]), 5)

    def test_older_frame_rejected(self):
        bank = bank_of([[1, 0]], [5])
        with pytest.raises(FrameOrderError):
            bank.update(Embedding([1, 0]), 3)

    def test_protected_never_removed(self):
        bank = bank_of([[1, 0], [1, 0]], [0, 1], protected={0}, tau_mem=0.0)
        for t in range(2, 30):
            bank.update(Embedding([1, 0]), t)
            assert bank.entries[0].frame_index == 0
            assert bank.entries[0].protected

    def test_capacity_forces_eviction(self):
        # orthogonal keys never clear tau, so the bank would grow without cap
        bank = MemoryBank(tau_mem=0.99, capacity_limit=3)
        dim = 8
        for t in range(3):
            v = np.zeros(dim)
            v[t] = 1.0
            bank.insert(MemoryEntry(t, Embedding(v)))
        v = np.zeros(dim)
        v[5] = 1.0
        report = bank.update(Embedding(v), 10)
        assert report.action == "capacity_evict"
        assert len(bank) == 3

    def test_capacity_with_only_protected_fails(self):
        bank = MemoryBank(tau_mem=0.99, capacity_limit=2)
        bank.insert(MemoryEntry(0, Embedding([1, 0]), protected=True))
        bank.insert(MemoryEntry(1, Embedding([0, 1]), protected=True))
        with pytest.raises(ProtectedBankError):
            bank.update(Embedding([1, 1]), 2)
        assert len(bank) == 2  # untouched
        assert bank.frame_indices() == [0, 1]

    def test_monotone_growth_bound(self):
        rng = np.random.default_rng(99)
        bank = MemoryBank(tau_mem=0.7)
        bank.insert(MemoryEntry(0, Embedding(rng.normal(size=4)), protected=True))
        low_rel_growths = 0
        for t in range(1, 120):
            current = Embedding(rng.normal(size=4))
            report = bank.update(current, t)
            if report.action == "grow" and (
                report.candidate_relevance is None
                or report.candidate_relevance < bank.tau_mem
            ):
                low_rel_growths += 1
            assert len(bank) <= 1 + 1 + low_rel_growths

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_update_size_delta_is_at_most_one(self, seed):
        rng = np.random.default_rng(seed)
        bank = MemoryBank(tau_mem=float(rng.uniform(-1, 1)))
        for t in range(12):
            before = len(bank)
            bank.update(Embedding(rng.normal(size=3)), t)
            assert len(bank) in (before, before + 1)
            assert bank.frame_indices() == sorted(bank.frame_indices())
