"""Codeword scoring against brute-force oracles, chain bipartition, assembly."""

import math

import numpy as np
import pytest

from ddlc import core, dictionary
from ddlc.dictionary import (CategoryCodebook, ChainGraph, Codeword,
                             build_chain_graph, build_global_dictionary,
                             conditional_entropy, dominant_set_bipartition,
                             rank_codebook, rank_score, select_codewords,
                             tfidf_score)


def random_codebooks(rng, num_classes, max_per_class=40, dim=4):
    books = []
    for label in range(num_classes):
        n = int(rng.integers(2, max_per_class + 1))
        vectors = rng.normal(scale=3.0, size=(n, dim))
        books.append(CategoryCodebook(
            label, [Codeword(v, label) for v in vectors]
        ))
    return books


def score_oracle(codeword, all_codebooks, t):
    """Hand-rolled retrieval + histogram, independent of the library path.

    Full sort of python-computed distances over the flattened union, skipping
    the query's own slot; entropy and same-label fraction from the counts.
    """
    flat = []
    for cb in sorted(all_codebooks, key=lambda b: b.label):
        for c in cb.codewords:
            flat.append(c)
    scored = []
    for i, c in enumerate(flat):
        if c is codeword:
            continue
        d = math.dist(codeword.vector.tolist(), c.vector.tolist())
        scored.append((d, i, c.label))
    scored.sort(key=lambda item: (item[0], item[1]))
    labels = [label for _, _, label in scored[:t]]
    hist = {}
    for l in labels:
        hist[l] = hist.get(l, 0) + 1
    h = -sum((n / t) * math.log2(n / t) for n in hist.values())
    ti = hist.get(codeword.label, 0) / t
    return h, ti


class TestScoringExamples:
    def two_class_layout(self):
        """Class 0 has a tight pack of 5; class 1 a tight pack of 5 far away."""
        a = [Codeword([float(i) / 100.0, 0.0], 0) for i in range(5)]
        b = [Codeword([50.0 + i / 100.0, 0.0], 1) for i in range(5)]
        return [CategoryCodebook(0, a), CategoryCodebook(1, b)]

    def test_unanimous_neighbors_zero_entropy(self):
        books = self.two_class_layout()
        c = books[0].codewords[0]
        assert conditional_entropy(c, books, t=4) == 0.0
        assert tfidf_score(c, books, t=4) == 1.0

    def test_uniform_four_class_entropy(self):
        """T=4 neighbors spread over 4 classes -> 2 bits."""
        center = Codeword([0.0, 0.0], 0)
        books = [CategoryCodebook(0, [center, Codeword([0.0, 1.0], 0)])]
        for label, away in ((1, [1.0, 0.0]), (2, [-1.0, 0.0]), (3, [0.0, -1.0])):
            books.append(CategoryCodebook(label, [Codeword(away, label)]))
        assert conditional_entropy(center, books, t=4) == pytest.approx(2.0)
        assert tfidf_score(center, books, t=4) == pytest.approx(0.25)

    def test_half_quarter_quarter_entropy(self):
        """Labels (a, a, b, c) at T=4 -> 1.5 bits."""
        q = Codeword([0.0], 0)
        books = [
            CategoryCodebook(0, [q, Codeword([1.0], 0), Codeword([2.0], 0)]),
            CategoryCodebook(1, [Codeword([3.0], 1)]),
            CategoryCodebook(2, [Codeword([4.0], 2)]),
        ]
        assert conditional_entropy(q, books, t=4) == pytest.approx(1.5)
        assert tfidf_score(q, books, t=4) == pytest.approx(0.5)

    def test_no_shared_labels(self):
        books = self.two_class_layout()
        c = books[0].codewords[0]
        assert tfidf_score(c, books, t=5) == pytest.approx(4.0 / 5.0)
        # all five class-1 codewords plus nothing of class 0 left at t=9
        assert tfidf_score(c, books, t=9) == pytest.approx(4.0 / 9.0)

    def test_t_must_leave_neighbors(self):
        books = self.two_class_layout()
        with pytest.raises(core.ParameterError):
            conditional_entropy(books[0].codewords[0], books, t=10)

    def test_foreign_codeword_rejected(self):
        books = self.two_class_layout()
        stranger = Codeword([0.0, 0.0], 0)
        with pytest.raises(core.ParameterError):
            conditional_entropy(stranger, books, t=2)


class TestScoringOracle:
    def test_matches_brute_force_on_random_codebooks(self):
        rng = np.random.default_rng(2024)
        for _ in range(25):
            num_classes = int(rng.integers(2, 6))
            books = random_codebooks(rng, num_classes, max_per_class=20,
                                     dim=int(rng.integers(2, 8)))
            total = sum(len(b) for b in books)
            t = int(rng.integers(1, min(total - 1, 15) + 1))
            cb = books[int(rng.integers(0, num_classes))]
            c = cb.codewords[int(rng.integers(0, len(cb)))]
            h_oracle, ti_oracle = score_oracle(c, books, t)
            assert conditional_entropy(c, books, t) == pytest.approx(h_oracle, abs=1e-12)
            assert tfidf_score(c, books, t) == pytest.approx(ti_oracle, abs=1e-12)


class TestRankScore:
    def test_clamped_zero_entropy(self):
        assert rank_score(0.0, 1.0, w1=0.5, h_floor=0.1) == pytest.approx(5.5)

    def test_w1_zero_is_pure_tfidf(self):
        assert rank_score(1.3, 0.77, w1=0.0, h_floor=0.1) == pytest.approx(0.77)

    def test_monotone_in_entropy(self):
        lo = rank_score(0.5, 0.4, w1=0.5, h_floor=0.1)
        hi = rank_score(1.5, 0.4, w1=0.5, h_floor=0.1)
        assert lo > hi

    def test_range_checks(self):
        with pytest.raises(core.ParameterError):
            rank_score(-0.1, 0.5)
        with pytest.raises(core.ParameterError):
            rank_score(0.5, 1.5)
        with pytest.raises(core.ParameterError):
            rank_score(0.5, 0.5, w1=2.0)


class TestRankCodebook:
    def test_single_codeword(self):
        books = [
            CategoryCodebook(0, [Codeword([0.0], 0)]),
            CategoryCodebook(1, [Codeword([1.0], 1), Codeword([2.0], 1)]),
        ]
        ranked = rank_codebook(books[0], books, t=2)
        assert len(ranked) == 1
        c = ranked.codewords[0]
        assert c.entropy_h is not None and c.tfidf is not None and c.rank is not None

    def test_pure_neighborhood_ranks_first(self):
        """A codeword inside its own class pack beats one inside the other's."""
        pack0 = [Codeword([float(i) / 10.0], 0) for i in range(6)]
        stray = Codeword([50.0], 0)  # surrounded by class 1
        pack1 = [Codeword([50.0 + (i + 1) / 10.0], 1) for i in range(6)]
        books = [CategoryCodebook(0, pack0 + [stray]), CategoryCodebook(1, pack1)]
        ranked = rank_codebook(books[0], books, t=4)
        assert ranked.codewords[-1].vector[0] == pytest.approx(50.0)
        # hand-scored: stray has H=0 but TI=0; pack members have H=0, TI=1
        assert ranked.codewords[-1].tfidf == 0.0
        assert ranked.codewords[0].tfidf == 1.0

    def test_output_is_permutation(self):
        rng = np.random.default_rng(5)
        books = random_codebooks(rng, 3, max_per_class=12)
        ranked = rank_codebook(books[1], books, t=5)
        original = sorted(map(tuple, books[1].vectors().tolist()))
        returned = sorted(map(tuple, ranked.vectors().tolist()))
        assert original == returned

    def test_descending_rank_order(self):
        rng = np.random.default_rng(6)
        books = random_codebooks(rng, 4, max_per_class=15)
        ranked = rank_codebook(books[2], books, t=6)
        ranks = [c.rank for c in ranked.codewords]
        assert ranks == sorted(ranks, reverse=True)


class TestBipartition:
    def chain(self, weights):
        nodes = [Codeword([float(i)], 0, rank=float(len(weights) - i))
                 for i in range(len(weights) + 1)]
        return ChainGraph(nodes, np.asarray(weights, dtype=float))

    def test_tight_pair_gap_tight_pair(self):
        """Edge weights (0.1, 9.0, 0.1) must separate {0,1} from {2,3}.

        Oracle: of the 3 possible chain cuts, cutting the middle edge is the
        unique one whose within-side affinities dominate the cut affinity.
        """
        weights = np.array([0.1, 9.0, 0.1])
        g = self.chain(weights)
        sigma = float(weights.mean())
        cut_scores = [np.exp(-w / sigma) for w in weights]
        assert np.argmin(cut_scores) == 1  # weakest link is the middle edge
        assert np.exp(-0.1 / sigma) > np.exp(-9.0 / sigma)
        a, b = dominant_set_bipartition(g, sigma)
        sides = {tuple(sorted(a)), tuple(sorted(b))}
        assert sides == {(0, 1), (2, 3)}

    def test_two_nodes(self):
        g = self.chain([1.0])
        a, b = dominant_set_bipartition(g, 1.0)
        assert (list(a), list(b)) == ([0], [1])

    def test_partition_covers_everything(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            g = self.chain(rng.uniform(0.1, 5.0, size=n - 1))
            a, b = dominant_set_bipartition(g, 1.0)
            assert len(a) > 0 and len(b) > 0
            assert sorted(list(a) + list(b)) == list(range(n))
            assert set(a).isdisjoint(b)

    def test_deterministic(self):
        g = self.chain([0.5, 3.0, 0.2, 0.9])
        first = dominant_set_bipartition(g, 1.1)
        second = dominant_set_bipartition(g, 1.1)
        assert list(first[0]) == list(second[0])
        assert list(first[1]) == list(second[1])

    def test_single_node_rejected(self):
        g = ChainGraph([Codeword([0.0], 0, rank=1.0)], np.empty(0))
        with pytest.raises(core.ParameterError):
            dominant_set_bipartition(g, 1.0)


class TestSelectCodewords:
    def ranked(self, ranks):
        words = [Codeword([float(i)], 0, entropy_h=0.0, tfidf=0.0, rank=r)
                 for i, r in enumerate(ranks)]
        return CategoryCodebook(0, words)

    def test_top_half_of_decreasing_list(self):
        cb = self.ranked([9.0, 8.0, 7.0, 2.0, 1.0, 0.5])
        out = select_codewords(cb, (np.array([0, 1, 2]), np.array([3, 4, 5])))
        assert [c.rank for c in out.codewords] == [9.0, 8.0, 7.0]

    def test_mean_rank_comparison(self):
        """Single top node vs a rest whose mean is higher."""
        cb = self.ranked([10.0, 9.5, 9.4, 9.3])
        out = select_codewords(cb, (np.array([0]), np.array([1, 2, 3])))
        # mean({10.0}) = 10.0 beats mean({9.5, 9.4, 9.3}) = 9.4
        assert [c.rank for c in out.codewords] == [10.0]
        cb = self.ranked([10.0, 9.9, 9.8, 1.0])
        out = select_codewords(cb, (np.array([3]), np.array([0, 1, 2])))
        assert [c.rank for c in out.codewords] == [10.0, 9.9, 9.8]

    def test_subset_of_input(self):
        cb = self.ranked([5.0, 4.0, 3.0])
        out = select_codewords(cb, (np.array([0, 2]), np.array([1])))
        originals = {id(c) for c in cb.codewords}
        assert all(id(c) in originals for c in out.codewords)

    def test_partition_must_cover(self):
        cb = self.ranked([5.0, 4.0, 3.0])
        with pytest.raises(core.ValidationError):
            select_codewords(cb, (np.array([0]), np.array([1])))


class TestGlobalDictionary:
    def books(self):
        return [
            CategoryCodebook(1, [Codeword([float(i), 1.0], 1) for i in range(5)]),
            CategoryCodebook(0, [Codeword([float(i), 0.0], 0) for i in range(3)]),
        ]

    def test_sizes_and_counts(self):
        gd = build_global_dictionary(self.books())
        assert len(gd) == 8
        assert gd.per_class_counts == [3, 5]
        assert gd.dim == 2

    def test_input_order_is_canonicalized(self):
        gd_a = build_global_dictionary(self.books())
        gd_b = build_global_dictionary(list(reversed(self.books())))
        np.testing.assert_array_equal(gd_a.matrix(), gd_b.matrix())
        np.testing.assert_array_equal(gd_a.label_array(), gd_b.label_array())

    def test_labels_follow_source_books(self):
        gd = build_global_dictionary(self.books())
        np.testing.assert_array_equal(gd.label_array(), [0, 0, 0, 1, 1, 1, 1, 1])

    def test_missing_class_named(self):
        books = [CategoryCodebook(0, [Codeword([0.0], 0)]),
                 CategoryCodebook(2, [Codeword([1.0], 2)])]
        with pytest.raises(core.ValidationError, match="class 1"):
            build_global_dictionary(books)

    def test_round_trip_through_files(self, tmp_path):
        rng = np.random.default_rng(13)
        books = random_codebooks(rng, 3, max_per_class=6, dim=3)
        ranked = [rank_codebook(cb, books, t=3) for cb in books]
        gd = build_global_dictionary(ranked)
        dictionary.save_dictionary(gd, tmp_path / "dict.bin")
        back = dictionary.load_dictionary(tmp_path / "dict.bin")
        assert back.per_class_counts == gd.per_class_counts
        np.testing.assert_array_equal(back.label_array(), gd.label_array())
        np.testing.assert_allclose(back.matrix(), gd.matrix(), atol=1e-6)
        for a, b in zip(back.codewords, gd.codewords):
            assert a.rank == pytest.approx(b.rank)
            assert a.entropy_h == pytest.approx(b.entropy_h)
            assert a.tfidf == pytest.approx(b.tfidf)

    def test_unranked_round_trip(self, tmp_path):
        gd = build_global_dictionary(self.books())
        dictionary.save_dictionary(gd, tmp_path / "dict.bin")
        back = dictionary.load_dictionary(tmp_path / "dict.bin")
        assert all(c.rank is None for c in back.codewords)
