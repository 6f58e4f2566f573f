import json
import math

import numpy as np
import pytest
from scipy import stats

from hccf import data as D
from hccf.errors import ContractError, DataError, EmptyDatasetError
from hccf.numcore import SparseMatrix


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def random_dataset(rng, users, items, density):
    hit = rng.random((users, items)) < density
    hit[np.arange(users), rng.integers(0, items, users)] = True
    hit[rng.integers(0, users, items), np.arange(items)] = True
    u, i = np.nonzero(hit)
    return D.from_pairs([(f"u{a}", f"i{b}") for a, b in zip(u, i)])


class TestLoad:
    def test_basic(self, tmp_path):
        ds = D.load_interactions(write(tmp_path, "a.csv", "a,x\na,y\nb,x\n"))
        assert (ds.num_users, ds.num_items, len(ds)) == (2, 2, 3)
        assert ds.user_ids == ["a", "b"] and ds.item_ids == ["x", "y"]

    def test_duplicates_collapsed(self, tmp_path):
        ds = D.load_interactions(write(tmp_path, "a.csv", "a,x\na,x\na,x\nb,y\n"))
        assert len(ds) == 2

    def test_extra_columns_ignored(self, tmp_path):
        ds = D.load_interactions(write(tmp_path, "a.tsv", "a\tx\t4.5\tfoo\nb\tx\tbar\n"), "tsv")
        assert len(ds) == 2

    def test_comments_skipped(self, tmp_path):
        ds = D.load_interactions(write(tmp_path, "a.csv", "# header\na,x\n\n# more\nb,y\n"))
        assert len(ds) == 2

    def test_malformed_row_reports_line(self, tmp_path):
        with pytest.raises(DataError, match=":3:"):
            D.load_interactions(write(tmp_path, "a.csv", "a,x\nb,y\nbroken\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            D.load_interactions(write(tmp_path, "a.csv", "# nothing\n"))


class TestSplit:
    def test_ten_interactions(self):
        ds = D.from_pairs([("a", f"i{k}") for k in range(10)])
        tags = D.split(ds, seed=1).split
        assert [int((tags == t).sum()) for t in (D.TRAIN, D.VAL, D.TEST)] == [7, 1, 2]

    def test_single_interaction_all_train(self):
        ds = D.split(D.from_pairs([("a", "x"), ("b", "x"), ("b", "y"), ("b", "z")]), seed=0)
        assert ds.split[0] == D.TRAIN

    def test_deterministic(self):
        ds = random_dataset(np.random.default_rng(0), 30, 40, 0.2)
        np.testing.assert_array_equal(D.split(ds, seed=5).split, D.split(ds, seed=5).split)
        assert not np.array_equal(D.split(ds, seed=5).split, D.split(ds, seed=6).split)

    def test_partition_and_train_coverage(self):
        ds = D.split(random_dataset(np.random.default_rng(1), 40, 30, 0.3), seed=2)
        parts = [set(zip(*ds.part(n))) for n in ("train", "val", "test")]
        assert sum(len(p) for p in parts) == len(ds)
        assert set.union(*parts) == set(zip(ds.users, ds.items))
        assert set(ds.part("train")[0]) == set(range(ds.num_users))

    def test_per_user_counts(self):
        ds = D.split(random_dataset(np.random.default_rng(3), 25, 60, 0.3), seed=0)
        for u in range(ds.num_users):
            tags = ds.split[ds.users == u]
            n = len(tags)
            if n < 3:
                assert (tags == D.TRAIN).all()
                continue
            assert (tags == D.TEST).sum() == math.floor(n * 0.2 + 1e-9)
            assert (tags == D.VAL).sum() == math.floor(n * 0.1 + 1e-9)

    def test_bad_ratios(self):
        ds = D.from_pairs([("a", "x")])
        with pytest.raises(ContractError):
            D.split(ds, ratios=(0.5, 0.5, 0.5))


class TestAdjacency:
    def test_single_edge(self):
        adj = D.build_normalized_adjacency(D.from_pairs([("a", "x")]))
        np.testing.assert_array_equal(adj.matrix.densify(), [[1.0]])

    def test_degree_two(self):
        ds = D.from_pairs([("a", "x"), ("a", "y"), ("b", "x"), ("b", "y")])
        np.testing.assert_array_equal(D.build_normalized_adjacency(ds).matrix.densify(), np.full((2, 2), 0.5))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_degree_counting(self, seed):
        rng = np.random.default_rng(seed)
        ds = D.split(random_dataset(rng, 20, 20, 0.25), seed=seed)
        adj = D.build_normalized_adjacency(ds).matrix.densify()
        tu, ti = ds.part("train")
        for u in range(ds.num_users):
            for i in range(ds.num_items):
                edge = any((tu == u) & (ti == i))
                if edge:
                    du = int((tu == u).sum())
                    dv = int((ti == i).sum())
                    assert adj[u, i] == 1.0 / math.sqrt(du * dv)
                else:
                    assert adj[u, i] == 0.0

    def test_equals_dense_degree_scaling(self):
        ds = random_dataset(np.random.default_rng(7), 50, 45, 0.1)
        a = ds.matrix().densify()
        du, dv = a.sum(1), a.sum(0)
        expected = np.diag(du ** -0.5) @ a @ np.diag(dv ** -0.5)
        np.testing.assert_allclose(D.build_normalized_adjacency(ds).matrix.densify(), expected, rtol=1e-15)


class TestSampling:
    def test_positive_replacement(self):
        ds = D.from_pairs([("a", "x3"), ("b", "x0"), ("b", "x1"), ("b", "x2")])
        batch = next(D.sample_pairs(ds, S=2, batch_size=1, rng=np.random.default_rng(0)))
        for sample in D.sample_pairs(ds, S=2, batch_size=2, rng=np.random.default_rng(1)):
            a_rows = sample.anchors == 0
            assert (sample.positives[a_rows] == 0).all()
        assert len(batch) == 2

    def test_membership_invariants(self):
        ds = D.split(random_dataset(np.random.default_rng(4), 60, 40, 0.3), seed=0)
        train = set(zip(*ds.part("train")))
        rng = np.random.default_rng(0)
        anchors, pos, neg = [], [], []
        while sum(map(len, anchors)) < 100_000:
            for b in D.sample_pairs(ds, S=4, batch_size=32, rng=rng):
                anchors.append(b.anchors), pos.append(b.positives), neg.append(b.negatives)
        a, p, n = map(np.concatenate, (anchors, pos, neg))
        assert all((u, i) in train for u, i in zip(a, p))
        assert not any((u, i) in train for u, i in zip(a, n))

    def test_negatives_uniform_over_eligible(self):
        # user 0 has train items {0, 1}; the other 8 items must be drawn uniformly
        pairs = [("u0", "i0"), ("u0", "i1")] + [("u1", f"i{k}") for k in range(10)]
        pairs.append(("u1", "i0"))
        ds = D.from_pairs(pairs)
        index = D.TrainIndex(ds)
        anchors = np.zeros(100_000, dtype=np.int64)
        neg = D.sample_negatives(index, anchors, np.random.default_rng(3))
        counts = np.bincount(neg, minlength=10)
        assert counts[:2].sum() == 0
        assert stats.chisquare(counts[2:]).pvalue > 1e-3

    def test_saturated_user_skipped(self, caplog):
        ds = D.from_pairs([("a", "x"), ("a", "y"), ("b", "x")])
        batches = list(D.sample_pairs(ds, 1, 8, np.random.default_rng(0)))
        assert set(np.concatenate([b.anchors for b in batches])) == {1}
        assert "interacted with every item" in caplog.text

    def test_every_user_once_per_epoch(self):
        ds = random_dataset(np.random.default_rng(5), 37, 20, 0.2)
        anchors = np.concatenate([b.anchors for b in D.sample_pairs(ds, 1, 8, np.random.default_rng(0))])
        assert sorted(anchors) == list(range(37))


class TestEdgeDropout:
    def _matrix(self, n=1000, seed=0):
        rng = np.random.default_rng(seed)
        return SparseMatrix.from_coo(50, 40, rng.integers(0, 50, n * 3), rng.integers(0, 40, n * 3))

    def test_zero_rate_identity(self):
        m = self._matrix()
        assert D.edge_dropout(m, 0.0, np.random.default_rng(0)) is m

    def test_kept_count_binomial(self):
        m = SparseMatrix.identity(1000)
        kept = D.edge_dropout(m, 0.5, np.random.default_rng(0)).nnz
        assert abs(kept - 500) <= 3 * math.sqrt(1000 * 0.25)

    def test_scaling(self):
        m = SparseMatrix.identity(200).with_data(np.linspace(0.1, 2.0, 200))
        out = D.edge_dropout(m, 0.5, np.random.default_rng(2))
        np.testing.assert_allclose(out.data, m.densify()[out.row_of_entries(), out.indices] * 2.0)

    def test_mask_only_mode(self):
        m = SparseMatrix.identity(100)
        out = D.edge_dropout(m, 0.5, np.random.default_rng(2), rescale=False)
        assert set(out.data) == {1.0}

    def test_unbiased(self):
        m = SparseMatrix.from_dense(np.random.default_rng(1).random((10, 10)) + 0.5)
        rng = np.random.default_rng(0)
        acc = np.zeros((10, 10))
        for _ in range(1000):
            acc += D.edge_dropout(m, 0.25, rng).densify()
        np.testing.assert_allclose(acc / 1000, m.densify(), rtol=0.02 * 5)
        assert abs((acc / 1000).sum() / m.densify().sum() - 1) < 0.02

    def test_rate_one_rejected(self):
        with pytest.raises(ContractError):
            D.edge_dropout(SparseMatrix.identity(3), 1.0, np.random.default_rng(0))


class TestKCore:
    def test_chain_unravels(self):
        # u0-i0-u1-i1-u2: leaves go first, then everything left has degree < 2
        ds = D.from_pairs([("u0", "i0"), ("u1", "i0"), ("u1", "i1"), ("u2", "i1")])
        with pytest.raises(EmptyDatasetError):
            D.kcore_filter(ds, 2)

    def test_cycle_with_leaf(self):
        # 4-cycle u0-i0-u1-i1-u0 plus a pendant user u2 on i0
        ds = D.from_pairs([("u0", "i0"), ("u1", "i0"), ("u1", "i1"), ("u0", "i1"), ("u2", "i0"),
                           ("u3", "i2"), ("u2", "i2")])
        out = D.kcore_filter(ds, 2)
        assert sorted(out.user_ids) == ["u0", "u1"]
        assert sorted(out.item_ids) == ["i0", "i1"]
        assert len(out) == 4


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        ds = D.split(random_dataset(np.random.default_rng(2), 20, 15, 0.3), seed=4)
        D.save_split(ds, tmp_path, 4, (0.7, 0.1, 0.2))
        back = D.load_split(tmp_path)
        orig = {(ds.user_ids[u], ds.item_ids[i], t) for u, i, t in zip(ds.users, ds.items, ds.split)}
        got = {(back.user_ids[u], back.item_ids[i], t) for u, i, t in zip(back.users, back.items, back.split)}
        assert orig == got
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 4 and manifest["ratios"] == [0.7, 0.1, 0.2]

    def test_parse_synthetic(self):
        assert D.parse_synthetic("blocks:200,200,0.2,0.01,7") == (200, 200, 0.2, 0.01, 7)
        with pytest.raises(DataError):
            D.parse_synthetic("rings:1,2")

    def test_synthetic_block_density(self):
        pairs = D.synthetic_blocks(200, 200, 0.2, 0.01, 0)
        u = np.array([int(a[1:]) for a, _ in pairs])
        i = np.array([int(b[1:]) for _, b in pairs])
        same = (u < 100) == (i < 100)
        assert abs(same.sum() / 20000 - 0.2) < 0.01
        assert abs((~same).sum() / 20000 - 0.01) < 0.003
