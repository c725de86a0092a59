"""Prediction pipeline: preprocessing, ensembles, aggregation, chunking, caching and derived tasks."""

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL
from tabdesk import autodiff as ad
from tabdesk.inference import (
    ImputationError,
    InferenceError,
    InsufficientData,
    PredictOptions,
    PreprocessError,
    SchemaError,
    UnsupportedTask,
    aggregate,
    anomaly_score,
    apply_preprocess,
    build_ensemble,
    chunk_partition,
    chunked_context,
    context_rows,
    embed_rows,
    fit_preprocess,
    impute,
    kv_cache_context,
    latin_square,
    predict,
    predict_matrix,
    predict_with_cache,
    quantile_density,
    quantile_summary,
    softmax,
    ts_featurize,
)
from tabdesk.model import forward, quantile_levels
from tabdesk.model.forward import ContractError

PURCHASE_TRAIN = pd.DataFrame({"age": [25, 35, 45, 52], "income": [30000, 60000, 80000, 95000],
                               "bought": ["No", "Yes", "Yes", "Yes"]})
PURCHASE_TEST = pd.DataFrame({"age": [30, 50], "income": [40000, 90000]})


def monolithic(params, Xtr, ytr, Xte, task, k=0):
    with ad.no_grad():
        out = forward(params, np.concatenate([Xtr, Xte]), ytr, len(Xtr), task)
    return out.logits.data[0, :, :k] if task == "classification" else out.quantiles.data[0]


class TestPreprocess:
    def test_first_appearance_codes(self):
        stats = fit_preprocess(pd.DataFrame({"c": ["b", "a", "b"]}))
        assert stats.categories["c"] == ("b", "a") and stats.kinds["c"] == "categorical"
        codes = np.array([0.0, 1.0, 0.0])
        z = apply_preprocess(stats, pd.DataFrame({"c": ["b", "a", "b"]}))[:, 0]
        np.testing.assert_allclose(z, (codes - codes.mean()) / codes.std())

    def test_unseen_category_gets_own_code(self):
        stats = fit_preprocess(pd.DataFrame({"c": ["b", "a", "b", "a"]}))
        z = apply_preprocess(stats, pd.DataFrame({"c": ["zzz"]}))[0, 0]
        assert z == pytest.approx((2 - 0.5) / 0.5)

    def test_missing_numeric_is_train_mean(self):
        train = pd.DataFrame({"x": [4.0, 6.0, np.nan, 5.0]})
        stats = fit_preprocess(train)
        assert stats.mean[0] == 5.0
        z = apply_preprocess(stats, pd.DataFrame({"x": [np.nan, 5.0]}))
        assert z.tolist() == [[0.0], [0.0]]

    def test_clip(self):
        stats = fit_preprocess(pd.DataFrame({"x": [0.0, 1.0, 0.0, 1.0]}))
        z = apply_preprocess(stats, pd.DataFrame({"x": [1e9, -1e9]}))
        assert z[:, 0].tolist() == [100.0, -100.0]

    @pytest.mark.parametrize("n, kept", [(22, False), (10, True)])
    def test_outlier_context_rows(self, n, kept):
        # one spike among n - 1 zeros sits at z = sqrt(n - 1): 4.58 for n = 22, 3 for n = 10
        x = np.zeros(n)
        x[0] = 7.0
        train = pd.DataFrame({"x": x, "w": np.arange(n, dtype=float)})
        stats = fit_preprocess(train)
        keep = context_rows(stats, apply_preprocess(stats, train))
        assert keep[0] == kept and keep[1:].all()

    def test_all_rows_removed(self):
        train = pd.DataFrame({"x": [0.0, 1.0]})
        stats = fit_preprocess(train, z_threshold=0.5)
        with pytest.raises(PreprocessError):
            context_rows(stats, apply_preprocess(stats, train))

    def test_schema_mismatch(self):
        stats = fit_preprocess(pd.DataFrame({"a": [1.0], "b": [2.0]}))
        with pytest.raises(SchemaError) as info:
            apply_preprocess(stats, pd.DataFrame({"a": [1.0], "c": [2.0]}))
        assert sorted(info.value.columns) == ["b", "c"]

    def test_empty_train(self):
        with pytest.raises(PreprocessError):
            fit_preprocess(pd.DataFrame({"a": []}))

    def test_constant_column_is_finite(self):
        stats = fit_preprocess(pd.DataFrame({"a": [3.0, 3.0, 3.0]}))
        assert stats.std[0] == 0.0
        assert np.all(np.isfinite(apply_preprocess(stats, pd.DataFrame({"a": [3.0, 9.0]}))))


class TestLatin:
    def test_small(self):
        assert latin_square(1).tolist() == [[0]]
        assert latin_square(3).tolist() == [[0, 1, 2], [1, 2, 0], [2, 0, 1]]

    @given(st.integers(1, 20))
    def test_latin_property(self, n):
        sq = latin_square(n)
        for k in range(n):
            assert sorted(sq[k]) == list(range(n)) and sorted(sq[:, k]) == list(range(n))


class TestEnsemble:
    def test_single_member_is_identity(self):
        (mem,) = build_ensemble(1, 5, seed=3)
        assert mem.permutation.tolist() == [0, 1, 2, 3, 4] and not mem.flip_target
        assert mem.signs.tolist() == [1.0] * 5

    @pytest.mark.parametrize("m", [1, 3, 8, 13])
    def test_coverage(self, m):
        members = build_ensemble(8, m, seed=0)
        for mem in members:
            assert sorted(mem.permutation) == list(range(m))
        for f in range(m):
            positions = {int(np.where(mem.permutation == f)[0][0]) for mem in members}
            assert len(positions) == min(8, m)

    def test_flip_alternates_and_signs(self):
        members = build_ensemble(8, 6, seed=1)
        assert [m.flip_target for m in members] == [False, True] * 4
        assert all(set(np.unique(m.signs)) <= {-1.0, 1.0} for m in members)
        assert any(np.any(m.signs < 0) for m in members[1:])

    def test_replay(self):
        a, b = build_ensemble(8, 7, seed=9), build_ensemble(8, 7, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.permutation, y.permutation) and np.array_equal(x.signs, y.signs)
        c = build_ensemble(8, 7, seed=10)
        assert any(not np.array_equal(x.signs, y.signs) for x, y in zip(a, c))

    def test_transform(self):
        (_, mem) = build_ensemble(2, 3, seed=0)[:2]
        X = np.array([[1.0, 2.0, 3.0]])
        expect = (X * mem.signs)[:, mem.permutation]
        np.testing.assert_array_equal(mem.transform(X), expect)


class TestAggregate:
    def test_identical_members(self):
        z = np.array([[0.3, -1.0, 2.0]])
        res = aggregate([z, z, z], "classification")
        np.testing.assert_allclose(res.probabilities, softmax(z))

    def test_opposite_logits_cancel(self):
        z = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_allclose(aggregate([z, -z], "classification").probabilities, [[1 / 3] * 3])

    def test_logits_before_softmax(self):
        res = aggregate([np.array([4.0, 0.0]), np.array([0.0, 2.0])], "classification")
        np.testing.assert_allclose(res.probabilities, [0.7310585786, 0.2689414214], atol=1e-9)
        probs_first = (softmax(np.array([4.0, 0.0])) + softmax(np.array([0.0, 2.0]))) / 2
        assert abs(probs_first[0] - res.probabilities[0]) > 0.1

    def test_regression_sorted_and_rescaled(self):
        a = np.array([[0.0, 2.0, 1.0]])
        res = aggregate([a, a], "regression", y_mean=10.0, y_std=2.0)
        np.testing.assert_allclose(res.quantiles, [[10.0, 12.0, 14.0]])
        assert res.predictions[0] == pytest.approx(12.0)

    def test_empty(self):
        with pytest.raises(InferenceError):
            aggregate([], "classification")


class TestQuantileSummary:
    def test_constant(self):
        s = quantile_summary(np.full(9, 2.5), quantile_levels(9))
        assert s["mean"] == pytest.approx(2.5) and s["median"] == pytest.approx(2.5)
        assert s["variance"] == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        tau = quantile_levels(99)
        s = quantile_summary(tau, tau, interval_levels=(0.5, 0.9))
        assert abs(s["mean"] - 0.5) <= 0.01
        assert abs(s["variance"] - 1 / 12) <= 0.005
        lo, hi = s["intervals"][0.9]
        assert abs(lo - 0.05) <= 0.01 and abs(hi - 0.95) <= 0.01

    def test_nested_intervals(self, rng):
        q = np.sort(rng.normal(size=(5, 19)), axis=-1)
        s = quantile_summary(q, quantile_levels(19))
        (lo50, hi50), (lo90, hi90) = s["intervals"][0.5], s["intervals"][0.9]
        assert np.all(lo90 <= lo50) and np.all(hi50 <= hi90)

    def test_density(self):
        tau = quantile_levels(99)
        assert quantile_density(tau, tau, 0.5) == pytest.approx(1.0)
        far = quantile_density(tau, tau, 5.0)
        assert 0 < far < 1e-12 or far == pytest.approx(0.0, abs=1e-12)


class TestChunking:
    def test_one_chunk_keeps_order(self):
        (only,) = chunk_partition(300, 512, seed=4)
        assert only.tolist() == list(range(300))

    def test_partition(self):
        chunks = chunk_partition(1000, 300, seed=1)
        assert len(chunks) == 4
        assert sorted(np.concatenate(chunks).tolist()) == list(range(1000))
        sizes = [len(c) for c in chunks]
        assert max(sizes) - min(sizes) <= 1

    def test_chunk_size_floor(self):
        with pytest.raises(ValueError):
            chunk_partition(10, 1)

    def test_single_chunk_matches_forward(self, small_params, rng):
        Xtr, Xte = rng.normal(size=(12, 4)), rng.normal(size=(5, 4))
        ytr = rng.integers(0, 3, 12).astype(float)
        got = chunked_context(small_params, Xtr, ytr, Xte, "classification", 3, chunk_size=512)
        np.testing.assert_array_equal(got, monolithic(small_params, Xtr, ytr, Xte, "classification", 3))

    def test_chunk_recomputation_oracle(self, small_params, rng):
        Xtr, Xte = rng.normal(size=(25, 3)), rng.normal(size=(4, 3))
        ytr = rng.normal(size=25)
        got = chunked_context(small_params, Xtr, ytr, Xte, "regression", chunk_size=10, seed=2)
        parts = [monolithic(small_params, Xtr[idx], ytr[idx], Xte, "regression") for idx in chunk_partition(25, 10, 2)]
        assert len(parts) == 3
        np.testing.assert_allclose(got, np.mean(parts, axis=0), rtol=0, atol=1e-14)


class TestKvCache:
    def test_batches_match_monolithic(self, small_params, rng):
        Xtr, Xte = rng.normal(size=(15, 5)), rng.normal(size=(9, 5))
        ytr = rng.integers(0, 4, 15).astype(float)
        cache = kv_cache_context(small_params, Xtr, ytr, "classification")
        outs = predict_with_cache(small_params, cache, np.array_split(Xte, 3), "classification", 4)
        np.testing.assert_allclose(np.concatenate(outs), monolithic(small_params, Xtr, ytr, Xte, "classification", 4),
                                   rtol=0, atol=1e-12)

    def test_second_call_skips_train_rows(self, small_params, rng):
        Xtr = rng.normal(size=(23, 4))
        ytr = rng.normal(size=23)
        cache = kv_cache_context(small_params, Xtr, ytr, "regression")
        predict_with_cache(small_params, cache, [rng.normal(size=(3, 4))], "regression")
        with ad.count_ops() as log:
            predict_with_cache(small_params, cache, [rng.normal(size=(3, 4))], "regression")
        # keys and values of the 23 train rows are read from the cache, never projected again
        assert not any(name == "linear" and 23 in shapes[0] for name, shapes in log.shapes)
        assert log.counts["linear"] > 0

    def test_stale_cache(self, small_params, rng):
        cache = kv_cache_context(small_params, rng.normal(size=(6, 3)), rng.normal(size=6), "regression")
        other = small_params.copy()
        other["head.reg.out.b"].data = other["head.reg.out.b"].data + 1.0
        with pytest.raises(ContractError):
            predict_with_cache(other, cache, [rng.normal(size=(2, 3))], "regression")


class TestPredict:
    def test_purchase_example(self, small_params):
        res = predict(small_params, PURCHASE_TRAIN[["age", "income"]], PURCHASE_TRAIN["bought"], PURCHASE_TEST,
                      "classification")
        assert res.classes == ["No", "Yes"]
        assert res.probabilities.shape == (2, 2)
        np.testing.assert_allclose(res.probabilities.sum(axis=1), 1.0, atol=1e-6)
        assert set(res.predictions) <= {"No", "Yes"} and res.member_count == 8

    def test_duplicate_test_rows(self, small_params, rng):
        X = pd.DataFrame(rng.normal(size=(30, 3)), columns=list("abc"))
        test = pd.DataFrame(rng.normal(size=(3, 3)), columns=list("abc"))
        test.iloc[2] = test.iloc[0]
        res = predict(small_params, X, rng.normal(size=30), test, "regression", PredictOptions(n_members=4))
        np.testing.assert_array_equal(res.quantiles[0], res.quantiles[2])
        assert np.all(np.diff(res.quantiles, axis=-1) >= 0)

    def test_too_many_classes(self, small_params, rng):
        X = rng.normal(size=(40, 2))
        with pytest.raises(UnsupportedTask):
            predict(small_params, X, np.arange(40) % 11, X[:2], "classification")

    def test_unknown_task(self, small_params, rng):
        X = rng.normal(size=(5, 2))
        with pytest.raises(UnsupportedTask):
            predict(small_params, X, np.zeros(5), X, "clustering")

    def test_column_mismatch(self, small_params):
        with pytest.raises(SchemaError) as info:
            predict(small_params, PURCHASE_TRAIN[["age", "income"]], PURCHASE_TRAIN["bought"],
                    PURCHASE_TEST.rename(columns={"income": "salary"}), "classification")
        assert info.value.columns == ["income", "salary"]

    def test_target_length(self, small_params, rng):
        with pytest.raises(SchemaError):
            predict(small_params, rng.normal(size=(5, 2)), np.zeros(4), rng.normal(size=(1, 2)), "regression")

    def test_member_flip_is_undone(self, small_params, rng):
        # a flipped member sees reversed labels; un-flipping must bring its view back to the same classes
        Xtr, Xte = rng.normal(size=(20, 3)), rng.normal(size=(4, 3))
        y = rng.integers(0, 3, 20).astype(float)
        res = predict_matrix(small_params, Xtr, y, Xte, "classification", 3, PredictOptions(n_members=2))
        members = build_ensemble(2, 3, 0)
        outs = []
        for mem, y_m in zip(members, [y, 2 - y]):
            o = monolithic(small_params, mem.transform(Xtr), y_m, mem.transform(Xte), "classification", 3)
            outs.append(o[..., ::-1] if mem.flip_target else o)
        np.testing.assert_allclose(res.probabilities, softmax(np.mean(outs, axis=0)), atol=1e-12)


class TestDerivedTasks:
    def test_anomaly_identical_probes(self, small_params, rng):
        train = pd.DataFrame(rng.normal(size=(40, 3)), columns=list("abc"))
        probes = pd.DataFrame([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]], columns=list("abc"))
        s = anomaly_score(small_params, train, probes)
        assert s.shape == (2,) and s[0] == s[1]

    def test_anomaly_single_column_fallback(self, small_params, rng):
        train = pd.DataFrame({"a": rng.normal(size=200)})
        s = anomaly_score(small_params, train, pd.DataFrame({"a": [0.0, 8.0]}))
        assert s[1] > s[0]

    def test_impute_noop(self, small_params, rng):
        df = pd.DataFrame(rng.normal(size=(10, 3)), columns=list("abc"))
        pd.testing.assert_frame_equal(impute(small_params, df), df)

    def test_impute_keeps_observed_cells(self, small_params, rng):
        df = pd.DataFrame(rng.normal(size=(30, 3)), columns=list("abc"))
        df["k"] = rng.choice(["u", "v"], 30)
        df.loc[[2, 5], "a"] = np.nan
        df.loc[[7], "k"] = None
        out = impute(small_params, df)
        assert not out.isna().any().any()
        observed = df.notna()
        for col in df.columns:
            assert out.loc[observed[col], col].tolist() == df.loc[observed[col], col].tolist()
        assert out.loc[7, "k"] in {"u", "v"}

    def test_impute_fully_missing(self, small_params):
        df = pd.DataFrame({"a": [1.0, 2.0], "b": [np.nan, np.nan]})
        with pytest.raises(ImputationError):
            impute(small_params, df)

    def test_embed_shape_and_duplicates(self, small_params, rng):
        df = pd.DataFrame(rng.normal(size=(12, 4)), columns=list("abcd"))
        df.iloc[5] = df.iloc[1]
        E = embed_rows(small_params, df)
        assert E.shape == (12, SMALL.icl_dim)
        np.testing.assert_array_equal(E[1], E[5])

    def test_embed_ignores_other_rows(self, small_params, rng):
        ctx = pd.DataFrame(rng.normal(size=(20, 3)), columns=list("abc"))
        context = (ctx, rng.normal(size=20), "regression")
        table = pd.DataFrame(rng.normal(size=(6, 3)), columns=list("abc"))
        a = embed_rows(small_params, table, context)
        shuffled = table.iloc[[0, 5, 3, 1, 4, 2]].reset_index(drop=True)
        b = embed_rows(small_params, shuffled, context)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[5], b[1])

    def test_ts_first_row(self):
        lt = ts_featurize(np.arange(1, 11), lags=2, horizon=1)
        assert lt.X[0].tolist() == [1.0, 2.0, 1.0] and lt.y[0] == 3.0
        assert lt.columns == ["lag_2", "lag_1", "dt_1"]
        assert len(lt.X_query) == 2 and lt.y_query.tolist() == [9.0, 10.0]
        assert lt.X_future[-1].tolist() == [9.0, 10.0, 1.0]

    def test_ts_constant(self):
        lt = ts_featurize(np.full(12, 4.0), lags=3)
        assert np.all(lt.X[:, :3] == 4.0) and np.all(lt.y == 4.0)

    def test_ts_unsorted(self, rng):
        t = np.arange(15.0) * 2
        v = rng.normal(size=15)
        perm = rng.permutation(15)
        a, b = ts_featurize(v, t, lags=3), ts_featurize(v[perm], t[perm], lags=3)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_ts_too_short(self):
        with pytest.raises(InsufficientData):
            ts_featurize([1.0, 2.0], lags=2, horizon=1)
