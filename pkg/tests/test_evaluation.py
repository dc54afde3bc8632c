import numpy as np
import pytest

from cropgraph import evaluation as ev
from cropgraph.autodiff import NumericalError
from cropgraph.candidates import AnchorGrid
from cropgraph.evaluation import (ConstantModel, InputError, MosOracleModel,
                                  acc_topk, evaluate, srcc)
from cropgraph.synth import SynthSpec, synth_dataset


def _brute_force_srcc(pred, truth):
    """O(n^2) rank correlation written independently of the library path."""
    def ranks(v):
        out = []
        for i, x in enumerate(v):
            less = sum(1 for y in v if y < x)
            equal = sum(1 for y in v if y == x)
            out.append(less + (equal + 1) / 2.0)
        return out
    rp, rt = ranks(list(pred)), ranks(list(truth))
    mp = sum(rp) / len(rp)
    mt = sum(rt) / len(rt)
    num = sum((a - mp) * (b - mt) for a, b in zip(rp, rt))
    dp = sum((a - mp) ** 2 for a in rp)
    dt = sum((b - mt) ** 2 for b in rt)
    if dp == 0 or dt == 0:
        return 0.0
    return num / (dp * dt) ** 0.5


class TestSrcc:
    def test_identical_orderings(self):
        assert srcc([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)

    def test_reversed(self):
        assert srcc([4, 3, 2, 1], [1, 2, 3, 4]) == pytest.approx(-1.0)

    def test_one_swap(self):
        assert srcc([1, 2, 3, 5, 4], [1, 2, 3, 4, 5]) == pytest.approx(0.9)

    def test_constant_vector_degenerate_zero(self):
        assert srcc([2, 2, 2], [1, 2, 3]) == 0.0
        assert srcc([1, 2, 3], [5, 5, 5]) == 0.0

    def test_too_short(self):
        with pytest.raises(InputError):
            srcc([1.0], [2.0])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            srcc([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 20))
            # quantize to force ties
            pred = np.round(rng.uniform(0, 5, n) * 4) / 4
            truth = np.round(rng.uniform(0, 5, n) * 4) / 4
            assert srcc(pred, truth) == pytest.approx(
                _brute_force_srcc(pred, truth), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 1, 12), rng.uniform(0, 1, 12)
        assert srcc(a, b) == srcc(b, a)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0, 2, 15), rng.uniform(0, 2, 15)
        base = srcc(a, b)
        assert srcc(np.exp(a), b) == pytest.approx(base, abs=1e-12)
        assert srcc(3.0 * a + 7.0, b) == pytest.approx(base, abs=1e-12)
        assert srcc(a, np.exp(b)) == pytest.approx(base, abs=1e-12)


class TestAccTopk:
    def _image_sets(self, pred_orderings, n=90):
        preds, truths = [], []
        truth = np.arange(n, dtype=float)[::-1]    # candidate 0 is best
        for order in pred_orderings:
            preds.append(order)
            truths.append(truth)
        return preds, truths

    def test_perfect_predictor(self):
        truth = np.arange(90, dtype=float)[::-1]
        assert acc_topk([truth], [truth], 5) == pytest.approx(100.0)
        assert acc_topk([truth], [truth], 10) == pytest.approx(100.0)

    def test_reversed_predictor_zero(self):
        truth = np.arange(90, dtype=float)[::-1]
        assert acc_topk([truth[::-1]], [truth], 5) == 0.0

    def test_random_predictor_near_analytic_expectation(self):
        rng = np.random.default_rng(3)
        truth = np.arange(90, dtype=float)[::-1]
        preds = [rng.permutation(90).astype(float) for _ in range(10_000)]
        value = acc_topk(preds, [truth] * 10_000, 5)
        assert value == pytest.approx(100.0 * 5.0 / 90.0, abs=0.5)

    def test_skips_small_images_with_warning(self):
        truth_big = np.arange(90, dtype=float)
        truth_small = np.arange(3, dtype=float)
        with pytest.warns(UserWarning):
            value = acc_topk([truth_big, truth_small],
                             [truth_big, truth_small], 5)
        assert value == pytest.approx(100.0)

    def test_candidate_permutation_invariance(self):
        rng = np.random.default_rng(4)
        pred = rng.uniform(0, 5, 30)
        truth = rng.uniform(0, 5, 30)
        base = acc_topk([pred], [truth], 5)
        for _ in range(5):
            perm = rng.permutation(30)
            assert acc_topk([pred[perm]], [truth[perm]], 5) == \
                pytest.approx(base)

    def test_truth_ties_broken_by_index(self):
        truth = np.array([3.0, 3.0, 3.0, 1.0, 1.0, 1.0])
        pred = np.array([0.0, 1.0, 2.0, 5.0, 4.0, 3.0])
        # truth top-2 = indices {0, 1} by tie-break; preds return 3,4,5,2
        assert acc_topk([pred], [truth], 2) == pytest.approx(0.0)


def _dataset(tmp_path, n=6, seed=0):
    spec = SynthSpec(image_w=64, image_h=64,
                     grid=AnchorGrid(bins=6, target_count=16))
    return synth_dataset(n, seed, spec, out_dir=tmp_path)


class TestEvaluate:
    def test_mos_oracle_upper_bound(self, tmp_path):
        records, _ = _dataset(tmp_path)
        report = evaluate(MosOracleModel(), records, root=tmp_path)
        assert report.srcc_mean == pytest.approx(1.0)
        assert report.acc5 == pytest.approx(100.0)
        assert report.acc10 == pytest.approx(100.0)

    def test_constant_model_degenerate_zero(self, tmp_path):
        records, _ = _dataset(tmp_path, seed=1)
        report = evaluate(ConstantModel(1.5), records, root=tmp_path)
        assert report.srcc_mean == 0.0

    def test_single_feature_pass_per_image(self, tmp_path):
        records, _ = _dataset(tmp_path, seed=2)
        model = MosOracleModel()
        evaluate(model, records, root=tmp_path)
        assert model.feature_passes == len(records)

    def test_nan_score_names_image(self, tmp_path):
        records, _ = _dataset(tmp_path, seed=3)

        class BadModel:
            feature_passes = 0
            def score_record(self, rec, root=None):
                self.feature_passes += 1
                out = np.asarray(rec.mos, dtype=float).copy()
                if rec.image_id.endswith("2"):
                    out[0] = np.nan
                return out

        with pytest.raises(NumericalError) as err:
            evaluate(BadModel(), records, root=tmp_path)
        assert "synth00002" in str(err.value)

    def test_planted_oracle_model_scores_cleanly(self, tmp_path):
        records, oracle = _dataset(tmp_path, seed=4)
        report = evaluate(oracle.model(), records, root=tmp_path)
        # noise-free planted scores correlate strongly with the noisy MOS
        assert report.srcc_mean > 0.9

    def test_report_files(self, tmp_path):
        records, _ = _dataset(tmp_path, seed=5)
        report = evaluate(MosOracleModel(), records, root=tmp_path)
        out = tmp_path / "report"
        ev.write_report(out, report)
        text = (out / "report.csv").read_text()
        assert text.startswith("# " + ev.ACC_CONVENTION)
        assert (out / "report.json").exists()
        assert (out / "timings.json").exists()
        import json
        summary = json.loads((out / "report.json").read_text())
        assert set(summary) >= {"srcc_mean", "acc5", "acc10", "convention"}
        assert "images_per_second" not in (out / "report.json").read_text()


class TestAverageRanks:
    def test_simple(self):
        np.testing.assert_array_equal(ev.average_ranks([10.0, 30.0, 20.0]),
                                      [1.0, 3.0, 2.0])

    def test_ties_get_mean_rank(self):
        np.testing.assert_array_equal(
            ev.average_ranks([1.0, 2.0, 2.0, 3.0]), [1.0, 2.5, 2.5, 4.0])

    def test_all_tied(self):
        np.testing.assert_array_equal(ev.average_ranks([5.0] * 4),
                                      [2.5, 2.5, 2.5, 2.5])
