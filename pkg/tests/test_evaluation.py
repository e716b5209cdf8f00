import numpy as np
import pytest

from trafficgan.data import CorpusConfig, CorruptionSpec, Scaler, generate_corpus
from trafficgan.estimation import EstimateConfig, LossWeights
from trafficgan.evaluation import (
    PLOT_HEADER,
    VARIANTS,
    AblationResult,
    EmptyEvaluationError,
    baseline_fill,
    mape,
    mape_detail,
    mse,
    plot_data_rows,
    run_ablation,
    variant_weights,
)
from trafficgan.gan import GanConfig, GanModel
from trafficgan.tensor import ShapeError


def col(*values):
    return np.array(values, dtype=float)[:, None]


def test_mape_examples():
    truth = np.array([[8.0, 25.0]])
    mask = np.zeros((1, 2))
    assert mape(truth, truth, mask) == 0.0
    assert mape(1.1 * truth, truth, mask) == pytest.approx(10.0, rel=1e-12)
    assert mape(np.array([[10.0, 20.0]]), truth, mask) == pytest.approx(22.5, rel=1e-12)


def test_mape_excludes_zero_truth_and_reports_count():
    truth = np.array([[0.0, 4.0, 1e-7]])
    value, excluded = mape_detail(np.array([[3.0, 5.0, 1.0]]), truth, np.zeros((1, 3)))
    assert value == pytest.approx(25.0) and excluded == 2
    with pytest.raises(EmptyEvaluationError):
        mape(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))


def test_mse_examples():
    t = np.array([[1.0, 2.0, 3.0]])
    assert mse(t, t, np.zeros((1, 3))) == 0.0
    assert mse(t + 3, t, np.array([[1.0, 0.0, 1.0]])) == 9.0
    assert mse(t + np.array([[1.0, 2.0, 5.0]]), t, np.array([[0.0, 0.0, 1.0]])) == 2.5
    with pytest.raises(EmptyEvaluationError):
        mse(t, t, np.ones((1, 3)))
    with pytest.raises(ShapeError):
        mse(t, t, np.ones((2, 3)))


def test_metric_locality():
    rng = np.random.default_rng(0)
    truth = rng.uniform(1, 10, (12, 11))
    est = rng.uniform(1, 10, (12, 11))
    mask = (rng.random((12, 11)) > 0.3).astype(float)
    est2 = np.where(mask == 1, est + 100 * rng.normal(size=est.shape), est)
    assert mape(est, truth, mask) == mape(est2, truth, mask)
    assert mse(est, truth, mask) == mse(est2, truth, mask)


def test_baseline_examples():
    y = np.random.default_rng(1).random((4, 3))
    assert np.array_equal(baseline_fill(y, np.ones_like(y), "locf"), y)
    assert np.array_equal(baseline_fill(col(1, 0, 3), col(1, 0, 1), "linear_interp"), col(1, 2, 3))
    assert np.array_equal(baseline_fill(col(4, 6, 0), col(1, 1, 0), "locf"), col(4, 6, 6))
    assert np.array_equal(baseline_fill(col(4, 0, 8), col(1, 0, 1), "column_mean"), col(4, 6, 8))


def test_baseline_edge_cases():
    y = np.array([[1.0, 5.0], [2.0, 0.0], [3.0, 0.0]])
    mask = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    out = baseline_fill(y, mask, "locf")
    assert np.all(out[:, 1] == 2.0)  # empty column falls back to the global mean
    assert np.array_equal(baseline_fill(col(0, 7, 9), col(0, 1, 1), "locf"), col(7, 7, 9))
    with pytest.raises(EmptyEvaluationError):
        baseline_fill(y, np.zeros_like(y))
    with pytest.raises(ValueError):
        baseline_fill(y, np.ones_like(y) - np.eye(3, 2), "spline")


def test_linear_interp_exact_on_affine_columns():
    t = np.arange(12.0)
    y = np.stack([3 + 2 * t, 10 - 0.5 * t], axis=1)
    mask = np.ones_like(y)
    mask[[2, 5, 6, 9], 0] = 0
    mask[[1, 7], 1] = 0
    out = baseline_fill(y, mask, "linear_interp")
    assert mape(out, y, mask) == 0.0


def test_variant_weights():
    v = variant_weights(LossWeights(0.2, 0.03))
    assert list(v) == list(VARIANTS)
    assert v["no_p_no_c"] == LossWeights(0.0, 0.0)
    assert v["no_p"] == LossWeights(0.0, 0.03)
    assert v["no_c"] == LossWeights(0.2, 0.0)
    assert v["full"] == LossWeights(0.2, 0.03)


@pytest.fixture(scope="module")
def tiny_setup():
    corpus = generate_corpus(CorpusConfig(count=9, seed=1))
    records = corpus.subset("validation")
    scaler = Scaler.fit(np.stack([r.physical_features() for r in corpus.subset("train")]))
    model = GanModel.init(GanConfig(hidden_size=4, latent_dim=3, dense_size=3, seed=2))
    return records, scaler, model


def test_run_ablation_is_deterministic_and_complete(tiny_setup):
    records, scaler, model = tiny_setup
    cfg = EstimateConfig(iterations=5, restarts=2)
    kw = dict(estimate_config=cfg, corpus_id="tiny")
    a = run_ablation(records, model, scaler, CorruptionSpec(), [0, 1], **kw)
    b = run_ablation(records, model, scaler, CorruptionSpec(), [0, 1], **kw)
    assert a.to_csv() == b.to_csv() and a.per_seed_csv() == b.per_seed_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "variant,target,mape_pct,mse,mape_excluded,seeds,corpus_id"
    assert {row.split(",")[0] for row in lines[1:]} >= set(VARIANTS)
    assert len(a.per_seed) == 2 * 7 * 2
    assert all(r["mse"] >= 0 and r["mape_pct"] >= 0 for r in a.rows)
    assert set(a.ordering_report()) == {
        f"{c}_{t}" for c in ("full_lowest_mse", "no_p_no_c_highest_mse", "full_beats_column_mean_mape")
        for t in ("density", "flow")}


def test_run_ablation_shares_inputs_across_variants(tiny_setup):
    records, scaler, model = tiny_setup
    seen = []
    run_ablation(records, model, scaler, CorruptionSpec(pattern="future_block"), [3],
                 estimate_config=EstimateConfig(iterations=2, restarts=1),
                 plot_hook=lambda seed, ys, masks, est: seen.append((seed, masks, est)))
    seed, masks, est = seen[0]
    assert seed == 3 and np.all(masks[:, 6:] == 0)
    for name in VARIANTS:
        assert np.array_equal(est[name][:, :6], est["no_p_no_c"][:, :6])


def test_run_ablation_errors(tiny_setup):
    records, scaler, model = tiny_setup
    with pytest.raises(FileNotFoundError):
        run_ablation(records, None, scaler, CorruptionSpec(), [0])
    with pytest.raises(EmptyEvaluationError):
        run_ablation([], model, scaler, CorruptionSpec(), [0])


def test_ordering_report_logic():
    def rows(mses, mapes):
        out = []
        for name in list(VARIANTS) + ["column_mean"]:
            for t in ("density", "flow"):
                out.append({"variant": name, "target": t, "mse": mses[name], "mape_pct": mapes[name],
                            "mape_excluded": 0})
        return out

    good = AblationResult(rows({"no_p_no_c": 4, "no_p": 3, "no_c": 2, "full": 1, "column_mean": 9},
                               {"no_p_no_c": 4, "no_p": 3, "no_c": 2, "full": 1, "column_mean": 9}), [], [0], "x")
    assert all(good.ordering_report().values())
    bad = AblationResult(rows({"no_p_no_c": 1, "no_p": 3, "no_c": 2, "full": 4, "column_mean": 9},
                              {"no_p_no_c": 4, "no_p": 3, "no_c": 2, "full": 10, "column_mean": 9}), [], [0], "x")
    assert not any(bad.ordering_report().values())


def test_plot_rows():
    m = 2
    truth = np.arange(10.0).reshape(2, 5)
    mask = np.ones_like(truth)
    mask[1, 3] = 0
    rows = plot_data_rows(truth, truth + 1, truth + 2, mask, m)
    assert len(PLOT_HEADER) == len(rows[0]) and len(rows) == 10
    assert rows[0][:3] == [0, "flow", "detector_1"]
    assert [r for r in rows if r[2] == "cell_1" and r[0] == 1][0][3] == 0
