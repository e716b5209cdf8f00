"""Error metrics on missing entries, naive fill-in baselines and the loss ablation."""
import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import corpus_features, make_mask
from .estimation import EstimateConfig, LossWeights, estimate_batch, reconstruct
from .tensor import DTYPE, ShapeError

log = logging.getLogger(__name__)

EPS_ZERO = 1e-6
VARIANTS = ("no_p_no_c", "no_p", "no_c", "full")
BASELINES = ("column_mean", "linear_interp", "locf")
TARGETS = ("density", "flow")


class EmptyEvaluationError(ValueError):
    pass


def _check(estimated, truth, mask):
    estimated = np.asarray(estimated, dtype=DTYPE)
    truth = np.asarray(truth, dtype=DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if not estimated.shape == truth.shape == mask.shape:
        raise ShapeError(f"shape mismatch {estimated.shape}, {truth.shape}, {mask.shape}")
    return estimated, truth, mask


def mape_detail(estimated, truth, mask, eps_zero=EPS_ZERO):
    """(MAPE in percent, number of missing entries excluded for |truth| <= eps_zero)."""
    est, tru, mask = _check(estimated, truth, mask)
    missing = mask == 0
    ok = missing & (np.abs(tru) > eps_zero)
    if not np.any(ok):
        raise EmptyEvaluationError("no missing entries with nonzero truth to evaluate")
    value = 100.0 * float(np.mean(np.abs(est[ok] - tru[ok]) / np.abs(tru[ok])))
    return value, int(np.sum(missing) - np.sum(ok))


def mape(estimated, truth, mask, eps_zero=EPS_ZERO):
    return mape_detail(estimated, truth, mask, eps_zero)[0]


def mse(estimated, truth, mask):
    est, tru, mask = _check(estimated, truth, mask)
    missing = mask == 0
    if not np.any(missing):
        raise EmptyEvaluationError("no missing entries to evaluate")
    return float(np.mean((est[missing] - tru[missing]) ** 2))


def baseline_fill(y, mask, method="column_mean"):
    """Fill missing entries of each column from that column's observed entries."""
    y = np.asarray(y, dtype=DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if y.shape != mask.shape or y.ndim != 2:
        raise ShapeError("y and mask must be equal-shaped matrices")
    obs = mask == 1
    if not np.any(obs):
        raise EmptyEvaluationError("no observed entries to fill from")
    global_mean = float(y[obs].mean())
    out = y.copy()
    t = np.arange(y.shape[0])
    for j in range(y.shape[1]):
        o = obs[:, j]
        if o.all():
            continue
        if not o.any():
            out[:, j] = global_mean
            continue
        miss = ~o
        if method == "column_mean":
            out[miss, j] = y[o, j].mean()
        elif method == "linear_interp":
            out[miss, j] = np.interp(t[miss], t[o], y[o, j])
        elif method == "locf":
            last = y[o, j][0]  # leading gaps take the first observation
            for i in range(y.shape[0]):
                if o[i]:
                    last = y[i, j]
                else:
                    out[i, j] = last
        else:
            raise ValueError(f"unknown baseline method {method!r}")
    return out


# --------------------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    rows: list
    per_seed: list
    seeds: list
    corpus_id: str
    config: dict = field(default_factory=dict)

    def lookup(self, variant, target):
        for r in self.rows:
            if r["variant"] == variant and r["target"] == target:
                return r
        raise KeyError((variant, target))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "target", "mape_pct", "mse", "mape_excluded", "seeds", "corpus_id"])
        seeds = ";".join(str(s) for s in self.seeds)
        for r in self.rows:
            w.writerow([r["variant"], r["target"], repr(r["mape_pct"]), repr(r["mse"]),
                        r["mape_excluded"], seeds, self.corpus_id])
        return buf.getvalue()

    def per_seed_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "variant", "target", "mape_pct", "mse", "mape_excluded"])
        for r in self.per_seed:
            w.writerow([r["seed"], r["variant"], r["target"], repr(r["mape_pct"]), repr(r["mse"]), r["mape_excluded"]])
        return buf.getvalue()

    def beats(self, variant, other, target, metric="mse"):
        return self.lookup(variant, target)[metric] < self.lookup(other, target)[metric]

    def ordering_report(self):
        """Checks mirroring the qualitative ordering of the four variants."""
        checks = {}
        for target in TARGETS:
            mses = {v: self.lookup(v, target)["mse"] for v in VARIANTS}
            checks[f"full_lowest_mse_{target}"] = min(mses, key=mses.get) == "full"
            checks[f"no_p_no_c_highest_mse_{target}"] = max(mses, key=mses.get) == "no_p_no_c"
            try:
                checks[f"full_beats_column_mean_mape_{target}"] = self.beats("full", "column_mean", target, "mape_pct")
            except KeyError:
                pass
        return checks


def variant_weights(weights):
    return {
        "no_p_no_c": LossWeights(0.0, 0.0),
        "no_p": LossWeights(0.0, weights.lambda_c),
        "no_c": LossWeights(weights.lambda_p, 0.0),
        "full": LossWeights(weights.lambda_p, weights.lambda_c),
    }


def _target_masks(shape, m):
    flow = np.zeros(shape, dtype=bool)
    flow[..., : m + 1] = True
    return {"flow": flow, "density": ~flow}


def grouped_errors(est_phys, truth_phys, masks, m):
    """MAPE/MSE pooled over records, split into flow and density columns."""
    out = {}
    for target, cols in _target_masks(truth_phys.shape, m).items():
        # entries outside the target group count as observed so they drop out
        mk = np.where(cols, masks, 1.0)
        value, excluded = mape_detail(est_phys, truth_phys, mk)
        out[target] = {"mape_pct": value, "mse": mse(est_phys, truth_phys, mk), "mape_excluded": excluded}
    return out


def corrupt_records(features, corruption, seed):
    rng = np.random.default_rng(seed)
    masks = np.stack([make_mask(f.shape, corruption, rng) for f in features])
    ys = np.where(masks == 1.0, features, 0.5)
    return ys, masks


def run_ablation(records, model, scaler, corruption, seeds, estimate_config=None,
                 weights=None, corpus_id="", baselines=BASELINES, plot_hook=None):
    """Evaluate the four loss variants (plus baselines) on `records`.

    All variants share the model and, per seed, the same corrupted inputs.
    Metrics are medians over seeds of errors pooled across records.
    """
    if model is None:
        raise FileNotFoundError("ablation needs a trained model checkpoint")
    if not records:
        raise EmptyEvaluationError("no validation records")
    estimate_config = estimate_config or EstimateConfig()
    weights = weights or estimate_config.weights
    geometry = records[0].geometry
    m = geometry.m
    feats = corpus_features(records, scaler)
    truth = np.stack([r.physical_features() for r in records])

    per_seed = []
    for seed in seeds:
        ys, masks = corrupt_records(feats, corruption, seed)
        estimates = {}
        for name, w in variant_weights(weights).items():
            cfg = EstimateConfig(iterations=estimate_config.iterations, step_size=estimate_config.step_size,
                                 restarts=estimate_config.restarts, seed=seed, weights=w,
                                 clip_latent=estimate_config.clip_latent)
            res = estimate_batch(model, ys, masks, cfg, geometry, scaler)
            estimates[name] = np.stack([reconstruct(ys[i], masks[i], r.gz_hat) for i, r in enumerate(res)])
        for method in baselines:
            estimates[method] = np.stack([baseline_fill(ys[i], masks[i], method) for i in range(len(ys))])
        for name, est in estimates.items():
            errs = grouped_errors(scaler.inverse(est), truth, masks, m)
            for target in TARGETS:
                per_seed.append({"seed": seed, "variant": name, "target": target, **errs[target]})
        if plot_hook is not None:
            plot_hook(seed, ys, masks, estimates)
        log.info("ablation seed %s done", seed)

    rows = []
    names = list(VARIANTS) + list(baselines)
    for name in names:
        for target in TARGETS:
            sel = [r for r in per_seed if r["variant"] == name and r["target"] == target]
            rows.append({
                "variant": name,
                "target": target,
                "mape_pct": float(np.median([r["mape_pct"] for r in sel])),
                "mse": float(np.median([r["mse"] for r in sel])),
                "mape_excluded": int(np.median([r["mape_excluded"] for r in sel])),
            })
    snapshot = {
        "estimate": {"iterations": estimate_config.iterations, "step_size": estimate_config.step_size,
                     "restarts": estimate_config.restarts},
        "weights": asdict(weights),
        "corruption": asdict(corruption),
        "records": len(records),
        "clip_latent": estimate_config.clip_latent,
    }
    return AblationResult(rows=rows, per_seed=per_seed, seeds=list(seeds), corpus_id=corpus_id, config=snapshot)


def plot_data_rows(truth_phys, est_phys, base_phys, mask, m):
    """Long-format rows: t, quantity, location, observed, truth, estimate, baseline."""
    rows = []
    n = truth_phys.shape[0]
    for j in range(truth_phys.shape[1]):
        if j <= m:
            quantity, loc = "flow", f"detector_{j + 1}"
        else:
            quantity, loc = "density", f"cell_{j - m}"
        for t in range(n):
            rows.append([t, quantity, loc, int(mask[t, j]), repr(float(truth_phys[t, j])),
                         repr(float(est_phys[t, j])), repr(float(base_phys[t, j]))])
    return rows


PLOT_HEADER = ["t", "quantity", "location", "observed", "truth", "estimate", "baseline"]


def write_plot_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        w.writerows(rows)
