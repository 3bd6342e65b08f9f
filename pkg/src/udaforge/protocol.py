"""The three-mode evaluation protocol over patient-out folds.

For every (fold, seed) pair this trains the lower bound (source-only), the
adaptation model, and the ceiling (supervised on target training folds),
always evaluating on the held-out target fold. The uda runs receive the
target training folds with labels stripped, so the unsupervised guarantee
is enforced structurally, not just by convention.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .metrics import METRIC_NAMES, fold_patients, grouped_kfold, summarize
from .train import graphs_from_specs, predict_dataset, train

AUC_SCHEME = "macro one-vs-rest over softmax probabilities, tie-corrected"

PROTOCOL_MODES = ("source_only", "uda", "target_supervised")


def _mode_config(base, mode, seed):
    if mode == "source_only":
        # the paper's lower bound is the plain supervised baseline
        return replace(base, mode="source_only", center_loss_on=False, seed=seed)
    if mode == "uda":
        return replace(base, mode="uda", seed=seed)
    return replace(base, mode="target_supervised", center_loss_on=False, seed=seed)


def run_protocol(source, target, base_config, k, seeds, folds=None, fold_seed=0,
                 progress=None):
    """Returns (report dict, feature dump dict) for the fold/seed grid."""
    plan = grouped_kfold(target.patients, k, fold_seed)
    folds = list(range(k)) if folds is None else list(folds)
    runs = []
    features = None
    for fold in folds:
        test_patients = set(fold_patients(plan, fold))
        if not test_patients:
            raise ValueError(f"fold {fold} holds no patients")
        test_set = target.subset_by_patients(test_patients)
        train_set = target.subset_by_patients(
            set(target.patient_list()) - test_patients
        )
        # patient-out guard: nothing trained on may share a test patient
        for pool in (source, train_set):
            overlap = set(int(p) for p in np.unique(pool.patients)) & test_patients
            if overlap:
                raise AssertionError(f"test patients leaked into training: {overlap}")
        for seed in seeds:
            for mode in PROTOCOL_MODES:
                cfg = _mode_config(base_config, mode, seed)
                if mode == "source_only":
                    result = train(cfg, source, None)
                elif mode == "uda":
                    result = train(cfg, source, train_set.strip_labels())
                else:
                    result = train(cfg, None, train_set)
                graphs = graphs_from_specs(result.specs, cfg)
                preds, feats = predict_dataset(graphs, result.params, test_set)
                m = summarize(preds)
                runs.append(
                    {"fold": fold, "seed": seed, "mode": mode, "metrics": m}
                )
                if progress is not None:
                    progress(runs[-1])
                if mode == "uda" and features is None:
                    features = _feature_dump(
                        graphs, result.params, source, test_set, result.log
                    )
    report = {
        "meta": {
            "k": k,
            "fold_seed": fold_seed,
            "folds": folds,
            "seeds": list(seeds),
            "auc": AUC_SCHEME,
            "config": base_config.to_dict(),
        },
        "runs": runs,
        "modes": _aggregate(runs),
        "gap_coverage": _gap_coverage(_aggregate(runs)),
    }
    return report, features


def _feature_dump(graphs, params, source, test_set, log):
    """Feature vectors of a source sample and the target test fold under the
    adapted model, plus the logged distance trend (the visual-diagnostic
    stand-ins for the paper's embedding figures)."""
    n = min(len(source), len(test_set))
    idx = np.linspace(0, len(source) - 1, n).astype(int)
    src_sample = source.subset(idx)
    _, f_src = predict_dataset(graphs, params, src_sample)
    _, f_tgt = predict_dataset(graphs, params, test_set)
    return {
        "features": np.concatenate([f_src, f_tgt]),
        "labels": np.concatenate([src_sample.labels, test_set.labels]).astype(int),
        "domains": np.concatenate([src_sample.domains, test_set.domains]).astype(int),
        "trend": [(r.iteration, r.wasserstein) for r in log.steps],
    }


def _aggregate(runs):
    out = {}
    for mode in PROTOCOL_MODES:
        vals = {m: [] for m in METRIC_NAMES}
        for r in runs:
            if r["mode"] == mode:
                for m in METRIC_NAMES:
                    vals[m].append(r["metrics"][m])
        if not vals["accuracy"]:
            continue
        out[mode] = {}
        for m in METRIC_NAMES:
            arr = np.asarray(vals[m])
            out[mode][m] = {
                "mean": float(arr.mean()),
                "std": float(arr.std(ddof=1)) if len(arr) > 1 else None,
                "n": int(len(arr)),
            }
    return out


def _gap_coverage(modes):
    """(uda - lower) / (upper - lower) per metric; None on a degenerate gap."""
    if set(PROTOCOL_MODES) - set(modes):
        return None
    out = {}
    for m in METRIC_NAMES:
        lower = modes["source_only"][m]["mean"]
        uda = modes["uda"][m]["mean"]
        upper = modes["target_supervised"][m]["mean"]
        denom = upper - lower
        out[m] = None if abs(denom) < 1e-12 else float((uda - lower) / denom)
    return out


def pca_project(features, k=2):
    """Deterministic principal-component projection (sign-fixed SVD)."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:k]
    # fix each component's sign by its largest-magnitude loading
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = x @ comps.T
    var = s**2 / max(len(x) - 1, 1)
    return proj, var[:k]
