"""Feature-space analysis and the attention-variant ablation study."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .network import NetConfig, build_network
from .training import TrainConfig, evaluate, prepare_images, train


def pca_features(features):
    """Project feature rows onto their top-2 principal axes.

    Returns projections (N, 2), the explained-variance ratios of the two
    axes, the feature mean and the axes themselves.  A degenerate cloud
    (fewer than 2 samples or zero variance) yields zero projections and
    zero explained variance rather than an error."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("feature matrix must be 2-d (samples x dims)")
    n, d = X.shape
    mean = X.mean(axis=0) if n else np.zeros(d)
    centered = X - mean
    if n < 2 or not np.any(centered):
        return {"projections": np.zeros((n, 2)), "explained": np.zeros(2),
                "mean": mean, "axes": np.zeros((2, d))}
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    axes = evecs[:, order].T
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], d))])
    top = np.maximum(evals[order], 0.0)
    if top.size < 2:
        top = np.concatenate([top, np.zeros(2 - top.size)])
    total = float(np.maximum(evals, 0.0).sum())
    explained = top / total if total > 0 else np.zeros(2)
    return {"projections": centered @ axes.T, "explained": explained,
            "mean": mean, "axes": axes}


def trajectory_continuity(projections):
    """Ratio of the median step between consecutive projections to the
    median distance between random pairs; well below 1 for a smooth path."""
    P = np.asarray(projections, dtype=np.float64)
    if P.shape[0] < 3:
        raise ConfigError("need at least 3 projected points")
    steps = np.linalg.norm(np.diff(P, axis=0), axis=1)
    rng = np.random.default_rng(0)
    i = rng.integers(0, P.shape[0], 512)
    j = rng.integers(0, P.shape[0], 512)
    keep = i != j
    pairs = np.linalg.norm(P[i[keep]] - P[j[keep]], axis=1)
    denom = float(np.median(pairs))
    if denom == 0.0:
        return 0.0
    return float(np.median(steps)) / denom


ABLATION_COLUMNS = ("variant", "seed", "mean_loss", "loss_std",
                    "trans_rmse_mm", "rot_rmse_deg", "latency_s",
                    "train_loss", "val_loss", "failed")


def ablate(variants, seeds, data, base_cfg: NetConfig, train_cfg: TrainConfig,
           ranges, test_data=None, log=None):
    """Train each attention variant from each seed on identical data and
    evaluate the best-validation model.  ``test_data`` is an optional
    (des, cur, labels) held-out set; without it the validation split is
    reused for the reported metrics.  Returns one row per (variant, seed);
    runs that raise are recorded with failed=1 instead of aborting the
    sweep."""
    des_tr, cur_tr, lab_tr, des_va, cur_va, lab_va = data
    if test_data is None:
        test_data = (des_va, cur_va, lab_va)
    des_te, cur_te, lab_te = test_data
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = NetConfig.from_dict({**base_cfg.to_dict(), "variant": variant})
            tcfg = TrainConfig(**{**train_cfg.to_dict(), "seed": int(seed)})
            if log:
                log(f"ablation: {variant} seed {seed}")
            try:
                net = build_network(cfg, seed=int(seed))
                history, best_val = train(net, data, tcfg, log=None)
                stats = evaluate(net.predict, des_te, cur_te, lab_te, ranges,
                                 alpha=tcfg.alpha, beta=tcfg.beta)
                rows.append({
                    "variant": variant, "seed": int(seed),
                    "mean_loss": stats["mean_loss"],
                    "loss_std": stats["loss_std"],
                    "trans_rmse_mm": stats["trans_rmse_mm"],
                    "rot_rmse_deg": stats["rot_rmse_deg"],
                    "latency_s": stats["latency_s"],
                    "train_loss": history[-1]["train_loss"],
                    "val_loss": best_val,
                    "failed": 0,
                })
            except Exception as exc:   # keep the sweep alive, record the run
                rows.append({"variant": variant, "seed": int(seed),
                             "mean_loss": float("nan"), "loss_std": float("nan"),
                             "trans_rmse_mm": float("nan"),
                             "rot_rmse_deg": float("nan"),
                             "latency_s": float("nan"),
                             "train_loss": float("nan"),
                             "val_loss": float("nan"), "failed": 1})
                if log:
                    log(f"ablation run failed ({variant}, seed {seed}): {exc}")
    return rows


def summarize_ablation(rows):
    """Per-variant mean and spread of the evaluation loss over seeds."""
    out = {}
    for row in rows:
        out.setdefault(row["variant"], []).append(row)
    summary = []
    for variant, group in out.items():
        ok = [r for r in group if not r["failed"]]
        losses = np.array([r["mean_loss"] for r in ok]) if ok else np.array([np.nan])
        summary.append({
            "variant": variant,
            "runs": len(group),
            "failed": sum(r["failed"] for r in group),
            "mean_loss": float(np.mean(losses)),
            "std_loss": float(np.std(losses)),
        })
    return summary


def write_ablation_csv(rows, path):
    with open(path, "w") as f:
        f.write(",".join(ABLATION_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(str(row[c]) for c in ABLATION_COLUMNS) + "\n")
