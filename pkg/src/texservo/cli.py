"""Command-line entry point.

Every subcommand writes a ``run.json`` snapshot of its resolved
configuration into the output directory.  Exit codes: 0 on success, 2 on
configuration errors, 3 when the closed loop diverges."""

from __future__ import annotations

import functools
import json
import os
import sys
import time

import click
import numpy as np

from . import autodiff as ad
from .analysis import (ablate, pca_features, summarize_ablation,
                       write_ablation_csv)
from .errors import (CheckpointError, ConfigError, ContractError,
                     DivergenceError, FrameError, GeometryError)
from .network import NetConfig, build_network, load_checkpoint, save_checkpoint
from .plant import ServoConfig, run_servo_loop
from .report import (save_ablation_chart, save_eval_histogram,
                     save_pca_scatter, save_servo_report, save_training_curves)
from .scene import DatasetConfig, generate_dataset, load_split
from .training import TrainConfig, evaluate, train

CONFIG_ERRORS = (ConfigError, ContractError, GeometryError, FrameError,
                 CheckpointError, FileNotFoundError, KeyError,
                 json.JSONDecodeError)


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _write_run_json(out_dir, command, seed, resolved):
    os.makedirs(out_dir, exist_ok=True)
    snapshot = {"command": command, "seed": seed, "config": resolved}
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)


def handles_errors(fn):
    """Map domain errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DivergenceError as exc:
            click.echo(f"diverged: {exc}", err=True)
            sys.exit(3)
        except CONFIG_ERRORS as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON configuration file.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="out",
              show_default=True, help="Output directory.")
@click.pass_context
def main(ctx, config_path, seed, out_dir):
    """Texture-matching visual servoing toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["out"] = out_dir
    try:
        ctx.obj["config"] = _load_config(config_path)
    except CONFIG_ERRORS as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)


@main.command("gen-data")
@click.option("--n", type=int, default=2000, show_default=True,
              help="Number of labeled image pairs.")
@click.pass_context
@handles_errors
def gen_data(ctx, n):
    """Render a labeled dataset of reference/current image pairs."""
    cfg = DatasetConfig.from_dict(ctx.obj["config"].get("dataset", {}))
    out = ctx.obj["out"]
    _write_run_json(out, "gen-data", ctx.obj["seed"],
                    {"dataset": cfg.to_dict(), "n": n})
    manifest = generate_dataset(cfg, ctx.obj["seed"], n, out)
    click.echo(f"wrote {n} pairs, manifest at {manifest}")


def _load_training_data(manifest):
    des_tr, cur_tr, lab_tr = load_split(manifest, "train")
    des_va, cur_va, lab_va = load_split(manifest, "val")
    return des_tr, cur_tr, lab_tr, des_va, cur_va, lab_va


@main.command("train")
@click.option("--data", "manifest", type=click.Path(exists=True), required=True,
              help="Dataset manifest (manifest.jsonl).")
@click.pass_context
@handles_errors
def train_cmd(ctx, manifest):
    """Train the pose-difference regressor."""
    conf = ctx.obj["config"]
    net_cfg = NetConfig.from_dict(conf.get("network", {}))
    train_cfg = TrainConfig.from_dict({**conf.get("train", {}),
                                       "seed": ctx.obj["seed"]})
    out = ctx.obj["out"]
    _write_run_json(out, "train", ctx.obj["seed"],
                    {"network": net_cfg.to_dict(), "train": train_cfg.to_dict(),
                     "data": str(manifest)})
    net = build_network(net_cfg, seed=ctx.obj["seed"])
    data = _load_training_data(manifest)
    history, best_val = train(net, data, train_cfg, out_dir=out, log=click.echo)
    save_training_curves(history, os.path.join(out, "training.png"))
    click.echo(f"best validation loss {best_val:.6f}")


@main.command("eval")
@click.option("--data", "manifest", type=click.Path(exists=True), required=True)
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "val"]), default="val",
              show_default=True)
@click.pass_context
@handles_errors
def eval_cmd(ctx, manifest, ckpt, split):
    """Evaluate a checkpoint on one dataset split."""
    conf = ctx.obj["config"]
    ds_cfg = DatasetConfig.from_dict(conf.get("dataset", {}))
    out = ctx.obj["out"]
    net = load_checkpoint(ckpt)
    _write_run_json(out, "eval", ctx.obj["seed"],
                    {"data": str(manifest), "ckpt": str(ckpt), "split": split,
                     "network": net.cfg.to_dict()})
    des, cur, labels = load_split(manifest, split)
    stats = evaluate(net.predict, des, cur, labels, ds_cfg.ranges.diff)
    per_sample = stats.pop("per_sample_loss")
    with open(os.path.join(out, "eval.json"), "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    with open(os.path.join(out, "per_sample_loss.csv"), "w") as f:
        f.write("index,loss\n")
        for i, v in enumerate(per_sample):
            f.write(f"{i},{v:.17g}\n")
    save_eval_histogram(per_sample, os.path.join(out, "loss_hist.png"))
    click.echo(json.dumps(stats, sort_keys=True))


@main.command("ablate")
@click.option("--data", "manifest", type=click.Path(exists=True), required=True)
@click.option("--variants", default="DCAB,NoDiffBlock,ConcatBaseline",
              show_default=True, help="Comma-separated attention variants.")
@click.option("--seeds", default="0,1,2", show_default=True,
              help="Comma-separated training seeds.")
@click.option("--test-data", "test_manifest", type=click.Path(exists=True),
              default=None, help="Held-out manifest; all its samples are "
              "used for the reported metrics.")
@click.pass_context
@handles_errors
def ablate_cmd(ctx, manifest, variants, seeds, test_manifest):
    """Train each attention variant from several seeds on identical data."""
    conf = ctx.obj["config"]
    net_cfg = NetConfig.from_dict(conf.get("network", {}))
    train_cfg = TrainConfig.from_dict(conf.get("train", {}))
    ds_cfg = DatasetConfig.from_dict(conf.get("dataset", {}))
    variant_list = [v.strip() for v in variants.split(",") if v.strip()]
    seed_list = [int(s) for s in seeds.split(",")]
    out = ctx.obj["out"]
    _write_run_json(out, "ablate", ctx.obj["seed"],
                    {"network": net_cfg.to_dict(), "train": train_cfg.to_dict(),
                     "variants": variant_list, "seeds": seed_list,
                     "data": str(manifest), "test_data": test_manifest})
    data = _load_training_data(manifest)
    test_data = None
    if test_manifest is not None:
        t = _load_training_data(test_manifest)
        test_data = (np.concatenate([t[0], t[3]]), np.concatenate([t[1], t[4]]),
                     np.concatenate([t[2], t[5]]))
    rows = ablate(variant_list, seed_list, data, net_cfg, train_cfg,
                  ds_cfg.ranges.diff, test_data=test_data, log=click.echo)
    write_ablation_csv(rows, os.path.join(out, "ablation.csv"))
    summary = summarize_ablation(rows)
    with open(os.path.join(out, "ablation_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    save_ablation_chart(summary, os.path.join(out, "ablation.png"))
    for row in summary:
        click.echo(f"{row['variant']}: loss {row['mean_loss']:.6f} "
                   f"+/- {row['std_loss']:.6f} ({row['failed']} failed)")


def _servo_config(ctx, net=None):
    raw = dict(ctx.obj["config"].get("servo", {}))
    raw.setdefault("seed", ctx.obj["seed"])
    cfg = ServoConfig.from_dict(raw)
    if net is not None:
        h, w = net.cfg.input_hw
        if tuple(cfg.resolution) != (w, h):
            raise ConfigError(
                f"servo resolution {tuple(cfg.resolution)} does not match the "
                f"checkpoint input size ({w}, {h})")
    return cfg


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), default=None,
              help="Trained checkpoint; omit to servo with the exact oracle.")
@click.pass_context
@handles_errors
def servo(ctx, ckpt):
    """Run the closed visual-servo loop on the simulated plant."""
    net = load_checkpoint(ckpt) if ckpt is not None else None
    cfg = _servo_config(ctx, net)
    out = ctx.obj["out"]
    _write_run_json(out, "servo", ctx.obj["seed"],
                    {"servo": cfg.to_dict(), "ckpt": ckpt})
    predictor = net.predict if net is not None else None
    metrics = run_servo_loop(cfg, predictor=predictor, out_dir=out,
                             log=click.echo)
    save_servo_report(metrics, os.path.join(out, "servo.png"))
    click.echo(f"converged at cycle {metrics.converged_step}, "
               f"ssd {metrics.initial_ssd:.4f} -> {metrics.final_ssd:.4f}")


@main.command("grad-check")
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.option("--samples", type=int, default=3, show_default=True,
              help="Coordinates probed per parameter tensor.")
@click.pass_context
@handles_errors
def grad_check(ctx, tol, samples):
    """Compare analytic gradients of the full network against central
    finite differences."""
    conf = ctx.obj["config"].get("network", {})
    small = dict(input_hw=[18, 48], backbone_patch=[6, 8], backbone_dim=12,
                 backbone_layers=1, embed_dim=8, expansion=2, attn_ratio=0.5,
                 unfold_patch=3, heads=1, num_dyn_kernels=2, deam_layers=1,
                 conv_blocks=1, transformer_blocks=1, head_hidden=8)
    small.update(conf)
    cfg = NetConfig.from_dict(small)
    out = ctx.obj["out"]
    _write_run_json(out, "grad-check", ctx.obj["seed"],
                    {"network": cfg.to_dict(), "tol": tol, "samples": samples})
    net = build_network(cfg, seed=ctx.obj["seed"])
    rng = np.random.default_rng(ctx.obj["seed"])
    h, w = cfg.input_hw
    des = ad.Tensor(rng.uniform(size=(1, 1, h, w)), requires_grad=True)
    cur = ad.Tensor(rng.uniform(size=(1, 1, h, w)), requires_grad=True)
    mask = ad.Tensor(rng.normal(size=(1, 6)))
    params = net.parameters()

    def builder():
        return ad.tsum(ad.mul(net.forward_batch(des, cur), mask))

    t0 = time.perf_counter()
    err = ad.check_gradients(builder, [des, cur] + params,
                             samples_per_tensor=samples,
                             rng=np.random.default_rng(ctx.obj["seed"]))
    elapsed = time.perf_counter() - t0
    result = {"max_rel_error": err, "tol": tol, "passed": bool(err < tol),
              "seconds": elapsed, "parameter_tensors": len(params)}
    with open(os.path.join(out, "gradcheck.json"), "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
    click.echo(f"max relative gradient error {err:.3e} "
               f"({'pass' if err < tol else 'FAIL'} at {tol:g}, "
               f"{elapsed:.1f}s)")
    if err >= tol:
        sys.exit(1)


@main.command()
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.pass_context
@handles_errors
def pca(ctx, ckpt):
    """Servo with a trained model while logging its pooled features, then
    project the feature trajectory onto its top-2 principal axes."""
    net = load_checkpoint(ckpt)
    cfg = _servo_config(ctx, net)
    out = ctx.obj["out"]
    _write_run_json(out, "pca", ctx.obj["seed"],
                    {"servo": cfg.to_dict(), "ckpt": str(ckpt)})
    metrics = run_servo_loop(cfg, predictor=net.predict, out_dir=out,
                             feature_fn=net.extract_gap_features)
    feats = np.stack(metrics.features)
    res = pca_features(feats)
    with open(os.path.join(out, "pca.csv"), "w") as f:
        f.write("step,pc1,pc2\n")
        for i, (a, b) in enumerate(res["projections"]):
            f.write(f"{i},{a:.17g},{b:.17g}\n")
    with open(os.path.join(out, "pca.json"), "w") as f:
        json.dump({"explained": res["explained"].tolist(),
                   "steps": int(feats.shape[0])}, f, indent=2, sort_keys=True)
    save_pca_scatter(res["projections"], os.path.join(out, "pca.png"),
                     explained=res["explained"])
    click.echo(f"explained variance {res['explained'].sum():.3f} "
               f"over {feats.shape[0]} steps")


if __name__ == "__main__":
    main()
