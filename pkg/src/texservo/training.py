"""Training loop: split L2 pose loss, warmup + cosine learning-rate
schedule, AdamW with decoupled decay, gradient clipping, and the
evaluation metrics (loss statistics, denormalized RMSE, latency)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .geometry import DiffRanges
from .network import Network, normalize_image, save_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    warmup_epochs: int = 5
    lr_start: float = 1e-6
    lr_peak: float = 1e-4
    lr_end: float = 1e-5
    alpha: float = 1.0
    beta: float = 1.0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    decay_norm_and_bias: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ConfigError("warmup_epochs must lie within [0, epochs]")
        if self.lr_start > self.lr_peak or self.lr_end > self.lr_peak:
            raise ConfigError("lr_start and lr_end must not exceed lr_peak")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")
        return self

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# loss


def loss_e(pred, gt, alpha=1.0, beta=1.0):
    """Scalar pose loss for one normalized 6-vector pair: weighted L2 norms
    of the translation and rotation residual 3-vectors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(6)
    gt = np.asarray(gt, dtype=np.float64).reshape(6)
    return (alpha * float(np.linalg.norm(pred[:3] - gt[:3]))
            + beta * float(np.linalg.norm(pred[3:] - gt[3:])))


def loss_e_tensor(pred, gt, alpha=1.0, beta=1.0):
    """Differentiable batch-mean version of :func:`loss_e`; ``pred`` is a
    (B, 6) tensor, ``gt`` a (B, 6) array or tensor."""
    if not isinstance(gt, ad.Tensor):
        gt = ad.Tensor(np.asarray(gt, dtype=np.float64))
    resid = ad.sub(pred, gt)
    t_term = ad.l2norm(ad.narrow(resid, 1, 0, 3), axis=1)
    r_term = ad.l2norm(ad.narrow(resid, 1, 3, 3), axis=1)
    return ad.tmean(ad.add(ad.scale(t_term, alpha), ad.scale(r_term, beta)))


# ---------------------------------------------------------------------------
# learning-rate schedule


def lr_at(step, cfg: TrainConfig, steps_per_epoch):
    """Linear warmup followed by cosine decay; continuous at the junction.
    Steps at or beyond the horizon clamp to lr_end."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / warmup
    last = total - 1
    if step >= last or last <= warmup:
        return cfg.lr_end
    phase = (step - warmup) / (last - warmup)
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * phase))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with bias correction and decoupled weight decay.  Parameters
    whose name is listed in ``no_decay`` skip the decay term."""

    def __init__(self, named_params, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-8, no_decay=()):
        self.items = list(named_params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.no_decay = set(no_decay)
        self.m = {n: np.zeros_like(p.data) for n, p in self.items}
        self.v = {n: np.zeros_like(p.data) for n, p in self.items}
        self.t = 0

    def step(self, lr):
        for name, p in self.items:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.items:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * update


def clip_gradients(params, max_norm):
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def no_decay_names(net):
    """Bias vectors and normalization affine terms, excluded from decay."""
    skip = ("b", "bias", "gamma", "beta", "eca_b", "pos")
    return {n for n, _ in net.named_parameters() if n.split(".")[-1] in skip}


# ---------------------------------------------------------------------------
# training loop


def prepare_images(raw):
    """Per-image min-max normalization applied to an (N, 1, H, W) stack."""
    out = np.empty_like(raw)
    for i in range(raw.shape[0]):
        out[i, 0] = normalize_image(raw[i, 0])
    return out


def _batchnorm_modules(module):
    from .blocks import BatchNorm2d
    found = []

    def walk(m):
        if isinstance(m, BatchNorm2d):
            found.append(m)
        for sub in m._modules.values():
            walk(sub)

    walk(module)
    return found


def recalibrate_bn(net, des, cur, batches=12, batch=32):
    """Re-estimate BatchNorm running statistics with the current weights.

    The running stats trail the weights during an epoch, which inflates the
    eval-mode loss of normalization-heavy variants.  A short forward-only
    pass with momentum 1/i turns the buffers into an exact cumulative
    average over the visited batches."""
    bns = _batchnorm_modules(net)
    if not bns:
        return
    saved = [bn.momentum for bn in bns]
    for i, b0 in enumerate(range(0, min(batches * batch, des.shape[0]), batch)):
        for bn in bns:
            bn.momentum = 1.0 / (i + 1)
        net.forward_batch(ad.Tensor(des[b0:b0 + batch]),
                          ad.Tensor(cur[b0:b0 + batch]), train=True)
    for bn, m in zip(bns, saved):
        bn.momentum = m


def train(net: Network, data, cfg: TrainConfig, out_dir=None, log=None):
    """Train on ``data`` = (des, cur, labels, val_des, val_cur, val_labels),
    raw float images in [0, 1].  Returns (history, best_val_loss).  History
    rows: dicts with epoch, lr, train_loss, val_loss, wall_seconds."""
    import os

    cfg.validate()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    des, cur, labels, vdes, vcur, vlabels = data
    if des.shape[2:] != tuple(net.cfg.input_hw):
        raise ConfigError(
            f"dataset resolution {des.shape[2:]} does not match "
            f"network input {tuple(net.cfg.input_hw)}")
    des = prepare_images(des)
    cur = prepare_images(cur)
    vdes = prepare_images(vdes)
    vcur = prepare_images(vcur)

    rng = np.random.default_rng(cfg.seed)
    n = des.shape[0]
    steps_per_epoch = max((n + cfg.batch_size - 1) // cfg.batch_size, 1)
    no_decay = set() if cfg.decay_norm_and_bias else no_decay_names(net)
    opt = AdamW(list(net.named_parameters()), weight_decay=cfg.weight_decay,
                no_decay=no_decay)
    params = net.parameters()

    history = []
    best_val = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_loss = 0.0
        lr = lr_at(step, cfg, steps_per_epoch)
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            lr = lr_at(step, cfg, steps_per_epoch)
            tape = ad.Tape()
            with ad.recording(tape):
                pred = net.forward_batch(ad.Tensor(des[idx]), ad.Tensor(cur[idx]),
                                         train=True)
                loss = loss_e_tensor(pred, labels[idx], cfg.alpha, cfg.beta)
            for p in params:
                p.zero_grad()
            ad.backward(tape, loss)
            clip_gradients(params, cfg.grad_clip)
            opt.step(lr)
            epoch_loss += loss.data.item() * len(idx)
            step += 1
        train_loss = epoch_loss / n
        recalibrate_bn(net, des, cur)
        val_loss = batched_loss(net, vdes, vcur, vlabels, cfg)
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss,
                        "wall_seconds": time.perf_counter() - t0})
        if log:
            log(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f} lr {lr:.2e}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = ([p.data.copy() for p in params],
                          [b.copy() for _, b in net.named_buffers()])
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), net)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), net)
        write_history(os.path.join(out_dir, "history.csv"), history)
    # leave the network at its best-validation state, not the final epoch
    bp, bb = best_state
    for p, data in zip(params, bp):
        p.data[...] = data
    for (_, buf), data in zip(net.named_buffers(), bb):
        buf[...] = data
    return history, best_val


def batched_loss(net, des, cur, labels, cfg, batch=32):
    total = 0.0
    for b0 in range(0, des.shape[0], batch):
        pred = net.forward_batch(ad.Tensor(des[b0:b0 + batch]),
                                 ad.Tensor(cur[b0:b0 + batch]), train=False)
        for i in range(pred.data.shape[0]):
            total += loss_e(pred.data[i], labels[b0 + i], cfg.alpha, cfg.beta)
    return total / des.shape[0]


def write_history(path, history):
    with open(path, "w") as f:
        f.write("epoch,lr,train_loss,val_loss,wall_seconds\n")
        for row in history:
            f.write(f"{row['epoch']},{row['lr']:.10e},{row['train_loss']:.10e},"
                    f"{row['val_loss']:.10e},{row['wall_seconds']:.3f}\n")


# ---------------------------------------------------------------------------
# evaluation


def evaluate(predictor, des, cur, labels, ranges: DiffRanges,
             alpha=1.0, beta=1.0):
    """Metrics over a test set.  ``predictor`` maps two raw (H, W) images to
    a normalized 6-vector; RMSE values are denormalized [mm, deg]."""
    n = des.shape[0]
    if n == 0:
        raise ConfigError("empty test set")
    losses = np.empty(n)
    preds = np.empty((n, 6))
    t0 = time.perf_counter()
    for i in range(n):
        preds[i] = predictor(des[i, 0], cur[i, 0])
        losses[i] = loss_e(preds[i], labels[i], alpha, beta)
    latency = (time.perf_counter() - t0) / n
    err = np.stack([ranges.denormalize(preds[i]) - ranges.denormalize(labels[i])
                    for i in range(n)])
    t_rmse = float(np.sqrt(np.mean(err[:, :3] ** 2)))
    r_rmse = float(np.rad2deg(np.sqrt(np.mean(err[:, 3:] ** 2))))
    return {
        "mean_loss": float(losses.mean()),
        "loss_std": float(losses.std()),
        "trans_rmse_mm": t_rmse,
        "rot_rmse_deg": r_rmse,
        "latency_s": latency,
        "per_sample_loss": losses.tolist(),
    }
