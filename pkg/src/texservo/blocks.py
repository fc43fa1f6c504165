"""Differentiable building blocks: convolutional block with dynamic
convolution, separable cross-attention transformer block, difference
extraction, and the SE / ECA / GRN channel-attention drop-ins used as
ablation baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass
class BlockConfig:
    channels_in: int = 32
    channels_expanded: int = 64
    embed_dim: int = 32          # attention operating width
    num_dyn_kernels: int = 4
    patch_size: int = 3          # unfold patch (square)
    heads: int = 1

    def validate(self):
        if self.channels_expanded < self.channels_in:
            raise ConfigError("channels_expanded must be >= channels_in")
        if self.num_dyn_kernels < 1:
            raise ConfigError("num_dyn_kernels must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError("heads must be >= 1 and divide embed_dim")
        return self


class Module:
    """Tiny parameter container; forward passes are plain methods."""

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._modules = {}

    def add_param(self, name, array):
        t = ad.parameter(array, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, array):
        arr = np.asarray(array, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_module(self, name, module):
        self._modules[name] = module
        return module

    def named_parameters(self, prefix=""):
        for k, v in self._params.items():
            yield (f"{prefix}{k}", v)
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for k, v in self._buffers.items():
            yield (f"{prefix}{k}", v)
        for k, m in self._modules.items():
            yield from m.named_buffers(prefix=f"{prefix}{k}.")


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=1, padding=0, groups=1, bias=True):
        super().__init__()
        fan_in = (c_in // groups) * k * k
        fan_out = (c_out // groups) * k * k
        self.w = self.add_param("w", glorot(rng, (c_out, c_in // groups, k, k), fan_in, fan_out))
        self.b = self.add_param("b", np.zeros(c_out)) if bias else None
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return ad.conv2d(x, self.w, self.b, padding=self.padding, groups=self.groups)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        super().__init__()
        self.w = self.add_param("w", glorot(rng, (d_in, d_out), d_in, d_out))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def forward(self, x):
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class BatchNorm2d(Module):
    """Running statistics kept with momentum 0.1; eval mode uses them."""

    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(c))
        self.beta = self.add_param("beta", np.zeros(c))
        self.running_mean = self.add_buffer("running_mean", np.zeros(c))
        self.running_var = self.add_buffer("running_var", np.ones(c))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training=train,
                             momentum=self.momentum, eps=self.eps)


class ChannelLayerNorm(Module):
    """Layer normalization over the channel axis of an NCHW map."""

    def __init__(self, c, eps=1e-6):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones((1, c, 1, 1)))
        self.beta = self.add_param("beta", np.zeros((1, c, 1, 1)))
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, axis=1, eps=self.eps)


class TokenLayerNorm(Module):
    """Layer normalization over the last axis of (B, N, D) token stacks."""

    def __init__(self, d, eps=1e-6):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(d))
        self.beta = self.add_param("beta", np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


# ---------------------------------------------------------------------------
# channel attention baselines


def eca_kernel_size(c, gamma=2, b=1):
    """Adaptive 1-D kernel size from the channel count (nearest odd)."""
    k = int(abs((np.log2(c) + b) / gamma))
    return max(k if k % 2 else k + 1, 3)


class SEAttention(Module):
    def __init__(self, rng, c, reduction=4):
        super().__init__()
        hidden = max(c // reduction, 1)
        self.fc1 = self.add_module("fc1", Linear(rng, c, hidden))
        self.fc2 = self.add_module("fc2", Linear(rng, hidden, c))

    def forward(self, x, train=False):
        b, c = x.data.shape[0], x.data.shape[1]
        gate = ad.sigmoid(self.fc2.forward(ad.relu(self.fc1.forward(ad.global_avg_pool(x)))))
        return ad.mul(x, ad.reshape(gate, (b, c, 1, 1)))


class ECAAttention(Module):
    def __init__(self, rng, c):
        super().__init__()
        self.k = eca_kernel_size(c)
        fan = self.k
        self.w = self.add_param("w", glorot(rng, (1, 1, self.k), fan, fan))
        self.b = self.add_param("b", np.zeros(1))

    def forward(self, x, train=False):
        b, c = x.data.shape[0], x.data.shape[1]
        pooled = ad.reshape(ad.global_avg_pool(x), (b, 1, c))
        gate = ad.sigmoid(ad.conv1d(pooled, self.w, self.b, padding=self.k // 2))
        return ad.mul(x, ad.reshape(gate, (b, c, 1, 1)))


class GRNAttention(Module):
    """Global response normalization with identity residual."""

    def __init__(self, rng, c, eps=1e-6):
        super().__init__()
        self.gamma = self.add_param("gamma", np.zeros((1, c, 1, 1)))
        self.beta = self.add_param("beta", np.zeros((1, c, 1, 1)))
        self.eps = eps
        self.c = c

    def forward(self, x, train=False):
        b, c = x.data.shape[0], x.data.shape[1]
        gx = ad.l2norm(ad.reshape(x, (b, c, -1)), axis=2)                # (B, C)
        nx = ad.div(gx, ad.add(ad.tmean(gx, axis=1, keepdims=True),
                               ad.Tensor(np.full((1, 1), self.eps))))
        nx = ad.reshape(nx, (b, c, 1, 1))
        return ad.add(ad.add(ad.mul(self.gamma, ad.mul(x, nx)), self.beta), x)


def make_attention_baseline(rng, c, kind):
    if kind == "SE":
        return SEAttention(rng, c)
    if kind == "ECA":
        return ECAAttention(rng, c)
    if kind == "GRN":
        return GRNAttention(rng, c)
    raise ConfigError(f"unknown attention kind '{kind}'")


# ---------------------------------------------------------------------------
# dynamic convolution by attention


def dynamic_conv(x, bank, scores, bias=None):
    """Per-sample convolution with the score-weighted sum of a kernel bank.

    ``bank`` has shape (K, c_out, c_in, kh, kw) and ``scores`` (B, K); the
    kernels are aggregated first, then applied once per sample (batched
    per-sample convolution).  Padding preserves spatial dims.
    """
    kk, c_out, c_in, kh, kw = bank.data.shape
    b = x.data.shape[0]
    if scores.data.shape != (b, kk):
        raise ShapeError(
            f"dynamic_conv: scores shape {scores.data.shape} does not match "
            f"batch {b} and bank size {kk}")
    if x.data.shape[1] != c_in:
        raise ShapeError(f"dynamic_conv: input channels {x.data.shape[1]} != bank c_in {c_in}")
    h, w = x.data.shape[2], x.data.shape[3]
    mixed = ad.matmul(scores, ad.reshape(bank, (kk, c_out * c_in * kh * kw)))
    mixed = ad.reshape(mixed, (b, c_out, c_in, kh, kw))
    out = ad.conv2d_per_sample(x, mixed, padding=(kh // 2, kw // 2))
    if bias is not None:
        out = ad.add(out, ad.reshape(bias, (1, c_out, 1, 1)))
    return out


class DCAB(Module):
    """Dynamic convolution whose 3x3 kernel is an attention-weighted mixture
    of a bank, with mixture scores derived from channel-pooled features."""

    def __init__(self, rng, c, num_kernels):
        super().__init__()
        self.c = c
        self.num_kernels = num_kernels
        self.k1d = eca_kernel_size(c)
        self.eca_w = self.add_param("eca_w", glorot(rng, (1, 1, self.k1d), self.k1d, self.k1d))
        self.eca_b = self.add_param("eca_b", np.zeros(1))
        self.score_w = self.add_param("score_w", glorot(rng, (c, num_kernels), c, num_kernels))
        fan = c * 9
        self.bank = self.add_param(
            "bank", glorot(rng, (num_kernels, c, c, 3, 3), fan, fan) / np.sqrt(num_kernels))
        self.bias = self.add_param("bias", np.zeros(c))

    def scores(self, x):
        """Softmax-normalized per-sample distribution over the kernel bank."""
        b, c = x.data.shape[0], x.data.shape[1]
        pooled = ad.reshape(ad.global_avg_pool(x), (b, 1, c))
        feat = ad.reshape(ad.conv1d(pooled, self.eca_w, self.eca_b, padding=self.k1d // 2),
                          (b, c))
        return ad.softmax(ad.matmul(feat, self.score_w), axis=1)

    def forward(self, x, train=False):
        return dynamic_conv(x, self.bank, self.scores(x), self.bias)


# ---------------------------------------------------------------------------
# convolutional block (expansion -> depthwise -> attention -> compression)


class ConvBlock(Module):
    """1x1 expand + BN + GELU, depthwise 3x3 + BN + GELU, channel attention
    (DCAB by default), then 1x1 + BN projecting back to the input width,
    added residually onto the input."""

    def __init__(self, rng, cfg: BlockConfig, attention="DCAB"):
        super().__init__()
        cfg.validate()
        c, ce = cfg.channels_in, cfg.channels_expanded
        self.expand = self.add_module("expand", Conv2d(rng, c, ce, k=1))
        self.bn1 = self.add_module("bn1", BatchNorm2d(ce))
        self.dw = self.add_module("dw", Conv2d(rng, ce, ce, k=3, padding=1, groups=ce))
        self.bn2 = self.add_module("bn2", BatchNorm2d(ce))
        if attention == "DCAB":
            self.attn = self.add_module("attn", DCAB(rng, ce, cfg.num_dyn_kernels))
        else:
            self.attn = self.add_module("attn", make_attention_baseline(rng, ce, attention))
        self.project = self.add_module("project", Conv2d(rng, ce, c, k=1))
        self.bn3 = self.add_module("bn3", BatchNorm2d(c))
        self.channels_in = c

    def forward(self, x, train=False):
        if x.data.shape[1] != self.channels_in:
            raise ShapeError(
                f"conv_block: expected {self.channels_in} channels, got {x.data.shape[1]}")
        h = ad.gelu(self.bn1.forward(self.expand.forward(x), train))
        h = ad.gelu(self.bn2.forward(self.dw.forward(h), train))
        h = self.attn.forward(h, train)
        return ad.add(x, self.bn3.forward(self.project.forward(h), train))


# ---------------------------------------------------------------------------
# separable cross-attention transformer block


class TransformerBlock(Module):
    """Cross-attention with separable (context-score) attention on unfolded
    tokens: scores come from the query source, key/value from the other
    stream; a gated 1x1 projection redistributes the pooled context.
    Residual connections wrap both the attention and the feed-forward."""

    def __init__(self, rng, dim, heads=1, ffn_ratio=2):
        super().__init__()
        if dim % heads:
            raise ConfigError("heads must divide the attention dim")
        self.dim = dim
        self.heads = heads
        # no bias: softmax over tokens is invariant to a per-head shift
        self.score = self.add_module("score", Conv2d(rng, dim, heads, k=1, bias=False))
        self.key = self.add_module("key", Conv2d(rng, dim, dim, k=1))
        self.value = self.add_module("value", Conv2d(rng, dim, dim, k=1))
        self.out = self.add_module("out", Conv2d(rng, dim, dim, k=1))
        self.ffn1 = self.add_module("ffn1", Conv2d(rng, dim, dim * ffn_ratio, k=1))
        self.ffn2 = self.add_module("ffn2", Conv2d(rng, dim * ffn_ratio, dim, k=1))

    def forward(self, q_src, kv_src, train=False):
        if q_src.data.shape != kv_src.data.shape:
            raise ShapeError(
                f"transformer_block: source shapes differ: "
                f"{q_src.data.shape} vs {kv_src.data.shape}")
        b, a, p, n = q_src.data.shape
        s = ad.softmax(self.score.forward(q_src), axis=3)        # (B, H, P, N)
        k = self.key.forward(kv_src)
        v = self.value.forward(kv_src)
        if self.heads == 1:
            ctx = ad.tsum(ad.mul(s, k), axis=3, keepdims=True)   # (B, A, P, 1)
            pooled = ad.mul(ad.gelu(v), ctx)
        else:
            hdim = a // self.heads
            k5 = ad.reshape(k, (b, self.heads, hdim, p, n))
            v5 = ad.reshape(v, (b, self.heads, hdim, p, n))
            s5 = ad.reshape(s, (b, self.heads, 1, p, n))
            ctx = ad.tsum(ad.mul(s5, k5), axis=4, keepdims=True)
            pooled = ad.reshape(ad.mul(ad.gelu(v5), ctx), (b, a, p, n))
        y = ad.add(kv_src, self.out.forward(pooled))
        return ad.add(y, self.ffn2.forward(ad.gelu(self.ffn1.forward(y))))


# ---------------------------------------------------------------------------
# difference extraction


class DifferenceExtraction(Module):
    """Concat each stream with its signed difference, then a shared
    1x1 conv + BN + GELU projection back to the original channel width,
    added residually through a per-channel scale.  The shared projection
    keeps the block symmetric under stream swap; the small initial scale
    keeps it near-identity at the start of training."""

    def __init__(self, rng, c):
        super().__init__()
        self.proj = self.add_module("proj", Conv2d(rng, 2 * c, c, k=1))
        self.bn = self.add_module("bn", BatchNorm2d(c))
        self.scale = self.add_param("scale", np.full((1, c, 1, 1), 0.1))

    def _branch(self, x, diff, train):
        h = ad.gelu(self.bn.forward(
            self.proj.forward(ad.concat([x, diff], axis=1)), train))
        return ad.add(x, ad.mul(self.scale, h))

    def forward(self, a, b, train=False):
        if a.data.shape != b.data.shape:
            raise ShapeError(
                f"difference_extraction: shapes differ: {a.data.shape} vs {b.data.shape}")
        a_out = self._branch(a, ad.sub(a, b), train)
        b_out = self._branch(b, ad.sub(b, a), train)
        return a_out, b_out
