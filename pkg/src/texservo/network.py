"""Full pose-difference regression network: shared patch-embedding backbone,
projection, stacked difference-extraction attention layers, and the GAP + FC
head, plus the concat baseline and ablation variants.  Includes the
versioned binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import (BlockConfig, ChannelLayerNorm, Conv2d, ConvBlock,
                     DifferenceExtraction, Linear, Module, TokenLayerNorm,
                     TransformerBlock)
from .errors import CheckpointError, ConfigError, ShapeError

VARIANTS = ("DCAB", "SE", "ECA", "GRN", "NoDiffBlock", "ConcatBaseline")


@dataclass
class NetConfig:
    input_hw: tuple = (54, 96)        # (H, W) pixels
    backbone_patch: tuple = (6, 8)    # (ph, pw); must divide input_hw
    backbone_dim: int = 64
    backbone_layers: int = 2
    embed_dim: int = 64               # width after the post-backbone projection
    expansion: int = 2                # conv-block channel expansion factor
    attn_ratio: float = 0.5           # attention dim = embed_dim * ratio
    unfold_patch: int = 3             # must divide the token-grid dims
    heads: int = 1
    num_dyn_kernels: int = 4
    deam_layers: int = 1              # K
    conv_blocks: object = 1           # L: int or per-layer list
    transformer_blocks: object = 1    # M: int or per-layer list
    head_hidden: int = 64
    variant: str = "DCAB"

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.backbone_patch = tuple(int(v) for v in self.backbone_patch)

    def per_layer(self, v):
        if isinstance(v, int):
            return [v] * self.deam_layers
        v = list(int(x) for x in v)
        if len(v) != self.deam_layers:
            raise ConfigError(f"per-layer list {v} must have length K={self.deam_layers}")
        return v

    def grid_hw(self):
        return (self.input_hw[0] // self.backbone_patch[0],
                self.input_hw[1] // self.backbone_patch[1])

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (choose from {VARIANTS})")
        h, w = self.input_hw
        ph, pw = self.backbone_patch
        if h % ph or w % pw:
            raise ConfigError(f"backbone patch {self.backbone_patch} must divide input {self.input_hw}")
        gh, gw = self.grid_hw()
        if self.variant != "ConcatBaseline":
            if self.deam_layers < 1:
                raise ConfigError("deam_layers (K) must be >= 1 for DEAM variants")
            if gh % self.unfold_patch or gw % self.unfold_patch:
                raise ConfigError(
                    f"unfold patch {self.unfold_patch} must divide token grid ({gh},{gw})")
            self.per_layer(self.conv_blocks)
            self.per_layer(self.transformer_blocks)
        if self.embed_dim < 1 or self.backbone_dim < 1:
            raise ConfigError("embedding widths must be positive")
        return self

    def attn_dim(self):
        return max(int(round(self.embed_dim * self.attn_ratio)), 4)

    def to_dict(self):
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["backbone_patch"] = list(self.backbone_patch)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def normalize_image(img):
    """Per-image min-max normalization to [0, 1] (flat images map to 0)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


class Backbone(Module):
    """Trainable patch-embedding transformer emitting a 2-D token grid
    reshaped row-major to an NCHW feature map (no class token)."""

    def __init__(self, rng, cfg: NetConfig):
        super().__init__()
        ph, pw = cfg.backbone_patch
        gh, gw = cfg.grid_hw()
        d = cfg.backbone_dim
        self.cfg = cfg
        self.embed = self.add_module("embed", Linear(rng, ph * pw, d))
        self.pos = self.add_param("pos", rng.normal(scale=0.02, size=(gh * gw, d)))
        self.layers = []
        for i in range(cfg.backbone_layers):
            layer = EncoderLayer(rng, d)
            self.layers.append(self.add_module(f"layer{i}", layer))

    def forward(self, images):
        """(B, 1, H, W) image batch -> (B, D, gh, gw) feature map."""
        cfg = self.cfg
        b = images.data.shape[0]
        ph, pw = cfg.backbone_patch
        gh, gw = cfg.grid_hw()
        n, d = gh * gw, cfg.backbone_dim
        u = ad.unfold(images, (ph, pw))                   # (B, 1, ph*pw, N)
        u = ad.transpose(ad.reshape(u, (b, ph * pw, n)), (0, 2, 1))
        tokens = ad.reshape(self.embed.forward(ad.reshape(u, (b * n, ph * pw))), (b, n, d))
        tokens = ad.add(tokens, self.pos)
        for layer in self.layers:
            tokens = layer.forward(tokens)
        fmap = ad.transpose(tokens, (0, 2, 1))            # (B, D, N) row-major grid
        return ad.reshape(fmap, (b, d, gh, gw))


class EncoderLayer(Module):
    """Pre-norm self-attention + FFN with residuals, single head."""

    def __init__(self, rng, d, ffn_ratio=2):
        super().__init__()
        self.d = d
        self.ln1 = self.add_module("ln1", TokenLayerNorm(d))
        self.q = self.add_module("q", Linear(rng, d, d))
        self.k = self.add_module("k", Linear(rng, d, d))
        self.v = self.add_module("v", Linear(rng, d, d))
        self.o = self.add_module("o", Linear(rng, d, d))
        self.ln2 = self.add_module("ln2", TokenLayerNorm(d))
        self.f1 = self.add_module("f1", Linear(rng, d, d * ffn_ratio))
        self.f2 = self.add_module("f2", Linear(rng, d * ffn_ratio, d))

    def _proj(self, lin, x, b, n):
        return ad.reshape(lin.forward(ad.reshape(x, (b * n, self.d))), (b, n, self.d))

    def forward(self, tokens):
        b, n, d = tokens.data.shape
        h = self.ln1.forward(tokens)
        q = self._proj(self.q, h, b, n)
        k = self._proj(self.k, h, b, n)
        v = self._proj(self.v, h, b, n)
        attn = ad.softmax(ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d)),
                          axis=2)
        h = self._proj(self.o, ad.bmm(attn, v), b, n)
        tokens = ad.add(tokens, h)
        h2 = self.ln2.forward(tokens)
        h2 = ad.reshape(self.f2.forward(ad.gelu(self.f1.forward(ad.reshape(h2, (b * n, d))))),
                        (b, n, d))
        return ad.add(tokens, h2)


class DeamLayer(Module):
    """One difference-extraction attention layer: L shared conv blocks per
    stream, a 1x1 down-projection, M cross-attention transformer blocks per
    branch on unfolded tokens, a 1x1 up-projection, then the difference
    extraction block (omitted for the NoDiffBlock variant)."""

    def __init__(self, rng, cfg: NetConfig, n_conv, n_trans, use_diff):
        super().__init__()
        c = cfg.embed_dim
        a = cfg.attn_dim()
        bc = BlockConfig(channels_in=c, channels_expanded=c * cfg.expansion,
                         embed_dim=a, num_dyn_kernels=cfg.num_dyn_kernels,
                         patch_size=cfg.unfold_patch, heads=cfg.heads)
        attn_kind = cfg.variant if cfg.variant in ("SE", "ECA", "GRN") else "DCAB"
        self.conv_blocks = [self.add_module(f"conv{i}", ConvBlock(rng, bc, attention=attn_kind))
                            for i in range(n_conv)]
        self.down = self.add_module("down", Conv2d(rng, c, a, k=1))
        self.up = self.add_module("up", Conv2d(rng, a, c, k=1))
        self.t_desired = [self.add_module(f"tdes{i}", TransformerBlock(rng, a, heads=cfg.heads))
                          for i in range(n_trans)]
        self.t_current = [self.add_module(f"tcur{i}", TransformerBlock(rng, a, heads=cfg.heads))
                          for i in range(n_trans)]
        self.diff = self.add_module("diff", DifferenceExtraction(rng, c)) if use_diff else None
        self.patch = cfg.unfold_patch

    def forward(self, des, cur, train=False):
        for cb in self.conv_blocks:
            des = cb.forward(des, train)
            cur = cb.forward(cur, train)
        hw = des.data.shape[2:]
        ud = ad.unfold(self.down.forward(des), self.patch)
        uc = ad.unfold(self.down.forward(cur), self.patch)
        for td, tc in zip(self.t_desired, self.t_current):
            # desired branch: queries from current, key/value from desired;
            # the current branch wires the complementary direction.
            ud_new = td.forward(uc, ud, train)
            uc_new = tc.forward(ud, uc, train)
            ud, uc = ud_new, uc_new
        des = self.up.forward(ad.fold(ud, self.patch, hw))
        cur = self.up.forward(ad.fold(uc, self.patch, hw))
        if self.diff is not None:
            des, cur = self.diff.forward(des, cur, train)
        return des, cur

    def wiring(self):
        return [("desired-branch", "Q<-current", "KV<-desired"),
                ("current-branch", "Q<-desired", "KV<-current")]


class Network(Module):
    """End-to-end image-pair -> normalized 6-vector pose-difference model."""

    def __init__(self, cfg: NetConfig, seed: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = self.add_module("backbone", Backbone(rng, cfg))
        self.project = self.add_module(
            "project", Conv2d(rng, cfg.backbone_dim, cfg.embed_dim, k=1))
        self.project_ln = self.add_module("project_ln", ChannelLayerNorm(cfg.embed_dim))
        self.deam = []
        if cfg.variant != "ConcatBaseline":
            use_diff = cfg.variant != "NoDiffBlock"
            ls = cfg.per_layer(cfg.conv_blocks)
            ms = cfg.per_layer(cfg.transformer_blocks)
            for i in range(cfg.deam_layers):
                layer = DeamLayer(rng, cfg, ls[i], ms[i], use_diff)
                self.deam.append(self.add_module(f"deam{i}", layer))
        self.fc1 = self.add_module("fc1", Linear(rng, 2 * cfg.embed_dim, cfg.head_hidden))
        self.fc2 = self.add_module("fc2", Linear(rng, cfg.head_hidden, 6))

    # -- batched tensor paths (used by the trainer) --

    def _check_batch(self, arr):
        h, w = self.cfg.input_hw
        if arr.shape[1:] != (1, h, w):
            raise ShapeError(f"expected (B, 1, {h}, {w}) images, got {arr.shape}")

    def streams(self, des, cur, train=False):
        self._check_batch(des.data)
        self._check_batch(cur.data)
        d = ad.gelu(self.project_ln.forward(self.project.forward(self.backbone.forward(des))))
        c = ad.gelu(self.project_ln.forward(self.project.forward(self.backbone.forward(cur))))
        for layer in self.deam:
            d, c = layer.forward(d, c, train)
        return d, c

    def gap_features_batch(self, des, cur, train=False):
        d, c = self.streams(des, cur, train)
        return ad.global_avg_pool(ad.concat([d, c], axis=1))

    def forward_batch(self, des, cur, train=False):
        feats = self.gap_features_batch(des, cur, train)
        return self.fc2.forward(ad.gelu(self.fc1.forward(feats)))

    # -- single-pair convenience paths (eval mode, per-image normalization) --

    def _prep(self, img):
        h, w = self.cfg.input_hw
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (h, w):
            raise ShapeError(f"expected {h}x{w} image, got {img.shape}")
        return normalize_image(img)[None, None]

    def predict(self, i_des, i_cur):
        """Normalized 6-vector pose difference for one image pair."""
        out = self.forward_batch(ad.Tensor(self._prep(i_des)), ad.Tensor(self._prep(i_cur)))
        return out.data[0].copy()

    def extract_gap_features(self, i_des, i_cur):
        """Post-GAP, pre-FC feature vector (length 2 * embed_dim)."""
        out = self.gap_features_batch(ad.Tensor(self._prep(i_des)), ad.Tensor(self._prep(i_cur)))
        return out.data[0].copy()

    def wiring_report(self):
        return [(f"deam{i}",) + w for i, layer in enumerate(self.deam) for w in layer.wiring()]

    def param_vector(self):
        return np.concatenate([p.data.reshape(-1) for _, p in sorted(self.named_parameters())])


def build_network(cfg: NetConfig, seed: int) -> Network:
    """Deterministic construction: same config + seed -> identical weights."""
    return Network(cfg, seed)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config digest, named float64 LE blobs

_MAGIC = b"TXSV"
_VERSION = 1


def _write_blob(f, name, arr):
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(f):
    raw = f.read(2)
    if not raw:
        return None
    (nlen,) = struct.unpack("<H", raw)
    name = f.read(nlen).decode()
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def save_checkpoint(path, net: Network):
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        digest = net.cfg.digest().encode()
        f.write(struct.pack("<H", len(digest)))
        f.write(digest)
        cfg_json = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_blob(f, name, params[name].data)
        f.write(struct.pack("<I", len(buffers)))
        for name in sorted(buffers):
            _write_blob(f, name, buffers[name])


def load_checkpoint(path, cfg: NetConfig | None = None, seed: int = 0) -> Network:
    """Rebuild a network from a checkpoint.  If ``cfg`` is given its digest
    must match the stored one; otherwise the stored config is used."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (dlen,) = struct.unpack("<H", f.read(2))
        digest = f.read(dlen).decode()
        (clen,) = struct.unpack("<I", f.read(4))
        stored_cfg = NetConfig.from_dict(json.loads(f.read(clen).decode()))
        if cfg is not None and cfg.digest() != digest:
            raise CheckpointError(
                f"{path}: config digest mismatch ({cfg.digest()[:12]} vs {digest[:12]})")
        net = Network(stored_cfg, seed)
        params = dict(net.named_parameters())
        buffers = dict(net.named_buffers())
        (np_count,) = struct.unpack("<I", f.read(4))
        for _ in range(np_count):
            name, arr = _read_blob(f)
            if name not in params:
                raise CheckpointError(f"{path}: unexpected parameter '{name}'")
            if params[name].data.shape != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for '{name}'")
            params[name].data = np.ascontiguousarray(arr)
        (nb_count,) = struct.unpack("<I", f.read(4))
        for _ in range(nb_count):
            name, arr = _read_blob(f)
            if name not in buffers:
                raise CheckpointError(f"{path}: unexpected buffer '{name}'")
            buffers[name][...] = arr
    return net
