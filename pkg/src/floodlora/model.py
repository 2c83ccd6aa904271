"""ViT-style encoder with LoRA hooks and a deconvolution segmentation decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .lora import (
    AdaptedLinear,
    AdaptedSite,
    ParamInventory,
    ParamItem,
    Strategy,
    init_adapter,
)
from .nn import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    patch_size: int = 8
    in_channels: int = 4
    image_size: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "patch_size", "in_channels", "image_size", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size={self.image_size} not divisible by patch_size={self.patch_size}"
            )
        if self.d_model % 4:
            raise ConfigurationError("d_model must be divisible by 4 (2-D sinusoidal encoding, decoder taper)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


DESK_PRESET = EncoderConfig()
LARGE_PRESET = EncoderConfig(d_model=768, n_heads=12, n_layers=12, patch_size=8, in_channels=4, image_size=512)
PRESETS = {"desk": DESK_PRESET, "large": LARGE_PRESET}


def sincos_position_encoding(grid: int, d_model: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, ``[grid*grid, d_model]``; half the width per axis."""
    half = d_model // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half // 2) / (half // 2)))
    coords = np.arange(grid, dtype=np.float64)
    ang = coords[:, None] * freqs[None, :]
    axis_enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # [grid, half]
    rows = np.repeat(axis_enc, grid, axis=0)
    cols = np.tile(axis_enc, (grid, 1))
    return np.concatenate([rows, cols], axis=1)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """``[b, C, H, W] -> [b, (H/P)(W/P), C*P*P]`` in row-major patch order."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"spatial extents {(h, w)} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


class AttentionBlock(Module):
    """Pre-norm transformer block; adapters attach to ``to_qkv`` and ``to_out`` only."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.norm1 = LayerNorm(d)
        self.to_qkv = AdaptedLinear.create(d, 3 * d, rng)
        self.to_out = AdaptedLinear.create(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.mlp_in = Linear(d, cfg.mlp_ratio * d, rng)
        self.mlp_out = Linear(cfg.mlp_ratio * d, d, rng)
        self._n_heads = cfg.n_heads

    def attention(self, x: Tensor, training: bool = False, rng=None, return_weights: bool = False):
        b, n, d = x.shape
        if d != self.to_qkv.d_in:
            raise DimensionError(f"attention input width {d} != d_model {self.to_qkv.d_in}")
        h = self._n_heads
        dh = d // h
        qkv = self.to_qkv(x, training, rng)
        q, k, v = T.chunk3(qkv)

        def heads(t):
            return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        weights = T.softmax_lastdim(scores)
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        out = self.to_out(ctx, training, rng)
        return (out, weights) if return_weights else out

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        x = T.add(x, self.attention(self.norm1(x), training, rng))
        hidden = T.relu(self.mlp_in(self.norm2(x)))
        return T.add(x, self.mlp_out(hidden))


def attention_forward(block: AttentionBlock, X, training: bool = False, rng=None) -> Tensor:
    return block.attention(T.as_tensor(X), training, rng)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.patch_proj = Linear(cfg.patch_dim, cfg.d_model, rng)
        self.blocks = [AttentionBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.norm = LayerNorm(cfg.d_model)
        self._pos = sincos_position_encoding(cfg.grid, cfg.d_model)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    @property
    def position_encoding(self) -> np.ndarray:
        return self._pos

    def _check_input(self, x) -> None:
        cfg = self._cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected [b, {cfg.in_channels}, H, W] input, got {tuple(x.shape)}")
        if x.shape[2] % cfg.patch_size or x.shape[3] % cfg.patch_size:
            raise ConfigurationError(
                f"input extents {tuple(x.shape[2:])} not divisible by patch size {cfg.patch_size}"
            )
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise DimensionError(f"input extents {tuple(x.shape[2:])} != configured image size {cfg.image_size}")

    def patch_embed(self, x, patch_mask=None, mask_token: Tensor | None = None) -> Tensor:
        """Linear patch projection (+ optional mask-token substitution) + position encoding."""
        self._check_input(x)
        xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if isinstance(x, Tensor) and x.requires_grad:
            b, c, hh, ww = x.shape
            p = self._cfg.patch_size
            patches = T.reshape(
                T.transpose(T.reshape(x, (b, c, hh // p, p, ww // p, p)), (0, 2, 4, 1, 3, 5)),
                (b, (hh // p) * (ww // p), c * p * p),
            )
        else:
            patches = Tensor(patchify(xd, self._cfg.patch_size))
        emb = self.patch_proj(patches)
        if patch_mask is not None:
            m = np.asarray(patch_mask, dtype=np.float64)[..., None]
            emb = T.add(T.mul(emb, 1.0 - m), T.mul(mask_token, m))
        return T.add(emb, self._pos)

    def __call__(self, x, training: bool = False, rng=None, patch_mask=None, mask_token=None) -> Tensor:
        h = self.patch_embed(x, patch_mask, mask_token)
        for blk in self.blocks:
            h = blk(h, training, rng)
        return self.norm(h)

    def inventory(self, prefix: str = "encoder.") -> ParamInventory:
        return encoder_inventory(self._cfg, prefix)


class SegDecoder(Module):
    """conv x2 (3x3, ReLU) -> deconv x3 (2x2 stride 2, ReLU) per snapshot, then a fusing 3x3 conv."""

    def __init__(self, d_model: int, rng: np.random.Generator, n_snapshots: int = 2):
        chans = decoder_channels(d_model)
        self.conv1 = Conv2d(chans[0], chans[1], 3, rng, padding=1)
        self.conv2 = Conv2d(chans[1], chans[2], 3, rng, padding=1)
        self.deconv1 = ConvTranspose2d(chans[2], chans[3], 2, rng, stride=2)
        self.deconv2 = ConvTranspose2d(chans[3], chans[4], 2, rng, stride=2)
        self.deconv3 = ConvTranspose2d(chans[4], chans[5], 2, rng, stride=2)
        self.fusion_conv = Conv2d(n_snapshots * chans[5], 1, 3, rng, padding=1)
        self._d_model = d_model

    def decode(self, z: Tensor, grid: int) -> Tensor:
        b, n, d = z.shape
        if n != grid * grid or d != self._d_model:
            raise DimensionError(f"features {z.shape} do not reshape to [b, {self._d_model}, {grid}, {grid}]")
        fmap = T.transpose(T.reshape(z, (b, grid, grid, d)), (0, 3, 1, 2))
        h = T.relu(self.conv1(fmap))
        h = T.relu(self.conv2(h))
        h = T.relu(self.deconv1(h))
        h = T.relu(self.deconv2(h))
        return T.relu(self.deconv3(h))

    def __call__(self, z_pre: Tensor, z_post: Tensor, grid: int) -> Tensor:
        return decode_and_fuse(self, z_pre, z_post, grid)


DECODER_UPSAMPLE = 8  # three stride-2 deconvolutions


DECODER_MIN_CHANNELS = 8  # narrower tails cannot fit per-pixel detail at desk width


def decoder_channels(d_model: int) -> list[int]:
    c2 = d_model // 4
    tail = [max(DECODER_MIN_CHANNELS, c2 // k) for k in (2, 4, 8)]
    return [d_model, d_model // 2, c2, *tail]


def decode_and_fuse(decoder: SegDecoder, z_pre: Tensor, z_post: Tensor, grid: int) -> Tensor:
    if z_pre.shape != z_post.shape:
        raise DimensionError(f"snapshot features differ in shape: {z_pre.shape} vs {z_post.shape}")
    a = decoder.decode(z_pre, grid)
    b = decoder.decode(z_post, grid)
    return decoder.fusion_conv(T.concat([a, b], axis=1))


class SegModel(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, strategy: Strategy | None = None,
                 encoder: Encoder | None = None):
        if cfg.patch_size != DECODER_UPSAMPLE:
            raise ConfigurationError(
                f"decoder upsamples by {DECODER_UPSAMPLE}; patch_size {cfg.patch_size} would not restore H x W")
        self.encoder = encoder if encoder is not None else Encoder(cfg, rng)
        self.decoder = SegDecoder(cfg.d_model, rng)
        self._cfg = cfg
        self._strategy = Strategy("full")
        if strategy is not None:
            apply_strategy(self, strategy, rng)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    @property
    def strategy(self) -> Strategy:
        return self._strategy

    def attention_layers(self) -> list[tuple[str, AdaptedLinear]]:
        out = []
        for i, blk in enumerate(self.encoder.blocks):
            out.append((f"encoder.blocks.{i}.to_qkv", blk.to_qkv))
            out.append((f"encoder.blocks.{i}.to_out", blk.to_out))
        return out

    def encode(self, x, training: bool = False, rng=None) -> Tensor:
        return self.encoder(x, training, rng)

    def __call__(self, pre, post, training: bool = False, rng=None) -> Tensor:
        return forward(self, pre, post, training, rng)

    def param_inventory(self) -> ParamInventory:
        return model_inventory(self._cfg)

    def merge_adapters(self) -> None:
        for _, layer in self.attention_layers():
            layer.merge()

    def unmerge_adapters(self) -> None:
        for _, layer in self.attention_layers():
            layer.unmerge()


def encode(model: SegModel, x, training: bool = False, rng=None) -> Tensor:
    return model.encode(x, training, rng)


def forward(model: SegModel, pre, post, training: bool = False, rng=None) -> Tensor:
    """Raw logits ``[b, 1, H, W]``; the sigmoid lives in the losses and metrics."""
    if tuple(pre.shape) != tuple(post.shape):
        raise DimensionError(f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ")
    z_pre = model.encoder(pre, training, rng)
    z_post = model.encoder(post, training, rng)
    return decode_and_fuse(model.decoder, z_pre, z_post, model.config.grid)


def apply_strategy(model: SegModel, strategy: Strategy, rng: np.random.Generator | None = None) -> SegModel:
    """Set trainable flags and attach adapters for ``strategy``.

    Any existing adapters are dropped first (after unmerging), so a model can be
    re-targeted from one strategy to another on the same base weights.
    """
    for _, layer in model.attention_layers():
        if layer.adapter is not None and layer.merged:
            layer.unmerge()
        layer.adapter = None
    model.decoder.set_trainable(True)
    if strategy.kind == "full":
        model.encoder.set_trainable(True)
    else:
        model.encoder.set_trainable(False)
    if strategy.kind == "lora":
        if rng is None:
            raise ConfigurationError("lora strategy needs a random generator for adapter init")
        for _, layer in model.attention_layers():
            layer.attach(
                init_adapter(layer.d_in, layer.d_out, strategy.rank, strategy.alpha, strategy.dropout,
                             strategy.init_mode, rng, strategy.scale_mode)
            )
    model._strategy = strategy
    return model


# ---------------------------------------------------------------- analytic inventory


def encoder_inventory(cfg: EncoderConfig, prefix: str = "encoder.") -> ParamInventory:
    d, m = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    items = [
        ParamItem(f"{prefix}patch_proj.weight", (d, cfg.patch_dim), "encoder"),
        ParamItem(f"{prefix}patch_proj.bias", (d,), "encoder"),
    ]
    sites = []
    for i in range(cfg.n_layers):
        p = f"{prefix}blocks.{i}."
        items += [
            ParamItem(p + "norm1.gamma", (d,), "encoder"),
            ParamItem(p + "norm1.beta", (d,), "encoder"),
            ParamItem(p + "to_qkv.weight", (3 * d, d), "encoder"),
            ParamItem(p + "to_qkv.bias", (3 * d,), "encoder"),
            ParamItem(p + "to_out.weight", (d, d), "encoder"),
            ParamItem(p + "to_out.bias", (d,), "encoder"),
            ParamItem(p + "norm2.gamma", (d,), "encoder"),
            ParamItem(p + "norm2.beta", (d,), "encoder"),
            ParamItem(p + "mlp_in.weight", (m, d), "encoder"),
            ParamItem(p + "mlp_in.bias", (m,), "encoder"),
            ParamItem(p + "mlp_out.weight", (d, m), "encoder"),
            ParamItem(p + "mlp_out.bias", (d,), "encoder"),
        ]
        sites += [AdaptedSite(p + "to_qkv", d, 3 * d), AdaptedSite(p + "to_out", d, d)]
    items += [ParamItem(f"{prefix}norm.gamma", (d,), "encoder"), ParamItem(f"{prefix}norm.beta", (d,), "encoder")]
    return ParamInventory(items, sites)


def decoder_inventory(d_model: int, n_snapshots: int = 2, prefix: str = "decoder.") -> ParamInventory:
    c = decoder_channels(d_model)
    items = [
        ParamItem(prefix + "conv1.weight", (c[1], c[0], 3, 3), "decoder"),
        ParamItem(prefix + "conv1.bias", (c[1],), "decoder"),
        ParamItem(prefix + "conv2.weight", (c[2], c[1], 3, 3), "decoder"),
        ParamItem(prefix + "conv2.bias", (c[2],), "decoder"),
    ]
    for k, (ci, co) in enumerate(zip(c[2:5], c[3:6]), start=1):
        items += [
            ParamItem(prefix + f"deconv{k}.weight", (ci, co, 2, 2), "decoder"),
            ParamItem(prefix + f"deconv{k}.bias", (co,), "decoder"),
        ]
    items += [
        ParamItem(prefix + "fusion_conv.weight", (1, n_snapshots * c[5], 3, 3), "decoder"),
        ParamItem(prefix + "fusion_conv.bias", (1,), "decoder"),
    ]
    return ParamInventory(items)


def model_inventory(cfg: EncoderConfig) -> ParamInventory:
    enc = encoder_inventory(cfg)
    dec = decoder_inventory(cfg.d_model)
    return ParamInventory(enc.items + dec.items, enc.sites)
