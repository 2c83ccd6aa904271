"""Low-rank adaptation of frozen linear maps.

Weights use the ``[d_out, d_in]`` layout, so an adapted layer computes::

    y = x W^T + b + scale * dropout(x) A^T B^T,    scale = alpha / r

with ``A: [r, d_in]`` and ``B: [d_out, r]``. Merging folds ``scale * B A`` into
``W``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataFormatError, DimensionError, StateError
from .nn import Module, parameter
from .tensor import Tensor

INIT_MODES = ("zero_B", "both_random")
SCALE_MODES = ("nominal", "numeric_rank")
STRATEGIES = ("full", "frozen", "lora")


@dataclass(frozen=True)
class Strategy:
    """Which parameters train: everything, the decoder only, or adapters + decoder."""

    kind: str = "frozen"
    rank: int | None = None
    alpha: float | None = None
    dropout: float = 0.1
    init_mode: str = "zero_B"
    scale_mode: str = "nominal"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind == "lora":
            if self.rank is None or int(self.rank) < 1:
                raise ConfigurationError("lora strategy needs a rank >= 1")
            if self.alpha is None:
                object.__setattr__(self, "alpha", 2.0 * self.rank)
            if self.alpha <= 0:
                raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
            if not 0.0 <= self.dropout < 1.0:
                raise ConfigurationError(f"lora dropout must be in [0, 1), got {self.dropout}")
            if self.init_mode not in INIT_MODES:
                raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")
            if self.scale_mode not in SCALE_MODES:
                raise ConfigurationError(f"unknown scale_mode {self.scale_mode!r}")

    @classmethod
    def lora(cls, rank: int, alpha: float | None = None, dropout: float = 0.1, **kw) -> "Strategy":
        return cls(kind="lora", rank=int(rank), alpha=alpha, dropout=dropout, **kw)

    @property
    def label(self) -> str:
        return f"lora-r{self.rank}" if self.kind == "lora" else self.kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Strategy":
        return cls(**d)


class LoraAdapter(Module):
    def __init__(self, A, B, rank: int, alpha: float, dropout_p: float = 0.0,
                 init_mode: str = "zero_B", scale_mode: str = "nominal"):
        self.A = A if isinstance(A, Tensor) else parameter(A)
        self.B = B if isinstance(B, Tensor) else parameter(B)
        self._rank = int(rank)
        self._alpha = float(alpha)
        self._dropout_p = float(dropout_p)
        self._init_mode = init_mode
        self._scale_mode = scale_mode

    r = property(lambda self: self._rank)
    alpha = property(lambda self: self._alpha)
    dropout_p = property(lambda self: self._dropout_p)
    init_mode = property(lambda self: self._init_mode)
    scale_mode = property(lambda self: self._scale_mode)

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scale(self) -> float:
        if self._scale_mode == "nominal":
            return self._alpha / self._rank
        numeric = np.linalg.matrix_rank(self.B.data @ self.A.data)
        # B A == 0 when its numeric rank is 0, so the branch contributes nothing
        return self._alpha / numeric if numeric else 0.0

    def delta(self) -> np.ndarray:
        """Dense weight update ``scale * B A`` in ``[d_out, d_in]`` layout."""
        return self.scale * (self.B.data @ self.A.data)

    def num_trainable(self) -> int:
        return self._rank * (self.d_in + self.d_out)

    def manifest(self) -> dict:
        return {
            "d_in": self.d_in,
            "d_out": self.d_out,
            "r": self._rank,
            "alpha": self._alpha,
            "dropout_p": self._dropout_p,
            "init_mode": self._init_mode,
            "scale_mode": self._scale_mode,
        }


def init_adapter(d_in: int, d_out: int, r: int, alpha: float, dropout_p: float,
                 init_mode: str = "zero_B", rng: np.random.Generator | None = None,
                 scale_mode: str = "nominal") -> LoraAdapter:
    if not 1 <= r <= min(d_in, d_out):
        raise ConfigurationError(f"rank {r} outside [1, min(d_in, d_out)] = [1, {min(d_in, d_out)}]")
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigurationError(f"dropout_p must be in [0, 1), got {dropout_p}")
    if rng is None:
        raise ConfigurationError("init_adapter needs an explicit random generator")
    if init_mode == "zero_B":
        bound = 1.0 / np.sqrt(d_in)
        A = rng.uniform(-bound, bound, size=(r, d_in))
        B = np.zeros((d_out, r))
    elif init_mode == "both_random":
        A = rng.normal(0.0, 0.02, size=(r, d_in))
        B = rng.normal(0.0, 0.02, size=(d_out, r))
    else:
        raise ConfigurationError(f"unknown init_mode {init_mode!r}; expected one of {INIT_MODES}")
    return LoraAdapter(A, B, r, alpha, dropout_p, init_mode, scale_mode)


class AdaptedLinear(Module):
    """A linear map with an optional low-rank adapter on its weight."""

    def __init__(self, weight, bias=None, adapter: LoraAdapter | None = None):
        self.weight = weight if isinstance(weight, Tensor) else parameter(weight)
        self.bias = None if bias is None else (bias if isinstance(bias, Tensor) else parameter(bias))
        self.adapter = None
        self._merged = False
        if adapter is not None:
            self.attach(adapter)

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> "AdaptedLinear":
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        b = rng.uniform(-bound, bound, size=(d_out,)) if bias else None
        return cls(w, b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def merged(self) -> bool:
        return self._merged

    def attach(self, adapter: LoraAdapter) -> None:
        if adapter.d_in != self.d_in or adapter.d_out != self.d_out:
            raise DimensionError(
                f"adapter ({adapter.d_in}->{adapter.d_out}) does not fit layer ({self.d_in}->{self.d_out})"
            )
        self.adapter = adapter
        self._merged = False
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return adapted_forward(self, x, training, rng)

    def merge(self) -> "AdaptedLinear":
        if self.adapter is None:
            raise StateError("cannot merge: layer has no adapter")
        if self._merged:
            raise StateError("adapter is already merged")
        self.weight.data = self.weight.data + self.adapter.delta()
        self._merged = True
        return self

    def unmerge(self) -> "AdaptedLinear":
        if self.adapter is None:
            raise StateError("cannot unmerge: layer has no adapter")
        if not self._merged:
            raise StateError("adapter is not merged")
        self.weight.data = self.weight.data - self.adapter.delta()
        self._merged = False
        return self

    def param_inventory(self):
        items = [ParamItem("weight", self.weight.shape, "encoder")]
        if self.bias is not None:
            items.append(ParamItem("bias", self.bias.shape, "encoder"))
        return ParamInventory(items, [AdaptedSite("", self.d_in, self.d_out)])


def adapted_forward(layer: AdaptedLinear, x: Tensor, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != layer.d_in:
        raise DimensionError(f"input last extent {x.shape[-1]} != layer d_in {layer.d_in}")
    if x.ndim == 1:
        return T.reshape(adapted_forward(layer, T.reshape(x, (1, -1)), training, rng), (layer.d_out,))
    y = T.linear(x, layer.weight, layer.bias)
    ad = layer.adapter
    if ad is None or layer.merged:
        return y
    scale = ad.scale
    h = T.dropout(x, ad.dropout_p, training, rng)
    h = T.matmul(T.matmul(h, T.transpose(ad.A)), T.transpose(ad.B))
    return T.add(y, T.mul(h, scale))


# ---------------------------------------------------------------- accounting


@dataclass(frozen=True)
class ParamItem:
    name: str
    shape: tuple
    part: str  # "encoder" | "decoder"

    @property
    def count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class AdaptedSite:
    name: str
    d_in: int
    d_out: int


@dataclass
class ParamInventory:
    items: list[ParamItem]
    sites: list[AdaptedSite] = field(default_factory=list)


@dataclass
class ParamCountReport:
    strategy: str
    per_layer: list[tuple[str, int]]
    encoder: int
    adapters: int
    decoder: int

    @property
    def total(self) -> int:
        return self.encoder + self.adapters + self.decoder

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "total": self.total,
            "encoder": self.encoder,
            "adapters": self.adapters,
            "decoder": self.decoder,
            "per_layer": [{"name": n, "count": c} for n, c in self.per_layer],
        }


def adapter_param_count(d_in: int, d_out: int, r: int) -> int:
    return r * (d_in + d_out)


def count_trainable(target, strategy: Strategy) -> ParamCountReport:
    """Trainable parameters of ``target`` under ``strategy``.

    ``target`` is anything with a ``param_inventory()`` method (a model, an
    :class:`AdaptedLinear`) or a :class:`ParamInventory`. The count is
    analytic, so full-size configurations need no allocation.
    """
    inv = target if isinstance(target, ParamInventory) else target.param_inventory()
    per_layer: list[tuple[str, int]] = []
    enc = dec = ada = 0
    for item in inv.items:
        if item.part == "decoder":
            dec += item.count
            per_layer.append((item.name, item.count))
        elif strategy.kind == "full":
            enc += item.count
            per_layer.append((item.name, item.count))
    if strategy.kind == "lora":
        for site in inv.sites:
            if not 1 <= strategy.rank <= min(site.d_in, site.d_out):
                raise ConfigurationError(f"rank {strategy.rank} too large for {site.name} ({site.d_in}x{site.d_out})")
            n = adapter_param_count(site.d_in, site.d_out, strategy.rank)
            ada += n
            per_layer.append((f"{site.name}.adapter".lstrip("."), n))
    return ParamCountReport(strategy.label, per_layer, enc, ada, dec)


# ---------------------------------------------------------------- serialization

_ADAPTER_MAGIC = b"FLRA"


def save_adapter(adapter: LoraAdapter, path) -> None:
    """Manifest JSON header, then raw little-endian float64 B followed by A."""
    manifest = json.dumps(adapter.manifest(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_ADAPTER_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(np.ascontiguousarray(adapter.B.data, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(adapter.A.data, dtype="<f8").tobytes())


def load_adapter(path) -> LoraAdapter:
    raw = Path(path).read_bytes()
    if raw[:4] != _ADAPTER_MAGIC or len(raw) < 8:
        raise DataFormatError(f"{path}: not an adapter file")
    (n,) = struct.unpack("<I", raw[4:8])
    m = json.loads(raw[8 : 8 + n])
    off = 8 + n
    nb = m["d_out"] * m["r"]
    na = m["r"] * m["d_in"]
    if len(raw) != off + 8 * (nb + na):
        raise DataFormatError(f"{path}: expected {8 * (nb + na)} payload bytes, found {len(raw) - off}")
    B = np.frombuffer(raw, "<f8", nb, off).reshape(m["d_out"], m["r"]).astype(np.float64)
    A = np.frombuffer(raw, "<f8", na, off + 8 * nb).reshape(m["r"], m["d_in"]).astype(np.float64)
    return LoraAdapter(A, B, m["r"], m["alpha"], m["dropout_p"], m["init_mode"], m.get("scale_mode", "nominal"))
