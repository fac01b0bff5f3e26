"""Shared video-transformer backbone with one linear head per dataset.

Tensors follow ``B x T x H x W x C`` for clips and ``B x t x h x w x d`` for
token grids. Boxes are normalised ``(x1, y1, x2, y2)`` on the (padded) canvas.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CLASSIFICATION, DETECTION, TASKS
from .errors import ConfigError, DataFormatError, NumericalError

INIT_STD = 0.02
_DTYPES = {"float32": torch.float32, "float64": torch.float64}

_BACKBONE_STREAM = 0
_HEAD_STREAM = 1


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class HeadSpec:
    name: str
    task: str
    num_classes: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}", f"model.heads.{self.name}.task")
        if self.num_classes < 1:
            raise ConfigError("must be >= 1", f"model.heads.{self.name}.num_classes")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int, int] = (8, 32, 32, 3)
    tubelet: tuple[int, int, int] = (2, 16, 16)
    hidden_dim: int = 32
    num_layers: int = 2
    num_attention_heads: int = 4
    mlp_dim: int = 64
    stochastic_depth_rate: float = 0.2
    roi_grid: tuple[int, int] = (2, 2)
    heads: tuple[HeadSpec, ...] = field(default_factory=tuple)
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "tubelet", tuple(int(v) for v in self.tubelet))
        object.__setattr__(self, "roi_grid", tuple(int(v) for v in self.roi_grid))
        object.__setattr__(self, "heads", tuple(h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads))
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError("must be four positive ints (T, H, W, C)", "model.input_shape")
        if len(self.tubelet) != 3 or min(self.tubelet) < 1:
            raise ConfigError("must be three positive ints", "model.tubelet")
        for dim, p, name in zip(self.input_shape[:3], self.tubelet, "THW"):
            if dim % p:
                raise ConfigError(f"input {name}={dim} not divisible by tubelet size {p}", "model.tubelet")
        if self.hidden_dim < 1 or self.hidden_dim % self.num_attention_heads:
            raise ConfigError("hidden_dim must be a positive multiple of num_attention_heads", "model.hidden_dim")
        if self.num_layers < 0:
            raise ConfigError("must be >= 0", "model.num_layers")
        if not 0.0 <= self.stochastic_depth_rate < 1.0:
            raise ConfigError("must be in [0, 1)", "model.stochastic_depth_rate")
        if len(self.roi_grid) != 2 or min(self.roi_grid) < 1:
            raise ConfigError("must be two positive ints", "model.roi_grid")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"must be one of {sorted(_DTYPES)}", "model.dtype")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ConfigError("head names must be unique", "model.heads")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(n // p for n, p in zip(self.input_shape[:3], self.tubelet))

    @property
    def num_tokens(self) -> int:
        t, h, w = self.grid_shape
        return t * h * w

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def head_index(self, name: str) -> int:
        for i, h in enumerate(self.heads):
            if h.name == name:
                return i
        raise KeyError(f"no head named {name!r}")

    def to_dict(self):
        d = asdict(self)
        d["heads"] = [asdict(h) for h in self.heads]
        for k in ("input_shape", "tubelet", "roi_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["heads"] = tuple(HeadSpec(**h) for h in d.get("heads", ()))
        return cls(**d)


def token_grid_shape(input_shape: Sequence[int], tubelet: Sequence[int]) -> tuple[int, int, int]:
    T, H, W = input_shape[:3]
    pt, ph, pw = tubelet
    if T % pt or H % ph or W % pw:
        raise ValueError(f"input {tuple(input_shape[:3])} not divisible by tubelet {tuple(tubelet)}")
    return T // pt, H // ph, W // pw


class Tokenizer(nn.Module):
    """Linear tubelet embedding plus one learned positional vector per token.

    Pixels are mapped from [0, 1] to [-1, 1] before the projection.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.tubelet = config.tubelet
        self.grid = config.grid_shape
        c = config.input_shape[3]
        self.proj = nn.Linear(c * math.prod(config.tubelet), config.hidden_dim)
        self.pos_embedding = nn.Parameter(torch.zeros(*self.grid, config.hidden_dim))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = clips.shape
        pt, ph, pw = self.tubelet
        if T % pt or H % ph or W % pw:
            raise ValueError(f"clip dims {(T, H, W)} not divisible by tubelet {self.tubelet}")
        t, h, w = T // pt, H // ph, W // pw
        if (t, h, w) != self.grid:
            raise ValueError(f"clip yields token grid {(t, h, w)}, model expects {self.grid}")
        x = clips.reshape(B, t, pt, h, ph, w, pw, C).permute(0, 1, 3, 5, 2, 4, 6, 7)
        x = x.reshape(B, t, h, w, pt * ph * pw * C)
        return self.proj(2.0 * x - 1.0) + self.pos_embedding


def drop_path(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None) -> torch.Tensor:
    """Per-sample residual-branch dropout with inverted scaling."""
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = torch.rand((x.shape[0],) + (1,) * (x.ndim - 1), generator=generator, dtype=x.dtype) < keep
    return x * mask.to(x.dtype) / keep


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // self.num_heads)
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, N, D))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_dim: int, drop_rate: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))
        self.drop_rate = drop_rate

    def forward(self, x, training=False, generator=None):
        x = x + drop_path(self.attn(self.norm1(x)), self.drop_rate, training, generator)
        x = x + drop_path(self.mlp(self.norm2(x)), self.drop_rate, training, generator)
        return x


class Encoder(nn.Module):
    """Joint space-time self-attention over all tubelet tokens (pre-norm, no final norm)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderBlock(config.hidden_dim, config.num_attention_heads, config.mlp_dim, config.stochastic_depth_rate)
            for _ in range(config.num_layers)
        )

    def forward(self, tokens: torch.Tensor, training=False, generator=None) -> torch.Tensor:
        B, t, h, w, d = tokens.shape
        x = tokens.reshape(B, t * h * w, d)
        for layer in self.layers:
            x = layer(x, training, generator)
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite activations in encoder output")
        return x.reshape(B, t, h, w, d)


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.tokenizer = Tokenizer(config)
        self.encoder = Encoder(config)

    def forward(self, clips, training=False, generator=None):
        return self.encoder(self.tokenizer(clips), training, generator)


def _bilinear_axis(lo: torch.Tensor, hi: torch.Tensor, bins: int, size: int):
    """Sample positions at bin centres of ``[lo, hi]`` on a ``size``-cell axis.

    Token ``i`` sits at normalised coordinate ``(i + 0.5) / size``. Positions
    are clamped to the outermost token centres.
    """
    frac = (torch.arange(bins, dtype=lo.dtype) + 0.5) / bins
    pos = (lo[:, None] + (hi - lo)[:, None] * frac) * size - 0.5
    pos = pos.clamp(0.0, size - 1.0)
    i0 = pos.floor().long().clamp(max=size - 1)
    i1 = (i0 + 1).clamp(max=size - 1)
    return i0, i1, pos - i0.to(pos.dtype)


def roi_align_batch(tokens: torch.Tensor, boxes: torch.Tensor, batch_index: torch.Tensor,
                    roi_grid: Sequence[int]) -> torch.Tensor:
    """Tube ROI-Align: pool every box over all temporal slices.

    tokens: ``B x t x h x w x d``; boxes: ``M x 4``; batch_index: ``M``.
    One bilinear sample per bin centre on an ``s_h x s_w`` grid, averaged over
    bins and time. Returns ``M x d``.
    """
    B, t, h, w, d = tokens.shape
    sh, sw = roi_grid
    boxes = boxes.to(tokens.dtype)
    bw = (boxes[:, 2] - boxes[:, 0]) * w
    bh = (boxes[:, 3] - boxes[:, 1]) * h
    bad = (bw <= 1e-6) | (bh <= 1e-6)
    if bad.any():
        j = int(bad.nonzero()[0, 0])
        raise ValueError(f"degenerate box {boxes[j].tolist()} on a {h}x{w} token map")
    if boxes.shape[0] == 0:
        return tokens.new_zeros((0, d))
    u0, u1, fu = _bilinear_axis(boxes[:, 0], boxes[:, 2], sw, w)  # M x sw
    v0, v1, fv = _bilinear_axis(boxes[:, 1], boxes[:, 3], sh, h)  # M x sh
    grid = tokens.permute(0, 2, 3, 1, 4)  # B x h x w x t x d
    b = batch_index.long()[:, None, None]

    def gather(v, u):
        return grid[b, v[:, :, None], u[:, None, :]]  # M x sh x sw x t x d

    fu = fu[:, None, :, None, None]
    fv = fv[:, :, None, None, None]
    val = ((1 - fv) * (1 - fu) * gather(v0, u0) + (1 - fv) * fu * gather(v0, u1)
           + fv * (1 - fu) * gather(v1, u0) + fv * fu * gather(v1, u1))
    return val.mean(dim=(1, 2, 3))


def roi_align(tokens: torch.Tensor, box, roi_grid: Sequence[int]) -> torch.Tensor:
    """Single-box convenience wrapper; ``tokens`` is ``t x h x w x d``."""
    boxes = torch.as_tensor([box], dtype=tokens.dtype)
    return roi_align_batch(tokens[None], boxes, torch.zeros(1, dtype=torch.long), roi_grid)[0]


def classify_head(tokens: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Average all tokens then project. ``tokens``: ``B x t x h x w x d``."""
    return head(tokens.mean(dim=(1, 2, 3)))


def detect_head(tokens, boxes, batch_index, head: nn.Linear, roi_grid) -> torch.Tensor:
    return head(roi_align_batch(tokens, boxes, batch_index, roi_grid))


class CofinetuneModel(nn.Module):
    """Backbone parameters plus one ``nn.Linear`` head per dataset (with bias)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        if not config.heads:
            raise ConfigError("at least one head is required", "model.heads")
        self.config = config
        self.backbone = Backbone(config)
        self.heads = nn.ModuleList(nn.Linear(config.hidden_dim, h.num_classes) for h in config.heads)
        self.to(config.torch_dtype)
        self.reset_backbone(seed)
        for i in range(len(self.heads)):
            self.reset_head(i, seed)

    @staticmethod
    def _init_module(module: nn.Module, generator: torch.Generator):
        for name, p in sorted(module.named_parameters()):
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in f".{name}" and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)

    def reset_backbone(self, seed: int):
        g = torch.Generator().manual_seed(derive_seed(seed, _BACKBONE_STREAM))
        self._init_module(self.backbone, g)

    def reset_head(self, index: int, seed: int):
        g = torch.Generator().manual_seed(derive_seed(seed, _HEAD_STREAM, index))
        self._init_module(self.heads[index], g)

    def backbone_parameters(self):
        return dict(self.backbone.named_parameters(prefix="backbone"))

    def head_parameters(self, index: int):
        return dict(self.heads[index].named_parameters(prefix=f"heads.{index}"))

    def encode(self, clips: torch.Tensor, training=False, generator=None) -> torch.Tensor:
        return self.backbone(clips.to(self.config.torch_dtype), training, generator)

    def forward(self, clips: torch.Tensor, head_index: int, boxes: torch.Tensor | None = None,
                batch_index: torch.Tensor | None = None, training=False, generator=None) -> torch.Tensor:
        """Logits of the selected head: ``B x K`` or, for detection, ``M x K``."""
        spec = self.config.heads[head_index]
        if spec.task == DETECTION and boxes is None:
            raise ValueError(f"detection head {spec.name!r} needs proposals")
        if spec.task == CLASSIFICATION and boxes is not None:
            raise ValueError(f"classification head {spec.name!r} takes no proposals")
        tokens = self.encode(clips, training, generator)
        if spec.task == CLASSIFICATION:
            return classify_head(tokens, self.heads[head_index])
        if batch_index is None:
            batch_index = torch.zeros(len(boxes), dtype=torch.long)
        return detect_head(tokens, torch.as_tensor(boxes), batch_index, self.heads[head_index], self.config.roi_grid)


# ---------------------------------------------------------------------------
# checkpoint container
#
#   8 bytes   magic b"CFTCKPT1"
#   8 bytes   little-endian uint64 header length n
#   n bytes   UTF-8 JSON header (sorted keys): {"config": ..., "meta": ...,
#             "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   rest      concatenated little-endian C-order tensor payloads

CHECKPOINT_MAGIC = b"CFTCKPT1"
_NP_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: CofinetuneModel, path, meta: dict | None = None) -> None:
    entries, payload, offset = [], [], 0
    for name, tensor in sorted(model.state_dict().items()):
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_NP_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path) -> tuple[CofinetuneModel, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a checkpoint file (bad magic)", path=path)
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n])
    base = 16 + n
    model = CofinetuneModel(ModelConfig.from_dict(header["config"]))
    state = {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=True)
    return model, header.get("meta", {})
