"""
Attention operators used by the translator generator.

- soft_pool: exponentially weighted window pooling
- lia_forward: local importance attention, x * heatmap * gate
- dwmh_forward: windowed multi-head attention with learnable per-head
  weights and a zero-initialized residual scale

Functional forms take an explicit parameter tuple so they can be checked
against finite differences; the nn.Module wrappers own the parameters.
Tensors are NxCxHxW; a CxHxW input is treated as a batch of one.
"""
import logging
import math
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ShapeError(f"Expected CxHxW or NxCxHxW, got shape {tuple(x.shape)}")
    return x, False


def soft_pool(x: Tensor, kernel: int = 7, stride: int = 3) -> Tensor:
    """
    SoftPool: AvgPool(x * exp(x)) / AvgPool(exp(x)) per window.

    Computed relative to the window maximum m as m + sum((x - m) w) / sum(w)
    with w = exp(x - m), which is the same quantity without overflow and
    returns constant windows exactly.

    Args:
        x: feature map
        kernel: window size
        stride: window step

    Returns:
        Map of spatial size floor((dim - kernel) / stride) + 1, same channels

    Raises:
        ShapeError: the window grid would be empty
    """
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if kernel < 1 or stride < 1:
        raise ShapeError(f"SoftPool kernel and stride must be >= 1, got ({kernel}, {stride})")
    if h < kernel or w < kernel:
        raise ShapeError(f"SoftPool kernel {kernel} does not fit a {h}x{w} map")
    out_h = (h - kernel) // stride + 1
    out_w = (w - kernel) // stride + 1

    patches = F.unfold(x, kernel_size=kernel, stride=stride)
    patches = patches.view(n, c, kernel * kernel, out_h * out_w)
    peak = patches.amax(dim=2, keepdim=True).detach()
    centered = patches - peak
    weights = torch.exp(centered)
    pooled = peak + (centered * weights).sum(dim=2, keepdim=True) / weights.sum(dim=2, keepdim=True)
    out = pooled.view(n, c, out_h, out_w)
    return out.squeeze(0) if squeeze else out


def bilinear_upsample(heatmap: Tensor, target_h: int, target_w: int) -> Tensor:
    """
    Bilinear resize with half-pixel centres (corner alignment off).

    Accepts HxW, CxHxW or NxCxHxW maps; output stays within the source range.
    """
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"Target size must be >= 1, got {target_h}x{target_w}")
    dims = heatmap.dim()
    if dims == 2:
        batch = heatmap[None, None]
    elif dims == 3:
        batch = heatmap[None]
    elif dims == 4:
        batch = heatmap
    else:
        raise ShapeError(f"Cannot resize a tensor of shape {tuple(heatmap.shape)}")
    if batch.shape[-1] < 1 or batch.shape[-2] < 1:
        raise ShapeError("Source map is empty")
    out = F.interpolate(batch, size=(target_h, target_w), mode="bilinear", align_corners=False)
    if dims == 2:
        return out[0, 0]
    if dims == 3:
        return out[0]
    return out


def _pad_mode(pad: int, size: int) -> str:
    return "reflect" if pad < size else "replicate"


class WindowGrid(NamedTuple):
    """Bookkeeping needed to undo a window partition."""
    batch: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    window: int


def window_partition(x: Tensor, window: int) -> Tuple[Tensor, WindowGrid]:
    """
    Split a map into non-overlapping sxs windows, row-major.

    The map is reflect-padded on the bottom/right to multiples of s.

    Returns:
        (windows of shape (N * count) x C x s x s, grid for window_merge)

    Raises:
        ConfigError: s < 1
    """
    if window < 1:
        raise ConfigError(f"Window size must be >= 1, got {window}", key="translator.window_size")
    x, _ = _batched(x)
    n, c, h, w = x.shape
    pad_h = (window - h % window) % window
    pad_w = (window - w % window) % window
    if pad_h:
        x = F.pad(x, (0, 0, 0, pad_h), mode=_pad_mode(pad_h, h))
    if pad_w:
        x = F.pad(x, (0, pad_w, 0, 0), mode=_pad_mode(pad_w, w))
    windows = rearrange(x, "n c (gh s1) (gw s2) -> (n gh gw) c s1 s2", s1=window, s2=window)
    return windows, WindowGrid(n, h, w, h + pad_h, w + pad_w, window)


def window_merge(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Inverse of window_partition: reassemble and crop the padding."""
    s = grid.window
    merged = rearrange(
        windows, "(n gh gw) c s1 s2 -> n c (gh s1) (gw s2)",
        n=grid.batch, gh=grid.padded_height // s, gw=grid.padded_width // s,
    )
    return merged[:, :, :grid.height, :grid.width]


class LiaParams(NamedTuple):
    """Parameters of the local importance attention branch."""
    compress_weight: Tensor
    compress_bias: Tensor
    down_weight: Tensor
    down_bias: Tensor
    restore_weight: Tensor
    restore_bias: Tensor
    kernel: int = 7
    stride: int = 3


def heatmap_fits(h: int, w: int, kernel: int) -> bool:
    """True when an HxW map can be reflect-padded up to the SoftPool kernel."""
    return all(kernel - size - (kernel - size) // 2 < size for size in (h, w) if size < kernel)


def _heatmap_input(x: Tensor, kernel: int) -> Tensor:
    """Reflect-pad symmetrically so the SoftPool window fits."""
    h, w = x.shape[-2:]
    need_h, need_w = max(0, kernel - h), max(0, kernel - w)
    if not need_h and not need_w:
        return x
    if not heatmap_fits(h, w, kernel):
        raise ShapeError(f"A {h}x{w} map is too small for the {kernel}x{kernel} heatmap branch")
    top, left = need_h // 2, need_w // 2
    return F.pad(x, (left, need_w - left, top, need_h - top), mode="reflect")


def lia_forward(x: Tensor, p: LiaParams, return_maps: bool = False):
    """
    Local importance attention: x * W * g.

    W is the spatial heatmap sigmoid(restore(down(softpool(compress(x)))))
    resized back to HxW; g is the sigmoid of the first input channel. Both
    are broadcast over channels, so the output never exceeds |x|.

    Args:
        x: feature map
        p: branch parameters
        return_maps: also return (heatmap, gate)

    Returns:
        Gated map with the input's shape
    """
    x, squeeze = _batched(x)
    h, w = x.shape[-2:]
    compressed = F.conv2d(x, p.compress_weight, p.compress_bias)
    pooled = soft_pool(_heatmap_input(compressed, p.kernel), p.kernel, p.stride)
    down = F.conv2d(pooled, p.down_weight, p.down_bias, stride=2, padding=1)
    restored = F.conv2d(down, p.restore_weight, p.restore_bias, padding=1)
    heatmap = bilinear_upsample(torch.sigmoid(restored), h, w)
    gate = torch.sigmoid(x[:, :1])
    out = x * heatmap * gate
    if squeeze:
        out, heatmap, gate = out[0], heatmap[0], gate[0]
    if return_maps:
        return out, heatmap, gate
    return out


class DwmhParams(NamedTuple):
    """Parameters of the dynamically weighted windowed attention."""
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    head_weights: Tensor
    gamma: Tensor
    window: int
    num_heads: int


def dwmh_forward(x: Tensor, p: DwmhParams, return_attention: bool = False):
    """
    Windowed multi-head attention with per-head output weights.

    Per window and head: softmax(Q K^T / sqrt(d_k)) scaled by that head's
    weight, applied to V; the result is added to x through gamma. With
    gamma = 0 the output equals x exactly.

    Args:
        x: feature map with C divisible by the head count
        p: projection weights, head weights, gamma, window size, head count
        return_attention: also return the pre-weighting softmax matrices

    Raises:
        ConfigError: C is not divisible by the head count
        NumericError: attention logits contain NaN
    """
    x, squeeze = _batched(x)
    channels = x.shape[1]
    if p.num_heads < 1 or channels % p.num_heads:
        raise ConfigError(
            f"{channels} channels cannot be split over {p.num_heads} heads",
            key="translator.num_heads")
    d_k = channels // p.num_heads

    q = F.conv2d(x, p.q_weight, p.q_bias)
    k = F.conv2d(x, p.k_weight, p.k_bias)
    v = F.conv2d(x, p.v_weight, p.v_bias)
    q_win, grid = window_partition(q, p.window)
    k_win, _ = window_partition(k, p.window)
    v_win, _ = window_partition(v, p.window)

    heads = "b (h d) s1 s2 -> b h (s1 s2) d"
    q_win = rearrange(q_win, heads, h=p.num_heads)
    k_win = rearrange(k_win, heads, h=p.num_heads)
    v_win = rearrange(v_win, heads, h=p.num_heads)

    logits = q_win @ k_win.transpose(-1, -2) / math.sqrt(d_k)
    if torch.isnan(logits).any():
        raise NumericError("NaN in windowed attention logits", term="dwmh.logits")
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    probs = torch.softmax(logits, dim=-1)
    weighted = probs * p.head_weights.view(1, -1, 1, 1)
    attended = rearrange(weighted @ v_win, "b h (s1 s2) d -> b (h d) s1 s2", s1=p.window, s2=p.window)

    out = p.gamma.view(1, -1, 1, 1) * window_merge(attended, grid) + x
    if squeeze:
        out = out[0]
    if return_attention:
        return out, probs
    return out


class SoftPool2d(nn.Module):
    """Module form of soft_pool."""

    def __init__(self, kernel: int = 7, stride: int = 3):
        super().__init__()
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return soft_pool(x, self.kernel, self.stride)


class LocalImportanceAttention(nn.Module):
    """
    Gates a skip-connection feature map by a soft-pooled spatial heatmap and
    the sigmoid of its first channel.
    """

    def __init__(self, channels: int, kernel: int = 7, stride: int = 3):
        super().__init__()
        reduced = max(channels // 4, 1)
        self.kernel = kernel
        self.stride = stride
        self.compress = nn.Conv2d(channels, reduced, 1)
        self.down = nn.Conv2d(reduced, reduced, 3, stride=2, padding=1)
        self.restore = nn.Conv2d(reduced, 1, 3, padding=1)

    def params(self) -> LiaParams:
        return LiaParams(
            self.compress.weight, self.compress.bias,
            self.down.weight, self.down.bias,
            self.restore.weight, self.restore.bias,
            self.kernel, self.stride,
        )

    def fits(self, x: Tensor) -> bool:
        return heatmap_fits(x.shape[-2], x.shape[-1], self.kernel)

    def forward(self, x: Tensor) -> Tensor:
        return lia_forward(x, self.params())


class DynamicWeightedWindowAttention(nn.Module):
    """Windowed multi-head attention with learnable head weights and gamma."""

    def __init__(self, channels: int, num_heads: int = 4, window: int = 4):
        super().__init__()
        if num_heads < 1 or channels % num_heads:
            raise ConfigError(
                f"{channels} channels cannot be split over {num_heads} heads",
                key="translator.num_heads")
        if window < 1:
            raise ConfigError(f"Window size must be >= 1, got {window}", key="translator.window_size")
        self.window = window
        self.num_heads = num_heads
        self.query = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.head_weights = nn.Parameter(torch.ones(num_heads))
        self.gamma = nn.Parameter(torch.zeros(1))

    def params(self) -> DwmhParams:
        return DwmhParams(
            self.query.weight, self.query.bias,
            self.key.weight, self.key.bias,
            self.value.weight, self.value.bias,
            self.head_weights, self.gamma,
            self.window, self.num_heads,
        )

    def forward(self, x: Tensor) -> Tensor:
        return dwmh_forward(x, self.params())


def _random_lia(channels: int, gen: torch.Generator, dtype) -> LiaParams:
    reduced = max(channels // 4, 1)

    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=dtype) * 0.3

    return LiaParams(
        rand(reduced, channels, 1, 1), rand(reduced),
        rand(reduced, reduced, 3, 3), rand(reduced),
        rand(1, reduced, 3, 3), rand(1),
    )


def _random_dwmh(channels: int, heads: int, window: int, gen: torch.Generator, dtype,
                 gamma: Optional[float] = None) -> DwmhParams:
    def rand(*shape):
        return torch.randn(*shape, generator=gen, dtype=dtype) * 0.3

    g = rand(1) if gamma is None else torch.full((1,), gamma, dtype=dtype)
    return DwmhParams(
        rand(channels, channels, 1, 1), rand(channels),
        rand(channels, channels, 1, 1), rand(channels),
        rand(channels, channels, 1, 1), rand(channels),
        1.0 + rand(heads), g, window, heads,
    )


def save_operator_fixtures(path: Path, seed: int = 0) -> Path:
    """
    Write (input, params, output) triples for the three operators in the
    checkpoint tensor format, float64.
    """
    from .checkpoint import save_tensors

    gen = torch.Generator().manual_seed(seed)
    dtype = torch.float64
    tensors: Dict[str, Tensor] = {}

    x = torch.randn(1, 4, 16, 16, generator=gen, dtype=dtype)
    tensors["soft_pool/input"] = x
    tensors["soft_pool/output"] = soft_pool(x, 7, 3)

    lia = _random_lia(4, gen, dtype)
    tensors["lia/input"] = x
    for name, value in zip(LiaParams._fields[:6], lia[:6]):
        tensors[f"lia/{name}"] = value
    tensors["lia/output"] = lia_forward(x, lia)

    dwmh = _random_dwmh(4, 2, 4, gen, dtype)
    tensors["dwmh/input"] = x
    for name, value in zip(DwmhParams._fields[:8], dwmh[:8]):
        tensors[f"dwmh/{name}"] = value
    tensors["dwmh/output"] = dwmh_forward(x, dwmh)

    meta = {"kind": "operator_fixtures", "seed": seed,
            "soft_pool": {"kernel": 7, "stride": 3},
            "lia": {"kernel": 7, "stride": 3},
            "dwmh": {"window": 4, "num_heads": 2}}
    return save_tensors(path, tensors, meta)


def verify_operator_fixtures(path: Path) -> Dict[str, float]:
    """Re-evaluate stored fixtures; returns the max abs deviation per operator."""
    from .checkpoint import load_tensors

    tensors, meta = load_tensors(path)
    report = {}
    with torch.no_grad():
        out = soft_pool(tensors["soft_pool/input"], meta["soft_pool"]["kernel"], meta["soft_pool"]["stride"])
        report["soft_pool"] = float((out - tensors["soft_pool/output"]).abs().max())

        lia = LiaParams(*(tensors[f"lia/{n}"] for n in LiaParams._fields[:6]),
                        meta["lia"]["kernel"], meta["lia"]["stride"])
        out = lia_forward(tensors["lia/input"], lia)
        report["lia"] = float((out - tensors["lia/output"]).abs().max())

        dwmh = DwmhParams(*(tensors[f"dwmh/{n}"] for n in DwmhParams._fields[:8]),
                          meta["dwmh"]["window"], meta["dwmh"]["num_heads"])
        out = dwmh_forward(tensors["dwmh/input"], dwmh)
        report["dwmh"] = float((out - tensors["dwmh/output"]).abs().max())
    return report
