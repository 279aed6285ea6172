"""Patch instances, the per-instance backbone and the linear head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

Level = Literal["image", "region"]
Params = dict[str, Tensor]


@dataclass
class CropView:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    level: Level
    augmentation_index: int
    instance_px: int

    @property
    def n_instances(self) -> int:
        h, w = self.pixels.shape[:2]
        return (h // self.instance_px) * (w // self.instance_px)


@dataclass
class PatchEmbeddings:
    R: Tensor  # T x D
    level: Level
    augmentation_index: int


def check_divisible(h: int, w: int, s: int) -> None:
    if s < 1 or h % s or w % s:
        raise ConfigError(f"instance size {s} must divide the crop size {h}x{w}")


def patchify_array(pixels: np.ndarray, s: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., T, s, s, C)`` with instances in row-major grid order."""
    *lead, h, w, c = pixels.shape
    check_divisible(h, w, s)
    gh, gw = h // s, w // s
    x = pixels.reshape(*lead, gh, s, gw, s, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, s, s, c)


def unpatchify_array(instances: np.ndarray, h: int, w: int) -> np.ndarray:
    *lead, t, s, s2, c = instances.shape
    gh, gw = h // s, w // s
    if gh * gw != t or s != s2:
        raise ConfigError(f"{t} instances of size {s} cannot tile {h}x{w}")
    nl = len(lead)
    x = instances.reshape(*lead, gh, gw, s, s, c)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, h, w, c)


def patchify(crop: CropView) -> list[np.ndarray]:
    return list(patchify_array(crop.pixels, crop.instance_px))


def unpatchify(instances: list[np.ndarray], h: int, w: int) -> np.ndarray:
    return unpatchify_array(np.stack(instances), h, w)


def grid_size(crop_px: int, instance_px: int) -> int:
    check_divisible(crop_px, crop_px, instance_px)
    return (crop_px // instance_px) ** 2


# parameters ----------------------------------------------------------------


PIXEL_MEAN = 0.5


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    rng: np.random.Generator,
    instance_px: int,
    embed_dim: int,
    hidden_dim: int,
    head_dim: int,
    attention_blocks: int = 0,
) -> Params:
    """Seeded uniform(+-1/sqrt(fan_in)) initialisation of backbone and head."""
    p_in = instance_px * instance_px * 3
    shapes: list[tuple[str, tuple[int, ...], int]] = [
        ("enc.fc1.w", (p_in, hidden_dim), p_in),
        ("enc.fc1.b", (hidden_dim,), p_in),
        ("enc.fc2.w", (hidden_dim, embed_dim), hidden_dim),
        ("enc.fc2.b", (embed_dim,), hidden_dim),
    ]
    for i in range(attention_blocks):
        for part in ("q", "k", "v", "o"):
            shapes.append((f"enc.attn{i}.{part}", (embed_dim, embed_dim), embed_dim))
    shapes += [("head.w", (embed_dim, head_dim), embed_dim), ("head.b", (head_dim,), embed_dim)]
    return {
        name: Tensor(_uniform(rng, fan_in, shape), requires_grad=True, name=name)
        for name, shape, fan_in in shapes
    }


def params_from_config(cfg, rng: np.random.Generator) -> Params:
    return init_params(
        rng,
        cfg.instance_px,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.head_dim,
        cfg.attention_blocks if cfg.attention else 0,
    )


def n_attention_blocks(params: Params) -> int:
    return sum(1 for name in params if name.startswith("enc.attn") and name.endswith(".q"))


def instance_px_of(params: Params) -> int:
    p_in = params["enc.fc1.w"].shape[0]
    s = int(round(math.sqrt(p_in / 3)))
    if 3 * s * s != p_in:
        raise ConfigError(f"first layer fan-in {p_in} is not s*s*3")
    return s


def is_decay_exempt(name: str) -> bool:
    return name.endswith(".b") or name == "center"


# forward -------------------------------------------------------------------


def encode_flat(x: np.ndarray | Tensor, params: Params) -> Tensor:
    """Backbone on flattened instances ``(..., T, s*s*3)`` -> ``(..., T, D)``.

    Pixels are shifted to zero mean (x - 0.5) and every output row is
    L2-normalized. Without attention blocks every row depends only on its own
    instance.
    """
    x = ad.as_tensor(x) - PIXEL_MEAN
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    h = ad.gelu(h @ params["enc.fc1.w"] + params["enc.fc1.b"])
    r = h @ params["enc.fc2.w"] + params["enc.fc2.b"]
    d = r.shape[-1]
    n_blocks = n_attention_blocks(params)
    if n_blocks:
        t = lead[-1]
        r = r.reshape(-1, t, d)
        for i in range(n_blocks):
            q = r @ params[f"enc.attn{i}.q"]
            k = r @ params[f"enc.attn{i}.k"]
            v = r @ params[f"enc.attn{i}.v"]
            att = ad.softmax_t(ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(d)), 1.0)
            r = r + (att @ v) @ params[f"enc.attn{i}.o"]
    return ad.l2_normalize(r).reshape(*lead, d)


def encode_crops(pixels: np.ndarray | Tensor, params: Params) -> Tensor:
    """Crops ``(..., H, W, 3)`` -> patch features ``(..., T, D)``."""
    s = instance_px_of(params)
    if isinstance(pixels, Tensor):
        *lead, h, w, c = pixels.shape
        check_divisible(h, w, s)
        gh, gw = h // s, w // s
        nl = len(lead)
        x = pixels.reshape(*lead, gh, s, gw, s, c)
        x = ad.transpose(x, (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4))
        x = x.reshape(*lead, gh * gw, s * s * c)
    else:
        inst = patchify_array(np.asarray(pixels, dtype=ad.DTYPE), s)
        x = inst.reshape(*inst.shape[:-3], -1)
    return encode_flat(x, params)


def encode(instances, params: Params, level: Level = "image", augmentation_index: int = 0) -> PatchEmbeddings:
    """Encode one crop's ordered instance list (each ``s x s x 3``)."""
    arrs = [np.asarray(i, dtype=ad.DTYPE) for i in instances]
    sizes = {a.shape for a in arrs}
    if len(sizes) != 1 or arrs[0].shape[0] != arrs[0].shape[1]:
        raise ConfigError(f"instances must share one square size, got {sorted(sizes)}")
    arr = np.stack(arrs)
    if arr.shape[1] != instance_px_of(params):
        raise ConfigError(f"instance size {arr.shape[1]} does not match the backbone ({instance_px_of(params)})")
    return PatchEmbeddings(encode_flat(arr.reshape(arr.shape[0], -1), params), level, augmentation_index)


def head(R, params: Params) -> Tensor:
    """Row-wise affine map ``R @ W + b`` from patch features to K instance logits."""
    R = R.R if isinstance(R, PatchEmbeddings) else ad.as_tensor(R)
    w, b = params["head.w"], params["head.b"]
    if R.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ConfigError(f"head of shape {w.shape}/{b.shape} cannot map features of width {R.shape[-1]}")
    return R @ w + b
