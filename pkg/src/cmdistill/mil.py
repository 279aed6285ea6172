"""Bags of instances: the classical MIL predicate, mean pooling and bag distributions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Level, Params, PatchEmbeddings, head
from .errors import UsageError

Net = Literal["teacher", "student"]


@dataclass
class BagEmbedding:
    level: Level
    augmentation_index: int
    patch_features: Tensor  # T x D
    instance_logits: Tensor  # T x K
    bag_logits: Tensor  # K
    distribution: Tensor  # K
    net: Net
    slot: int = 0  # position among this net's crops of the same level
    instance_distributions: Tensor | None = None  # T x K


def mil_bag_label(instance_labels: Sequence[int]) -> int:
    """Bag label of the standard MIL assumption: 0 iff every instance is negative."""
    labels = list(instance_labels)
    if not labels:
        raise UsageError("a bag needs at least one instance")
    return 0 if sum(labels) == 0 else 1


def aggregate_bag(instance_logits) -> Tensor:
    """Mean over the instance axis (axis -2): ``(..., T, K) -> (..., K)``."""
    x = ad.as_tensor(instance_logits)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise UsageError("aggregate_bag needs a non-empty T x K matrix")
    t = x.shape[-2]
    # summing in sorted order makes the result bit-identical under any instance permutation
    out = np.sort(x.data, axis=-2).sum(axis=-2) / t

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / t, x.shape).copy(),)

    return ad._make(out, (x,), bw)


def bag_distribution(bag_logits, temperature: float, center=None) -> Tensor:
    """Tempered softmax of (optionally centered) logits."""
    z = ad.as_tensor(bag_logits)
    if center is not None:
        z = z - ad.as_tensor(center)
    return ad.softmax_t(z, temperature)


def make_bag(
    R: PatchEmbeddings,
    params: Params,
    net: Net,
    temperature: float,
    center=None,
    slot: int = 0,
) -> BagEmbedding:
    """encode -> head -> mean -> tempered softmax for one crop."""
    logits = head(R, params)
    bag = aggregate_bag(logits)
    return BagEmbedding(
        level=R.level,
        augmentation_index=R.augmentation_index,
        patch_features=R.R,
        instance_logits=logits,
        bag_logits=bag,
        distribution=bag_distribution(bag, temperature, center),
        net=net,
        slot=slot,
        instance_distributions=bag_distribution(logits, temperature, center),
    )


def global_bag_logits(R, params: Params) -> Tensor:
    """Bag logits with multi-instance modelling disabled.

    The crop is summarised by one L2-normalised pooled feature before the
    head, so the head never sees individual instances.
    """
    R = ad.as_tensor(R)
    pooled = ad.l2_normalize(ad.mean(R, axis=-2))
    return head(pooled, params)


def center_update(center: np.ndarray, teacher_bag_logits: np.ndarray, momentum: float) -> np.ndarray:
    batch_mean = teacher_bag_logits.reshape(-1, teacher_bag_logits.shape[-1]).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean
