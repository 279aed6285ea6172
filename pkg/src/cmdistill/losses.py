"""Intra-level (image, region) and inter-level (student, teacher) distillation losses.

Two code paths compute the same quantities:

* per-pair functions (:func:`loss_image`, :func:`loss_region`, :func:`loss_inter`)
  operating on lists of :class:`~cmdistill.mil.BagEmbedding`; small and direct,
  used as the reference in tests;
* :func:`batched_losses`, which vectorises every term over a batch of images
  and is what the trainer calls.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .mil import BagEmbedding

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CropKey:
    level: str
    slot: int
    augmentation_index: int


def crop_layout(n_image: int, n_region: int) -> list[CropKey]:
    """Crop order shared by both nets: image crops first, then region crops.

    Image crop ``i`` comes from augmentation ``i % 2``; region crops alternate
    between the two augmentations.
    """
    return [CropKey("image", i, i % 2) for i in range(n_image)] + [
        CropKey("region", i, i % 2) for i in range(n_region)
    ]


@dataclass
class PairSet:
    intra_pairs: list[tuple[int, int]]  # (student crop index, teacher crop index)
    student_pairs: list[tuple[int, int]]
    teacher_pairs: list[tuple[int, int]]
    student_keys: list[CropKey] = field(default_factory=list)
    teacher_keys: list[CropKey] = field(default_factory=list)

    def image_pairs(self) -> list[tuple[int, int]]:
        return [
            (s, t)
            for s, t in self.intra_pairs
            if self.student_keys[s].level == "image" and self.teacher_keys[t].level == "image"
        ]


def _keys(bags) -> list[CropKey]:
    out = []
    for b in bags:
        if isinstance(b, CropKey):
            out.append(b)
        else:
            out.append(CropKey(b.level, b.slot, b.augmentation_index))
    return out


def build_pairs(student_bags, teacher_bags, pairing_mode: str = "teacher-global") -> PairSet:
    """Enumerate intra-level and within-net pairs by crop index.

    Accepts :class:`BagEmbedding` lists or plain :class:`CropKey` lists.
    """
    sk, tk = _keys(student_bags), _keys(teacher_bags)
    for name, keys in (("student", sk), ("teacher", tk)):
        if sum(k.level == "image" for k in keys) < 2:
            raise ConfigError(f"{name} net needs at least 2 image-level crops, got {len(keys)} crops")
    if pairing_mode == "teacher-global":
        targets = [j for j, k in enumerate(tk) if k.level == "image"]
    elif pairing_mode == "all-cross":
        targets = list(range(len(tk)))
    else:
        raise ConfigError(f"unknown pairing_mode {pairing_mode!r}")
    intra = [(i, j) for j in targets for i in range(len(sk)) if sk[i] != tk[j]]
    intra.sort()
    within = lambda n: [(i, j) for i in range(n) for j in range(n) if i != j]  # noqa: E731
    return PairSet(intra, within(len(sk)), within(len(tk)), sk, tk)


def _warn_empty(name: str) -> Tensor:
    log.warning("%s: empty pair list, loss set to 0", name)
    return Tensor(0.0)


def cross_entropy(p_target: np.ndarray, logp: Tensor) -> Tensor:
    """``-sum_k p_target[k] * logp[k]`` over the last axis, with ``0 * log 0 = 0``."""
    p = np.asarray(p_target, dtype=ad.DTYPE)
    logp = ad.as_tensor(logp)
    live = p != 0
    with np.errstate(invalid="ignore"):
        out = -np.where(live, p * logp.data, 0.0).sum(axis=-1)
    return ad._make(out, (logp,), lambda g: (-np.expand_dims(g, -1) * p,))


# reference (per pair) ------------------------------------------------------


def loss_image(pairs: Sequence[tuple[BagEmbedding, BagEmbedding]], literal_order: bool = False) -> Tensor:
    """Mean over pairs of H(p_teacher, p_student); the teacher side is constant.

    With ``literal_order`` the roles inside the sum are swapped
    (``-p_student * log p_teacher``), still without teacher gradient.
    """
    if not pairs:
        return _warn_empty("loss_image")
    terms = []
    for s, t in pairs:
        if literal_order:
            terms.append(cross_entropy(np.log(t.distribution.data), s.distribution))
        else:
            terms.append(cross_entropy(t.distribution.data, _log_dist(s)))
    return ad.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))


def _log_dist(bag: BagEmbedding) -> Tensor:
    return ad.log(bag.distribution)


def match_patches(R_s, R_t) -> np.ndarray:
    """For each student row, the teacher row of highest cosine similarity.

    Ties go to the lowest teacher index. Zero-norm teacher rows are never
    selected; a zero-norm student row falls back to index 0.
    """
    rs = np.asarray(R_s.data if isinstance(R_s, Tensor) else R_s, dtype=ad.DTYPE)
    rt = np.asarray(R_t.data if isinstance(R_t, Tensor) else R_t, dtype=ad.DTYPE)
    if rs.ndim != 2 or rt.ndim != 2 or rs.shape[1] != rt.shape[1]:
        raise ConfigError(f"match_patches needs T_s x D and T_t x D, got {rs.shape} and {rt.shape}")
    ns = np.sqrt((rs * rs).sum(-1))
    nt = np.sqrt((rt * rt).sum(-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (rs[:, None, :] * rt[None, :, :]).sum(-1) / (ns[:, None] * nt[None, :])
    cos[:, nt == 0] = -np.inf
    jstar = np.argmax(cos, axis=1)
    if (ns == 0).any() or (nt == 0).all():
        log.warning("match_patches: zero-norm query rows fall back to teacher index 0")
        jstar[ns == 0] = 0
        if (nt == 0).all():
            jstar[:] = 0
    return jstar


def loss_region(pairs: Sequence[tuple[BagEmbedding, BagEmbedding]], literal_order: bool = False) -> Tensor:
    """Patch-matched per-instance cross-entropy, averaged over student patches then pairs."""
    if not pairs:
        return _warn_empty("loss_region")
    terms = []
    for s, t in pairs:
        jstar = match_patches(s.patch_features, t.patch_features)
        q_t = t.instance_distributions.data[jstar]
        if literal_order:
            ce = cross_entropy(np.log(q_t), s.instance_distributions)
        else:
            ce = cross_entropy(q_t, ad.log(s.instance_distributions))
        terms.append(ad.mean(ce))
    return ad.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))


def kl(p: Tensor, q: Tensor) -> Tensor:
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    return ad.tsum(ad.mul(p, ad.log(p) - ad.log(q)), axis=-1)


def loss_inter(bags: Sequence[BagEmbedding], pairs: Sequence[tuple[int, int]]) -> Tensor:
    """Mean KL(p_i || p_j) over ordered within-net pairs."""
    if not pairs:
        return _warn_empty("loss_inter")
    terms = [kl(bags[i].distribution, bags[j].distribution) for i, j in pairs]
    return ad.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))


def loss_total(l_image, l_region, l_student, l_teacher, lambda1: float):
    """``(L_I + L_R)/2 + lambda1 * (L_S + L_T)``.

    A component passed as ``None`` is switched off: the intra-level term
    then averages only the enabled intra losses, and disabled inter-level
    losses contribute nothing.
    """
    if lambda1 < 0:
        raise ConfigError(f"lambda1 must be >= 0, got {lambda1}")
    intra = [x for x in (l_image, l_region) if x is not None]
    inter = [x for x in (l_student, l_teacher) if x is not None]
    total = 0.0
    if intra:
        total = sum(intra[1:], intra[0]) * (1.0 / len(intra))
    if inter:
        total = total + sum(inter[1:], inter[0]) * float(lambda1)
    return total


# batched -------------------------------------------------------------------


@dataclass
class NetOutput:
    """One net's forward pass over a batch.

    ``R`` and ``logits`` map level -> ``(B, n_level, T_level, D|K)``;
    ``bag_logits`` is ``(B, C, K)`` over the crop layout.
    """

    R: dict[str, Tensor]
    logits: dict[str, Tensor]
    bag_logits: Tensor


def batched_match(rs: np.ndarray, rt: np.ndarray) -> np.ndarray:
    """:func:`match_patches` over leading batch axes: ``(..., Ts, D), (..., Tt, D) -> (..., Ts)``."""
    ns = np.sqrt((rs * rs).sum(-1, keepdims=True))
    nt = np.sqrt((rt * rt).sum(-1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (rs / ns) @ np.swapaxes(rt / nt, -1, -2)
    zero_t = np.swapaxes(nt, -1, -2) == 0
    cos = np.where(zero_t, -np.inf, cos)
    cos = np.where(np.isnan(cos), -np.inf, cos)
    return np.argmax(cos, axis=-1)


def _local(keys: list[CropKey]) -> list[tuple[str, int]]:
    return [(k.level, k.slot) for k in keys]


def batched_losses(
    student: NetOutput,
    teacher: NetOutput,
    pairs: PairSet,
    center: np.ndarray,
    student_temp: float,
    teacher_temp: float,
    use_region: bool = True,
    use_inter_student: bool = True,
    use_inter_teacher: bool = True,
    literal_order: bool = False,
) -> dict[str, Tensor | float | None]:
    """All four objectives over a batch; teacher inputs are treated as constants."""
    bsz = student.bag_logits.shape[0]
    t_bag = teacher.bag_logits.data
    out: dict[str, Tensor | float | None] = {"loss_I": None, "loss_R": None, "loss_S": None, "loss_T": None}

    # Pairs sharing a student crop are folded into one summed target per crop,
    # so each student term is a single product over (B, n, [T,] K).
    sl, tl = _local(pairs.student_keys), _local(pairs.teacher_keys)
    n_level = {lv: student.logits[lv].shape[1] for lv in student.logits}

    img = pairs.image_pairs()
    if img:
        n_img = n_level["image"]
        if literal_order:
            target = np.zeros((bsz, n_img, t_bag.shape[-1]))
            logp_t = ad.log_softmax_np(t_bag - center, teacher_temp)
            for s, t in img:
                target[:, sl[s][1]] += logp_t[:, t]
            p_s = ad.softmax_t(ad.index_select(student.bag_logits, np.s_[:, :n_img]), student_temp)
            ce = ad.tsum(ad.mul(p_s, target))
        else:
            target = np.zeros((bsz, n_img, t_bag.shape[-1]))
            p_t = ad.softmax_np(t_bag - center, teacher_temp)
            for s, t in img:
                target[:, sl[s][1]] += p_t[:, t]
            logp_s = ad.log_softmax_t(ad.index_select(student.bag_logits, np.s_[:, :n_img]), student_temp)
            ce = ad.tsum(ad.mul(logp_s, target))
        out["loss_I"] = ad.scale(ce, -1.0 / (bsz * len(img)))
    else:
        out["loss_I"] = _warn_empty("loss_image")

    # region level: patch matching on backbone features, per-instance cross-entropy
    if use_region:
        if not pairs.intra_pairs:
            out["loss_R"] = _warn_empty("loss_region")
        else:
            targets = {lv: None for lv in n_level}
            unit = {}
            t_inst = {lv: (ad.log_softmax_np if literal_order else ad.softmax_np)(
                teacher.logits[lv].data - center, teacher_temp) for lv in teacher.logits}
            for s, t in pairs.intra_pairs:
                (ls, si), (lt, ti) = sl[s], tl[t]
                jstar = batched_match(student.R[ls].data[:, si], teacher.R[lt].data[:, ti])  # (B, Ts)
                sel = np.take_along_axis(t_inst[lt][:, ti], jstar[..., None], axis=1)  # (B, Ts, K)
                if targets[ls] is None:
                    targets[ls] = np.zeros(student.logits[ls].shape)
                targets[ls][:, si] += sel
                unit[ls] = 1.0 / student.logits[ls].shape[2]
            total = None
            for ls, target in targets.items():
                if target is None:
                    continue
                z = student.logits[ls]
                lq = ad.softmax_t(z, student_temp) if literal_order else ad.log_softmax_t(z, student_temp)
                term = ad.scale(ad.tsum(ad.mul(lq, target)), -unit[ls] / (bsz * len(pairs.intra_pairs)))
                total = term if total is None else total + term
            out["loss_R"] = total

    if use_inter_student:
        out["loss_S"] = _batched_kl(student.bag_logits, pairs.student_pairs, student_temp, None)
    if use_inter_teacher:
        with ad.no_grad():
            lt_val = _batched_kl(Tensor(t_bag), pairs.teacher_pairs, teacher_temp, center)
        out["loss_T"] = float(lt_val.data)
    return out


def _batched_kl(bag_logits: Tensor, plist, temperature: float, center) -> Tensor:
    if not plist:
        return _warn_empty("loss_inter")
    z = bag_logits if center is None else bag_logits - center
    logp = ad.log_softmax_t(z, temperature)  # (B, C, K)
    p = ad.exp(logp)
    n = bag_logits.shape[1]
    mask = np.zeros((n, n))
    for i, j in plist:
        mask[i, j] += 1.0
    self_term = ad.tsum(ad.mul(p, logp), axis=-1)  # (B, C)
    cross = p @ ad.swapaxes(logp, -1, -2)  # (B, C, C): sum_k p_i log p_j
    kl_mat = ad.reshape(self_term, (*self_term.shape, 1)) - cross
    bsz = bag_logits.shape[0]
    return ad.scale(ad.tsum(ad.mul(kl_mat, mask)), 1.0 / (bsz * len(plist)))
