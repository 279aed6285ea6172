"""Finite-difference gradient checks and the glyph gradient-concentration diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ABLATION_ROWS, RunConfig
from .data import Dataset, multicrop_batch, resample_batch, resample_matrix
from .encoder import params_from_config
from .errors import UsageError
from .trainer import DistillState, compute_losses, forward_net, objective, wrap

COMPONENTS = ("total", "loss_I", "loss_R", "loss_S")
OBJECTIVES = ("image_only", "cmd")


@dataclass
class GradReport:
    errors: dict[str, float]  # parameter name -> max relative error
    max_error: float
    passed: bool
    threshold: float = 1e-4
    failed_param: str | None = None
    message: str = ""

    def text(self) -> str:
        lines = [f"{name:<16} {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} (threshold {self.threshold:g}): "
                     + ("PASS" if self.passed else f"FAIL {self.message}"))
        return "\n".join(lines)


def toy_config(**changes) -> RunConfig:
    """Small geometry for finite differences: 9 and 4 instances, 2 + 2 crops, K=4, D=8."""
    base = dict(
        n_image_crops=2, n_region_crops=2, image_crop_px=6, region_crop_px=4, instance_px=2,
        embed_dim=8, hidden_dim=8, head_dim=4, batch_size=2,
    )
    base.update(changes)
    return RunConfig(**base).validate()


def _component(total, parts, component: str):
    if component == "total":
        return total
    value = parts[component]
    return ad.as_tensor(0.0) if value is None else ad.as_tensor(value)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Largest entrywise deviation, relative to the larger of the two gradients' scale.

    The scale never drops below ``floor``: when the true gradient vanishes,
    central differences still carry an O(eps^2) truncation term that a purely
    relative measure would blow up.
    """
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if diff == 0.0:
        return 0.0
    return diff / max(scale, floor)


def grad_check(
    cfg: RunConfig | None = None,
    seed: int = 0,
    component: str = "total",
    eps: float = 1e-4,
    threshold: float = 1e-4,
    symmetric: bool = False,
) -> GradReport:
    """Central differences against the analytic student gradient of the chosen loss.

    With ``symmetric`` the head is zeroed, teacher equals student and the
    center is zero, so every distribution is uniform and all gradients vanish.
    """
    if component not in COMPONENTS:
        raise UsageError(f"component must be one of {COMPONENTS}, got {component!r}")
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    student = {n: t.data.copy() for n, t in params_from_config(cfg, rng).items()}
    if symmetric:
        student["head.w"][:] = 0.0
        student["head.b"][:] = 0.0
        teacher = {n: a.copy() for n, a in student.items()}
        center = np.zeros(cfg.head_dim)
    else:
        teacher = {n: a + 0.1 * rng.standard_normal(a.shape) for n, a in student.items()}
        center = 0.1 * rng.standard_normal(cfg.head_dim)
    b = cfg.batch_size
    img = rng.random((b, cfg.n_image_crops, cfg.image_crop_px, cfg.image_crop_px, 3))
    reg = rng.random((b, cfg.effective_region_crops, cfg.region_crop_px, cfg.region_crop_px, 3))
    if symmetric:
        img[:, 1:] = img[:, :1]
    tp = wrap(teacher, requires_grad=False)

    def loss_value(params) -> float:
        with ad.no_grad():
            total, parts, _ = objective(wrap(params, False), tp, center, img, reg, cfg)
        return float(_component(total, parts, component).data)

    sp = wrap(student, requires_grad=True)
    total, parts, _ = objective(sp, tp, center, img, reg, cfg)
    grads = ad.backward(_component(total, parts, component), leaves=list(sp.values()))

    errors: dict[str, float] = {}
    for name, t in sp.items():
        analytic = grads[t]
        numeric = np.zeros_like(analytic)
        p = student[name]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss_value(student)
            p[idx] = old - eps
            down = loss_value(student)
            p[idx] = old
            numeric[idx] = (up - down) / (2 * eps)
        if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
            return GradReport(errors, math.inf, False, threshold, name, f"non-finite gradient in {name}")
        errors[name] = relative_error(analytic, numeric)
    worst = max(errors, key=errors.get)
    passed = errors[worst] < threshold
    msg = "" if passed else f"{worst} exceeds the threshold"
    return GradReport(errors, errors[worst], passed, threshold, None if passed else worst, msg)


# gradient concentration ----------------------------------------------------


@dataclass
class ConcentrationReport:
    glyph_fraction_baseline: float | None
    glyph_fraction_cmd: float | None
    n_samples: int
    per_sample: dict[str, list[float]] = field(default_factory=dict)

    def csv(self) -> str:
        rows = ["objective,glyph_fraction,n_samples"]
        for name, value in (("image_only", self.glyph_fraction_baseline), ("cmd", self.glyph_fraction_cmd)):
            if value is not None:
                rows.append(f"{name},{value!r},{self.n_samples}")
        return "\n".join(rows) + "\n"

    def text(self) -> str:
        lines = [f"samples: {self.n_samples}"]
        if self.glyph_fraction_baseline is not None:
            lines.append(f"image-only objective: glyph gradient fraction {self.glyph_fraction_baseline:.4f}")
        if self.glyph_fraction_cmd is not None:
            lines.append(f"CMD objective:        glyph gradient fraction {self.glyph_fraction_cmd:.4f}")
        return "\n".join(lines)


def objective_config(cfg: RunConfig, name: str) -> RunConfig:
    """``image_only``: image crops, no MIL, image loss alone. ``cmd``: every term on."""
    if name not in OBJECTIVES:
        raise UsageError(f"objective must be one of {OBJECTIVES}, got {name!r}")
    rows = dict(ABLATION_ROWS)
    toggles = rows["LV"] if name == "image_only" else rows["LV+MIL+LR+LT+LS"]
    return cfg.replace(**toggles)


def _crop_pixel_grad(g: np.ndarray, box, flip: bool, contrast: float, brightness: float,
                     raw: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pull a crop-pixel gradient back through jitter and bilinear resampling to the source image."""
    out = g.shape[0]
    ay = resample_matrix(box[1], box[3], out, h)
    ax = resample_matrix(box[0], box[2], out, w, flip)
    pre = (raw - 0.5) * contrast + 0.5 + brightness
    g = g * contrast * ((pre > 0.0) & (pre < 1.0))
    return np.einsum("ih,ijc,jw->hwc", ay, g, ax, optimize=True)


def pixel_gradients(params_s, params_t, center, images: np.ndarray, cfg: RunConfig, name: str,
                    rng: np.random.Generator) -> np.ndarray:
    """|dL/dpixel| for every source pixel of ``images`` under objective ``name``.

    Crops are sampled with the full multi-crop plan, so two objectives fed the
    same ``rng`` state see identical image crops. Only the student path carries
    gradient; the teacher supplies fixed targets.
    """
    full = objective_config(cfg, "cmd")
    img, reg, plan = multicrop_batch(images, full, rng)
    ocfg = objective_config(cfg, name)
    if not ocfg.region_crops:
        reg = reg[:, :0]
    raw_img = _unjittered(images, plan.image_boxes, plan, full.image_crop_px)
    raw_reg = _unjittered(images, plan.region_boxes[:, : reg.shape[1]], plan, full.region_crop_px)
    img_t = ad.Tensor(img, requires_grad=True)
    reg_t = ad.Tensor(reg, requires_grad=True)
    sp = wrap(params_s, requires_grad=False)
    tp = wrap(params_t, requires_grad=False)
    with ad.no_grad():
        t_out = forward_net(tp, img, reg, ocfg.mil_aggregation)
    s_out = forward_net(sp, img_t, reg_t if reg.shape[1] else None, ocfg.mil_aggregation)
    total, _ = compute_losses(s_out, t_out, center, ocfg)
    leaves = [img_t] + ([reg_t] if reg.shape[1] else [])
    grads = ad.backward(total, leaves=leaves)
    bsz, h, w, _ = images.shape
    out = np.zeros(images.shape)
    for level, crops_t, raw, boxes in (("image", img_t, raw_img, plan.image_boxes),
                                        ("region", reg_t, raw_reg, plan.region_boxes)):
        if crops_t not in grads:
            continue
        g = grads[crops_t]
        for bi in range(bsz):
            for ci in range(g.shape[1]):
                aug = ci % 2
                out[bi] += _crop_pixel_grad(
                    g[bi, ci], boxes[bi, ci], plan.flips[bi, aug], plan.contrast[bi, aug],
                    plan.brightness[bi, aug], raw[bi, ci], h, w,
                )
    return np.abs(out)


def _unjittered(images, boxes, plan, out):
    bsz, n = boxes.shape[:2]
    if n == 0:
        return np.zeros((bsz, 0, out, out, 3))
    aug = np.arange(n) % 2
    flips = plan.flips[:, aug].reshape(-1)
    src = np.repeat(np.arange(bsz), n)
    return resample_batch(images, boxes.reshape(-1, 4), flips, out, src).reshape(bsz, n, out, out, 3)


def glyph_fractions(grad_abs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-sample share of absolute gradient mass inside the mask (``grad_abs``: N x H x W x 3)."""
    mass = grad_abs.sum(axis=-1)
    total = mass.sum(axis=(1, 2))
    inside = (mass * masks).sum(axis=(1, 2))
    return np.where(total > 0, inside / np.where(total > 0, total, 1.0), 0.0)


def gradient_concentration(
    state: DistillState,
    data: Dataset,
    objective_name: str,
    n_samples: int = 64,
    seed: int = 0,
    masks: np.ndarray | None = None,
    batch_size: int = 32,
) -> ConcentrationReport:
    """Mean glyph gradient fraction over the first ``n_samples`` images of ``data``."""
    if masks is None:
        if data.boxes is None or len(data.boxes) != len(data):
            raise UsageError("samples carry no glyph masks")
        masks = np.stack([data.glyph_mask(i) for i in range(min(n_samples, len(data)))])
    n = min(n_samples, len(data), len(masks))
    if n == 0:
        raise UsageError("no samples to diagnose")
    rng = np.random.default_rng([seed, 2])
    fracs = []
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        g = pixel_gradients(state.student, state.teacher, state.center, data.images[lo:hi],
                            state.config, objective_name, rng)
        fracs.extend(glyph_fractions(g, masks[lo:hi]).tolist())
    mean = float(np.mean(fracs))
    report = ConcentrationReport(
        mean if objective_name == "image_only" else None,
        mean if objective_name == "cmd" else None,
        n,
        {objective_name: fracs},
    )
    return report


def paired_concentration(state_baseline: DistillState, state_cmd: DistillState, data: Dataset,
                         n_samples: int = 64, seed: int = 0) -> ConcentrationReport:
    """Both objectives on the same samples and the same crops."""
    a = gradient_concentration(state_baseline, data, "image_only", n_samples, seed)
    b = gradient_concentration(state_cmd, data, "cmd", n_samples, seed)
    return ConcentrationReport(a.glyph_fraction_baseline, b.glyph_fraction_cmd, a.n_samples,
                               {**a.per_sample, **b.per_sample})
