"""Teacher-student loop: AdamW on the student, EMA teacher, centering, checkpoints."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, format_config, parse_config_text
from .data import Dataset, multicrop_batch
from .encoder import encode_crops, head, is_decay_exempt, params_from_config
from .errors import FormatError, StateError
from .losses import NetOutput, batched_losses, build_pairs, crop_layout, loss_total
from .mil import aggregate_bag, center_update, global_bag_logits
from .optim import AdamW

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CMD1"
CKPT_VERSION = 1
METRICS_HEADER = ("step", "epoch", "loss_total", "loss_I", "loss_R", "loss_S", "loss_T", "ema_lambda", "lr")


def quantize(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 so checkpoints (f32 payload) round-trip exactly."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class DistillState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    step: int
    total_steps: int
    rng_seed: int
    opt: AdamW
    config: RunConfig


def new_state(cfg: RunConfig, total_steps: int) -> DistillState:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    student = {n: quantize(t.data) for n, t in params_from_config(cfg, rng).items()}
    teacher = {n: a.copy() for n, a in student.items()}
    opt = AdamW(
        list(student), [a.shape for a in student.values()],
        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, exempt=is_decay_exempt,
    )
    return DistillState(student, teacher, np.zeros(cfg.head_dim), 0, total_steps, cfg.seed, opt, cfg)


# schedules -----------------------------------------------------------------


def ema_schedule(step: int, total_steps: int, ema_start: float = 0.996, ema_end: float = 1.0) -> float:
    """Cosine ramp of the EMA momentum from ``ema_start`` (step 0) to ``ema_end`` (last step)."""
    if step > total_steps:
        log.warning("ema_schedule: step %d beyond total_steps %d, clamping", step, total_steps)
        return ema_end
    if step == total_steps:
        return ema_end
    if step <= 0 or total_steps <= 0:
        return ema_start
    return ema_end - (ema_end - ema_start) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def learning_rate(step: int, steps_per_epoch: int, cfg: RunConfig) -> float:
    warm = cfg.warmup_epochs * steps_per_epoch
    if warm <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, (step + 1) / warm)


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], lam: float) -> dict[str, np.ndarray]:
    if teacher.keys() != student.keys():
        raise StateError(f"teacher/student parameter names differ: {sorted(set(teacher) ^ set(student))}")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise StateError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        out[name] = lam * t + (1.0 - lam) * s
    return out


# forward -------------------------------------------------------------------


def wrap(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {n: Tensor(a, requires_grad=requires_grad, name=n) for n, a in params.items()}


def forward_net(params: dict[str, Tensor], image_crops, region_crops, mil_aggregation: bool = True) -> NetOutput:
    R, logits, bags = {}, {}, []
    for level, crops in (("image", image_crops), ("region", region_crops)):
        if crops is None or crops.shape[1] == 0:
            continue
        r = encode_crops(crops, params)
        z = head(r, params)
        R[level], logits[level] = r, z
        bags.append(aggregate_bag(z) if mil_aggregation else global_bag_logits(r, params))
    return NetOutput(R, logits, ad.concat(bags, axis=1) if len(bags) > 1 else bags[0])


def compute_losses(student: NetOutput, teacher: NetOutput, center: np.ndarray, cfg: RunConfig):
    layout = crop_layout(cfg.n_image_crops, cfg.effective_region_crops)
    pairs = build_pairs(layout, layout, cfg.pairing_mode)
    parts = batched_losses(
        student, teacher, pairs, center, cfg.student_temp, cfg.teacher_temp,
        use_region=cfg.region_crops,
        use_inter_student=cfg.inter_student,
        use_inter_teacher=cfg.inter_teacher,
        literal_order=cfg.literal_ce_order,
    )
    total = loss_total(parts["loss_I"], parts["loss_R"], parts["loss_S"], parts["loss_T"], cfg.lambda1)
    return ad.as_tensor(total), parts


def objective(student_params, teacher_params, center, image_crops, region_crops, cfg: RunConfig):
    """Total loss for given crops; teacher is evaluated without graph recording."""
    with ad.no_grad():
        t_out = forward_net(teacher_params, image_crops, region_crops, cfg.mil_aggregation)
    s_out = forward_net(student_params, image_crops, region_crops, cfg.mil_aggregation)
    total, parts = compute_losses(s_out, t_out, center, cfg)
    return total, parts, t_out


def _val(x) -> float:
    if x is None:
        return 0.0
    return float(x.data) if isinstance(x, Tensor) else float(x)


def train_step(images: np.ndarray, state: DistillState, cfg: RunConfig, steps_per_epoch: int = 1,
               rng: np.random.Generator | None = None) -> tuple[DistillState, dict]:
    """One student update + EMA teacher update + center update, in place."""
    if rng is None:
        rng = np.random.default_rng([state.rng_seed, state.step, 1])
    with ad.precision(cfg.precision):
        return _step(images, state, cfg, steps_per_epoch, rng)


def _step(images, state: DistillState, cfg: RunConfig, steps_per_epoch: int, rng) -> tuple[DistillState, dict]:
    image_crops, region_crops, _ = multicrop_batch(images, cfg, rng)
    sp = wrap(state.student, requires_grad=True)
    tp = wrap(state.teacher, requires_grad=False)
    total, parts, t_out = objective(sp, tp, state.center, image_crops, region_crops, cfg)
    grads = ad.backward(total, leaves=list(sp.values()))
    lr = learning_rate(state.step, steps_per_epoch, cfg)
    ok = math.isfinite(float(total.data)) and state.opt.step(
        state.student, {n: grads[t] for n, t in sp.items()}, lr, cfg.weight_decay
    )
    if ok:
        for n in state.student:
            state.student[n] = quantize(state.student[n])
            state.opt.m[n] = quantize(state.opt.m[n])
            state.opt.v[n] = quantize(state.opt.v[n])
    else:
        log.warning("step %d: non-finite loss or gradient, update skipped", state.step)
    lam = ema_schedule(state.step, state.total_steps, cfg.ema_start, cfg.ema_end)
    state.teacher = {n: quantize(a) for n, a in ema_update(state.teacher, state.student, lam).items()}
    t_img = t_out.bag_logits.data[:, : cfg.n_image_crops]
    state.center = quantize(center_update(state.center, t_img, cfg.center_momentum))
    metrics = {
        "step": state.step,
        "epoch": state.step // max(steps_per_epoch, 1),
        "loss_total": float(total.data),
        "loss_I": _val(parts["loss_I"]),
        "loss_R": _val(parts["loss_R"]),
        "loss_S": _val(parts["loss_S"]),
        "loss_T": _val(parts["loss_T"]),
        "ema_lambda": lam,
        "lr": lr,
        "skipped": not ok,
    }
    state.step += 1
    return state, metrics


def format_metrics_row(m: dict) -> str:
    return ",".join(repr(m[k]) if isinstance(m[k], float) else str(m[k]) for k in METRICS_HEADER)


def train(
    data: Dataset,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    state: DistillState | None = None,
    progress: bool = False,
    stop_at: int | None = None,
) -> tuple[DistillState, list[dict]]:
    """Self-supervised training on ``data.images`` (labels are never read).

    ``stop_at`` ends the loop early at that global step; training can be
    resumed later from the returned state or a checkpoint of it.
    """
    cfg.validate()
    n = len(data)
    spe = math.ceil(n / cfg.batch_size)
    if state is None:
        state = new_state(cfg, cfg.epochs * spe)
    out = Path(out_dir) if out_dir is not None else None
    csv = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(format_config(cfg))
        csv = open(out / "metrics.csv", "w")
        csv.write(",".join(METRICS_HEADER) + "\n")
    history: list[dict] = []
    images = data.images.astype(np.float32)  # augmentation runs in single precision
    try:
        end = state.total_steps if stop_at is None else min(stop_at, state.total_steps)
        while state.step < end:
            epoch = state.step // spe
            order = np.random.default_rng([state.rng_seed, epoch, 0]).permutation(n)
            k = state.step % spe
            idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
            state, m = train_step(images[idx], state, cfg, spe)
            history.append(m)
            if csv is not None:
                csv.write(format_metrics_row(m) + "\n")
            end_of_epoch = state.step % spe == 0
            if end_of_epoch and progress and (epoch + 1) % 10 == 0:
                log.info("epoch %d loss %.4f", epoch + 1, m["loss_total"])
            if out is not None and end_of_epoch and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint_save(state, out / f"ckpt-{epoch + 1:04d}.bin")
    finally:
        if csv is not None:
            csv.close()
    if out is not None:
        checkpoint_save(state, out / "ckpt-final.bin")
    return state, history


# checkpoints ---------------------------------------------------------------


def _int_tensor(v: int) -> np.ndarray:
    # four 16-bit limbs, exactly representable in f32
    return np.array([(v >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float64)


def _tensor_int(a: np.ndarray) -> int:
    return sum(int(x) << (16 * i) for i, x in enumerate(a))


def state_tensors(state: DistillState) -> dict[str, np.ndarray]:
    text = format_config(state.config).encode()
    tensors = {
        "meta/config": np.frombuffer(text, dtype=np.uint8).astype(np.float64),
        "meta/rng_seed": _int_tensor(state.rng_seed),
        "meta/opt_t": _int_tensor(state.opt.t),
    }
    tensors.update({f"student/{n}": a for n, a in state.student.items()})
    tensors.update({f"teacher/{n}": a for n, a in state.teacher.items()})
    tensors["center"] = state.center
    tensors.update(state.opt.state())
    return tensors


def tensors_bytes(tensors: dict[str, np.ndarray], step: int = 0, total_steps: int = 0) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<IQQI", CKPT_VERSION, step, total_steps, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_tensors(buf: bytes) -> tuple[int, int, dict[str, np.ndarray]]:
    head_size = 4 + struct.calcsize("<IQQI")
    if len(buf) < head_size:
        raise FormatError(f"checkpoint truncated: {len(buf)} bytes, header needs {head_size}")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at offset 0, expected {CKPT_MAGIC!r}")
    version, step, total, count = struct.unpack_from("<IQQI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"incompatible checkpoint version {version}; this build reads version {CKPT_VERSION}")
    off = head_size
    tensors: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if off + n > len(buf):
            raise FormatError(f"checkpoint truncated at offset {off} while reading {what} ({n} bytes needed)")

    for i in range(count):
        need(2, f"tensor {i} name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(nlen + 1, f"tensor {i} name")
        name = buf[off : off + nlen].decode()
        off += nlen
        rank = buf[off]
        off += 1
        need(8 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        need(4 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(dims)
        off += 4 * size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after the last tensor at offset {off}")
    return step, total, tensors


def checkpoint_save(state: DistillState, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(tensors_bytes(state_tensors(state), state.step, state.total_steps))
    tmp.replace(path)


def state_from_tensors(step: int, total: int, tensors: dict[str, np.ndarray]) -> DistillState:
    try:
        text = tensors["meta/config"].astype(np.uint8).tobytes().decode()
        cfg, _ = parse_config_text(text, "checkpoint meta/config")
        student = {k[8:]: v for k, v in tensors.items() if k.startswith("student/")}
        teacher = {k[8:]: v for k, v in tensors.items() if k.startswith("teacher/")}
        if student.keys() != teacher.keys():
            raise StateError("checkpoint student/teacher parameter names differ")
        opt = AdamW(list(student), [a.shape for a in student.values()],
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, exempt=is_decay_exempt)
        opt.load_state(tensors, _tensor_int(tensors["meta/opt_t"]))
        return DistillState(student, teacher, tensors["center"], step, total,
                            _tensor_int(tensors["meta/rng_seed"]), opt, cfg)
    except KeyError as e:
        raise FormatError(f"checkpoint is missing tensor {e.args[0]!r}") from None


def checkpoint_load(path: str | Path) -> DistillState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return state_from_tensors(*parse_tensors(path.read_bytes()))


def states_equal(a: DistillState, b: DistillState) -> bool:
    ta, tb = state_tensors(a), state_tensors(b)
    return (
        a.step == b.step
        and a.total_steps == b.total_steps
        and ta.keys() == tb.keys()
        and all(ta[k].shape == tb[k].shape and np.array_equal(ta[k], tb[k]) for k in ta)
    )
