"""Pretraining loop: views, student and teacher passes, losses, AdamW, EMA, metrics.

Every random draw is derived from ``(seed, epoch)`` for batch order and
``(seed, step, item)`` for views, so runs are reproducible and resumable
from a checkpoint without saving generator state.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NotSPDError, NumericalAbort, ShapeError, ValidationError
from .losses import LossConfig, LossReport, StudentTaps, TeacherTaps, loss_ms, loss_optical, make_report, total_loss
from .model import MS, OPTICAL, EncoderConfig, HeadConfig, StudentModel, load_model, save_model
from .raster import DatasetManifest
from .teachers import EmaTeacher, FrozenTeacher, ema_momentum, ema_update, teacher_forward_ms
from .views import AugConfig, craft_views, item_rng

TOP_K = 5


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    base_lr: float = 5e-4
    final_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    ema_momentum: float = 0.996
    ema_schedule: bool = False
    grad_clip: float = 3.0  # global norm; 0 disables
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    collapse_interval: int = 1  # steps between collapse diagnostics
    max_steps: int = 0  # stop early (schedules still span the full run); 0 = no limit
    aug: AugConfig = field(default_factory=AugConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.base_lr < 0 or self.final_lr < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.grad_clip < 0:
            raise ValidationError("grad_clip must be non-negative")
        if self.collapse_interval < 1:
            raise ValidationError("collapse_interval must be at least 1")
        self.aug.validate()
        self.loss.validate()
        self.encoder.validate()
        if self.aug.out_global != self.encoder.image_size:
            raise ValidationError("aug.out_global must equal encoder.image_size")
        for size in (self.aug.out_global, self.aug.out_local):
            if size % self.encoder.patch_size:
                raise ValidationError(f"view size {size} is not divisible by patch size {self.encoder.patch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float, final_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``final_lr``."""
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * (step / warmup_steps)
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * progress))


def cosine_schedule(step: int, total_steps: int, start: float, end: float) -> float:
    """Half-cosine from ``start`` (exact at step 0) to ``end``."""
    progress = step / max(total_steps, 1)
    return start + 0.5 * (end - start) * (1.0 - math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def decays(name: str, value: np.ndarray) -> bool:
    """Decoupled decay applies to weight matrices only (not biases, norms, tokens)."""
    return value.ndim == 2 and name.endswith("weight")


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        if wd and decays(name, p):
            p -= dt(lr * wd) * p
        p -= dt(lr) * step
    return state


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        return {k: g * g.dtype.type(scale) for k, g in grads.items()}, total
    return dict(grads), total


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def collapse_metrics(z, floor: float = 1e-12) -> tuple[float, np.ndarray]:
    """Effective rank ``exp(H(lambda / sum lambda))`` of the mean-centered covariance.

    Eigenvalues are returned in descending order. A zero spectrum (all rows
    equal) has effective rank 1 by convention; normalized eigenvalues are
    floored at ``floor`` inside the logarithm.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValidationError("collapse metrics need a (B >= 2, p) matrix")
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / z.shape[0]
    lam = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = lam.sum()
    if total <= 0.0:
        return 1.0, lam
    q = lam / total
    h = -float(np.sum(q * np.log(np.maximum(q, floor))))
    return float(math.exp(h)), lam


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------


METRIC_COLUMNS = (
    ["step", "epoch", "lr", "wd", "ema"]
    + LossReport.names()
    + ["effective_rank"]
    + [f"eig{i}" for i in range(TOP_K)]
    + ["cls_cosine", "grad_norm"]
)


@dataclass
class Batch:
    ms_global: np.ndarray  # (n*B, C, g, g), view-major
    ms_local: np.ndarray
    opt_global: np.ndarray
    opt_local: np.ndarray
    geometry: tuple[list, list]  # per-image global and local crop lists
    indices: np.ndarray


def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    c = x.shape[1]
    return ((x - mean[:c, None, None]) / std[:c, None, None]).astype(np.float32)


def build_batch(data: DatasetManifest, indices, aug: AugConfig, seed: int, step: int) -> Batch:
    """Craft views per item and stack them view-major (row ``v * B + b``)."""
    sets = [craft_views(data.items[i], aug, item_rng(seed, step, int(i))) for i in indices]

    def stack(attr, channels):
        arr = np.stack([getattr(s, attr) for s in sets], axis=1)  # (V, B, C, h, w)
        v, b = arr.shape[:2]
        arr = arr.reshape((v * b,) + arr.shape[2:])
        return standardize(arr, data.mean, data.std) if arr.size else arr.astype(np.float32)

    geometry = ([s.crop_params_global for s in sets], [s.crop_params_local for s in sets])
    return Batch(
        stack("ms_global", data.channels),
        stack("ms_local", data.channels),
        stack("opt_global", 3),
        stack("opt_local", 3),
        geometry,
        np.asarray(indices),
    )


@dataclass
class StepResult:
    loss: Tensor
    report: LossReport
    student_global_proj: np.ndarray  # (n*B, p)
    cls_cosine: float  # mean cosine between student cls projection and teacher cls tap, same views
    parts: dict  # component tensors: l_cos, l_cr, l_ms, l_o


def compute_losses(
    model: StudentModel,
    teacher: EmaTeacher,
    frozen: FrozenTeacher,
    batch: Batch,
    cfg: LossConfig,
    n: int,
    m: int,
    bsz: int,
) -> StepResult:
    """Full objective on one batch; the caller owns the tape."""
    if m:
        og, ogo = model.forward_joint([(batch.ms_global, MS), (batch.opt_global, OPTICAL)])
        ol, olo = model.forward_joint([(batch.ms_local, MS), (batch.opt_local, OPTICAL)])
        ms_cls = ad.concat([og.cls_F, ol.cls_F], axis=0)
        opt_cls = ad.concat([ogo.cls_F, olo.cls_F], axis=0)
    else:
        og, ogo = model.forward_joint([(batch.ms_global, MS), (batch.opt_global, OPTICAL)])
        ol = olo = None
        ms_cls, opt_cls = og.cls_F, ogo.cls_F
    z_s = model.project("ms", ms_cls)
    p = z_s.shape[-1]
    z_s3 = ad.reshape(z_s, (n + m, bsz, p))
    z_t = teacher_forward_ms(teacher, batch.ms_global).reshape(n, bsz, p)
    l_ms, ms_parts = loss_ms(ad.const(z_t.astype(z_s.dtype)), z_s3, cfg)

    taps = frozen.forward(batch.opt_global)
    d_t = taps.cls_F.shape[-1]
    t_grid = taps.p_F.shape[1]
    t_taps = TeacherTaps(
        taps.cls_F.reshape(n, bsz, d_t),
        taps.p_F.reshape(n, bsz, t_grid, d_t),
        taps.p_mid.reshape(n, bsz, t_grid, d_t),
    )

    def views4(x, v):
        return ad.reshape(x, (v, bsz) + x.shape[1:])

    s_taps = StudentTaps(
        cls=views4(opt_cls, n + m),
        p_F=views4(ogo.p_F, n),
        p_mid=views4(ogo.p_mid, n),
        p_F_local=views4(olo.p_F, m) if olo is not None else None,
        p_mid_local=views4(olo.p_mid, m) if olo is not None else None,
    )
    l_o, o_parts = loss_optical(t_taps, s_taps, model.project, cfg, batch.geometry)
    loss = total_loss(l_ms, l_o)
    report = make_report(l_ms, ms_parts, l_o, o_parts, loss)
    # same-view cls agreement, the distillation fidelity diagnostic
    s_cls_g = o_parts["student_cls"].data[:n].astype(np.float64)
    t_n = t_taps.cls / np.linalg.norm(t_taps.cls, axis=-1, keepdims=True)
    cos = float(np.mean(np.sum(t_n * s_cls_g, axis=-1)))
    parts = {"l_cos": ms_parts["l_cos_ms"], "l_cr": ms_parts["l_cr"], "l_ms": l_ms, "l_o": l_o}
    return StepResult(loss, report, z_s3.data[:n].reshape(n * bsz, p).copy(), cos, parts)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: StudentModel
    teacher: EmaTeacher
    steps: int
    completed: bool
    metrics_path: Path | None
    checkpoint_path: Path | None
    history: list[dict]
    wall_seconds: float


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return n_items // batch_size


def _format(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _state_blobs(teacher: EmaTeacher, opt: AdamState) -> dict[str, np.ndarray]:
    blobs = {f"teacher.{k}": v for k, v in teacher.arrays().items()}
    blobs.update({f"adam.m.{k}": v for k, v in opt.m.items()})
    blobs.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    return blobs


def save_training_checkpoint(path, model, teacher, opt, step, cfg: TrainConfig):
    header = {"step": step, "adam_t": opt.t, "train": cfg.to_dict(), "ema_momentum": teacher.momentum}
    return save_model(path, model, header, _state_blobs(teacher, opt))


def load_training_checkpoint(path):
    model, header, blobs = load_model(path)
    if "step" not in header:
        raise ValidationError(f"{path} is a bare model checkpoint, not a training checkpoint")
    names = model.ms_subset_names()
    teacher = EmaTeacher(
        model.encoder,
        {k: Tensor(blobs[f"teacher.{k}"], requires_grad=False, name="teacher." + k) for k in names},
        header.get("ema_momentum", 0.996),
    )
    opt = AdamState(
        {k: blobs[f"adam.m.{k}"] for k in model.params},
        {k: blobs[f"adam.v.{k}"] for k in model.params},
        int(header["adam_t"]),
    )
    return model, teacher, opt, int(header["step"]), header


def _write_nan_dump(out_dir: Path | None, step: int, batch: Batch, report: dict) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / f"nan_dump_step{step}.json"
    doc = {"step": step, "batch_indices": batch.indices.tolist(), "losses": report}
    path.write_text(json.dumps(doc, indent=1, default=str) + "\n", encoding="utf-8")
    return path


def train(
    cfg: TrainConfig,
    data: DatasetManifest,
    frozen: FrozenTeacher,
    out_dir=None,
    resume=None,
    deadline_s: float | None = None,
    on_step: Callable[[dict], None] | None = None,
    model: StudentModel | None = None,
) -> TrainResult:
    """Run pretraining; writes ``metrics.csv``, ``timings.csv`` and checkpoints under ``out_dir``.

    ``deadline_s`` stops the run (``completed=False``) once wall time passes
    the bound. ``model`` supplies an initial student instead of a fresh one.
    """
    cfg.validate()
    if data.channels != cfg.encoder.ms_channels:
        raise ValidationError(f"data has {data.channels} channels, encoder expects {cfg.encoder.ms_channels}")
    if frozen.dim != cfg.heads.bottleneck_opt:
        raise ValidationError(f"frozen teacher width {frozen.dim} != optical head width {cfg.heads.bottleneck_opt}")
    spe = steps_per_epoch(len(data), cfg.batch_size)
    if spe < 1:
        raise ValidationError(f"{len(data)} items cannot fill a batch of {cfg.batch_size}")
    total = spe * cfg.epochs
    warmup = spe * cfg.warmup_epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model, teacher, opt, done, _ = load_training_checkpoint(resume)
    else:
        model = model or StudentModel.create(cfg.encoder, cfg.heads, seed=cfg.seed)
        teacher = EmaTeacher.from_student(model, cfg.ema_momentum)
        opt = AdamState.zeros({k: v.data for k, v in model.params.items()})
        done = 0
    arrays = {k: v.data for k, v in model.params.items()}
    leaves = list(model.params.values())
    n, m, bsz = cfg.aug.n, cfg.aug.m, cfg.batch_size

    metrics_fh = timings_fh = None
    writer = None
    if out is not None:
        mode = "a" if resume is not None else "w"
        metrics_fh = open(out / "metrics.csv", mode, newline="", encoding="utf-8")
        timings_fh = open(out / "timings.csv", mode, encoding="utf-8")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        if resume is None:
            writer.writerow(METRIC_COLUMNS)
            timings_fh.write("step,wall_seconds\n")

    history: list[dict] = []
    t0 = time.perf_counter()
    completed = True
    last_rank, last_eigs = float("nan"), np.full(TOP_K, np.nan)
    step = done
    ckpt = None
    try:
        while step < total:
            if cfg.max_steps and step - done >= cfg.max_steps:
                completed = False
                break
            if deadline_s is not None and time.perf_counter() - t0 > deadline_s:
                completed = False
                break
            epoch, within = divmod(step, spe)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
            idx = order[within * bsz:(within + 1) * bsz]
            batch = build_batch(data, idx, cfg.aug, cfg.seed, step)
            assert cfg.loss.n_procs == 1 and len(idx) == cfg.batch_size

            try:
                with ad.Tape() as tape:
                    res = compute_losses(model, teacher, frozen, batch, cfg.loss, n, m, bsz)
            except NotSPDError as exc:
                # Gram + I is SPD for finite features, so this means NaN or overflow upstream
                dump = _write_nan_dump(out, step, batch, {"error": str(exc)})
                raise NumericalAbort(f"coding-rate Cholesky failed at step {step}: {exc}", dump) from exc
            rep = res.report
            if not all(math.isfinite(v) for v in rep.values()):
                dump = _write_nan_dump(out, step, batch, asdict(rep))
                raise NumericalAbort(f"non-finite loss at step {step}", dump)
            gmap = ad.backward(tape, res.loss, wrt=leaves)
            grads = {k: gmap[v] for k, v in model.params.items()}
            grads, gnorm = clip_global_norm(grads, cfg.grad_clip)
            if not math.isfinite(gnorm):
                dump = _write_nan_dump(out, step, batch, asdict(rep))
                raise NumericalAbort(f"non-finite gradient at step {step}", dump)

            lr = lr_schedule(step, total, warmup, cfg.base_lr, cfg.final_lr)
            wd = cosine_schedule(step, total, cfg.weight_decay, cfg.weight_decay_end)
            adam_step(arrays, grads, opt, lr, wd)
            mom = ema_momentum(step, total, cfg.ema_momentum, cfg.ema_schedule)
            ema_update(teacher, arrays, mom)

            if step % cfg.collapse_interval == 0 or step == total - 1:
                last_rank, lam = collapse_metrics(res.student_global_proj)
                last_eigs = np.full(TOP_K, 0.0)
                last_eigs[: min(TOP_K, lam.size)] = lam[:TOP_K]
            row = {"step": step, "epoch": epoch, "lr": lr, "wd": wd, "ema": mom, **asdict(rep)}
            row["effective_rank"] = last_rank
            for i in range(TOP_K):
                row[f"eig{i}"] = last_eigs[i]
            row["cls_cosine"] = res.cls_cosine
            row["grad_norm"] = gnorm
            history.append(row)
            if writer is not None:
                writer.writerow([_format(row[c]) for c in METRIC_COLUMNS])
                timings_fh.write(f"{step},{time.perf_counter() - t0:.3f}\n")
            if on_step is not None:
                on_step(row)
            step += 1
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                ckpt = save_training_checkpoint(out / f"checkpoint_step{step}.msck", model, teacher, opt, step, cfg)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timings_fh.close()
    if out is not None:
        ckpt = save_training_checkpoint(out / "checkpoint_final.msck", model, teacher, opt, step, cfg)
    return TrainResult(
        model=model,
        teacher=teacher,
        steps=step,
        completed=completed and step == total,
        metrics_path=(out / "metrics.csv") if out is not None else None,
        checkpoint_path=ckpt,
        history=history,
        wall_seconds=time.perf_counter() - t0,
    )


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing moving average; entry t averages values[t - window + 1 .. t]."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]

