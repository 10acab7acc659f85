"""The EMA multispectral teacher and the frozen optical teacher.

Both teachers only ever run forward passes with recording disabled, so no
gradient can reach their parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, FormatError, ShapeError, ValidationError
from .model import MS, OPTICAL, EncoderConfig, StudentModel, embed_patches, encode, init_encoder_params, project, to_tensors

RANDOM = "random-frozen"
FILE = "file-loaded"
STUB = "constant-stub"


# ---------------------------------------------------------------------------
# EMA teacher
# ---------------------------------------------------------------------------


@dataclass
class EmaTeacher:
    """Mirror of the student's MS embedding, encoder and ``ms`` head."""

    encoder: EncoderConfig
    params: dict[str, Tensor]
    momentum: float = 0.996

    @classmethod
    def from_student(cls, student: StudentModel, momentum: float = 0.996) -> "EmaTeacher":
        names = student.ms_subset_names()
        params = {k: Tensor(student.params[k].data.copy(), requires_grad=False, name="teacher." + k) for k in names}
        return cls(student.encoder, params, momentum)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def ema_update(teacher: EmaTeacher, student_params: Mapping, momentum: float | None = None) -> EmaTeacher:
    """In place ``theta_t <- m theta_t + (1 - m) theta_s`` over the teacher's names."""
    m = teacher.momentum if momentum is None else momentum
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"EMA momentum {m} outside [0, 1]")
    for name, t in teacher.params.items():
        if name not in student_params:
            raise ShapeError(f"student lacks teacher parameter {name!r}")
        s = student_params[name]
        s = s.data if isinstance(s, Tensor) else np.asarray(s)
        if s.shape != t.data.shape:
            raise ShapeError(f"{name}: teacher {t.data.shape} vs student {s.shape}")
        dt = t.data.dtype
        t.data *= dt.type(m)
        t.data += dt.type(1.0 - m) * s
    return teacher


def ema_momentum(step: int, total_steps: int, base: float, schedule: bool = False) -> float:
    """Constant ``base``, or a cosine ramp from ``base`` to 1 when ``schedule`` is set."""
    if not schedule or total_steps <= 0:
        return base
    return 1.0 - (1.0 - base) * (np.cos(np.pi * step / total_steps) + 1.0) / 2.0


def teacher_forward_ms(teacher: EmaTeacher, ms_global_views, global_size: int | None = None) -> np.ndarray:
    """Projected rows ``p_M(Phi_MS(views))`` for global views only, as an (N, p) array."""
    x = np.asarray(ms_global_views)
    size = teacher.encoder.image_size if global_size is None else global_size
    if x.ndim != 4 or x.shape[2] != size or x.shape[3] != size:
        raise ContractError(f"the MS teacher takes only {size}x{size} global views, got shape {x.shape}")
    with ad.no_record():
        out = encode(embed_patches(x, MS, teacher.params, teacher.encoder), teacher.params, teacher.encoder)
        return project(teacher.params, "ms", out.cls_F).data


# ---------------------------------------------------------------------------
# frozen optical teacher
# ---------------------------------------------------------------------------


@dataclass
class OpticalTaps:
    cls_F: np.ndarray  # (N, D)
    p_F: np.ndarray  # (N, T, D)
    p_mid: np.ndarray  # (N, T, D)


@dataclass
class FrozenTeacher:
    """Fixed optical encoder exposing final-layer class/patch taps and a mid-layer patch tap.

    Variants: ``random-frozen`` (parameters drawn once from a seed),
    ``file-loaded`` (read from a checkpoint) and ``constant-stub``, whose
    taps depend only on the per-image mean ``mu`` of the input::

        cls_F = e_0 + mu * 1,   p_F[t] = e_1 + mu * 1,   p_mid[t] = e_2 + mu * 1

    (``e_k`` the k-th basis vector of width ``embed_dim``, ``1`` all ones).
    """

    variant: str
    encoder: EncoderConfig
    params: dict[str, Tensor]
    seed: int | None = None

    @classmethod
    def random(cls, encoder: EncoderConfig, seed: int) -> "FrozenTeacher":
        encoder.validate()
        arrays = init_encoder_params(encoder, np.random.default_rng(seed), branches=(OPTICAL,))
        return cls(RANDOM, encoder, to_tensors(arrays, np.float32, requires_grad=False), seed)

    @classmethod
    def stub(cls, encoder: EncoderConfig) -> "FrozenTeacher":
        if encoder.embed_dim < 3:
            raise ValidationError("the stub teacher needs embed_dim >= 3")
        return cls(STUB, encoder, {})

    @classmethod
    def load(cls, path) -> "FrozenTeacher":
        header, blobs = load_checkpoint(path)
        if header.get("kind") != "frozen-teacher":
            raise FormatError(f"{path}: not a frozen-teacher checkpoint")
        enc = EncoderConfig(**header["encoder"])
        expected = set(init_encoder_params(enc, np.random.default_rng(0), branches=(OPTICAL,)))
        if set(blobs) != expected:
            raise FormatError(f"{path}: parameter names do not match the encoder config")
        return cls(FILE, enc, to_tensors(blobs, np.float32, requires_grad=False), header.get("seed"))

    def save(self, path):
        if self.variant == STUB:
            raise ContractError("the constant stub has no parameters to save")
        header = {"kind": "frozen-teacher", "variant": self.variant, "seed": self.seed, "encoder": asdict(self.encoder)}
        return save_checkpoint(path, header, {k: v.data for k, v in self.params.items()})

    @property
    def dim(self) -> int:
        return self.encoder.embed_dim

    def forward(self, opt_global_views) -> OpticalTaps:
        x = np.asarray(opt_global_views)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValidationError(f"the optical teacher takes 3-channel images, got shape {x.shape}")
        if self.variant == STUB:
            return self._stub_taps(x)
        with ad.no_record():
            out = encode(embed_patches(x, OPTICAL, self.params, self.encoder), self.params, self.encoder)
        return OpticalTaps(out.cls_F.data, out.p_F.data, out.p_mid.data)

    def _stub_taps(self, x: np.ndarray) -> OpticalTaps:
        n, _, h, w = x.shape
        d, p = self.encoder.embed_dim, self.encoder.patch_size
        t = (h // p) * (w // p)
        mu = x.reshape(n, -1).mean(axis=1).astype(np.float32)
        eye = np.eye(d, dtype=np.float32)
        cls = eye[0] + mu[:, None]
        pf = np.broadcast_to(eye[1] + mu[:, None, None], (n, t, d)).copy()
        pm = np.broadcast_to(eye[2] + mu[:, None, None], (n, t, d)).copy()
        return OpticalTaps(cls, pf, pm)


def teacher_forward_optical(frozen: FrozenTeacher, opt_global_views) -> OpticalTaps:
    return frozen.forward(opt_global_views)


def default_frozen_encoder(student: EncoderConfig, width: int, depth: int | None = None) -> EncoderConfig:
    """Teacher encoder whose width matches the optical head output; mid tap at half depth."""
    depth = student.depth if depth is None else depth
    heads = student.heads if width % student.heads == 0 else 1
    return EncoderConfig(
        patch_size=student.patch_size,
        embed_dim=width,
        depth=depth,
        heads=heads,
        mid_layer=max(depth // 2, 1) if depth > 1 else depth,
        ms_channels=student.ms_channels,
        optical_channels=3,
        mlp_ratio=student.mlp_ratio,
        image_size=student.image_size,
    )
