"""Training objectives: cosine alignment, coding rate, the multispectral and
optical terms and their combination.

Conventions. View-stacked features have shape ``(V, B, p)``: view index
first, image index second. Student views are ordered globals first, so
student view ``i < n`` shares its crop with teacher global view ``i``.

Signs: ``l_ms = l_cos - gamma * l_cr`` and ``total = -l_ms - l_o``. The
coding-rate term is non-positive, so minimizing ``total`` raises the
cosine terms and the log-determinant of the feature Gram matrix together.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ValidationError
from .model import grid_resample_matrix
from .views import CropParams, source_to_view, view_to_source

PATCH_GLOBAL = "global"  # patch terms on same-crop global pairs only
PATCH_RESAMPLE = "resample"  # also local student views against resampled teacher maps

_UNIT_TOL = 1e-3


@dataclass
class LossConfig:
    gamma: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 0.5
    eps: float = 0.05
    n_procs: int = 1
    cr_prefactor: float | None = None  # None keeps (p + N B) / (p N B)
    patch_pairs: str = PATCH_GLOBAL

    def validate(self) -> None:
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValidationError("alpha weights must be non-negative")
        if self.n_procs < 1:
            raise ValidationError("n_procs must be at least 1")
        if self.patch_pairs not in (PATCH_GLOBAL, PATCH_RESAMPLE):
            raise ValidationError(f"unknown patch pairing {self.patch_pairs!r}")


@dataclass
class LossReport:
    l_cos_ms: float
    l_cr: float
    l_ms: float
    l_o_cls: float
    l_o_p1: float
    l_o_p2: float
    l_o: float
    total: float

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list[float]:
        return [getattr(self, n) for n in self.names()]


# ---------------------------------------------------------------------------
# cosine alignment
# ---------------------------------------------------------------------------


def dino_pairs(n_teacher: int, n_student: int) -> list[tuple[int, int]]:
    """Every (teacher view i, student view j) with j != i."""
    return [(i, j) for i in range(n_teacher) for j in range(n_student) if j != i]


def all_pairs(n_teacher: int, n_student: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_teacher) for j in range(n_student)]


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.sqrt(np.einsum("...i,...i->...", x, x, dtype=np.float64))
    if norms.size and np.max(np.abs(norms - 1.0)) > _UNIT_TOL:
        raise ContractError(f"{what} rows must be unit norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def _as_views(x) -> Tensor:
    t = x if isinstance(x, Tensor) else ad.const(np.asarray(x))
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    return t


def cosine_alignment(teacher_rows, student_rows, pairing: Sequence[tuple[int, int]]) -> Tensor:
    """Mean of ``<teacher[i, b], student[j, b]>`` over the pairs (i, j) and images b.

    Both inputs are ``(V, B, p)`` (or a single ``(B, p)`` view) with unit
    rows. Teacher gradients flow if the teacher tensor records them.
    """
    t, s = _as_views(teacher_rows), _as_views(student_rows)
    if not pairing:
        raise ContractError("cosine alignment needs at least one view pair")
    if t.shape[1:] != s.shape[1:]:
        raise ContractError(f"teacher {t.shape} and student {s.shape} rows differ")
    _check_unit(t.data, "teacher")
    _check_unit(s.data, "student")
    vt, b, p = t.shape
    vs = s.shape[0]
    w = np.zeros((vt, vs))
    for i, j in pairing:
        if not (0 <= i < vt and 0 <= j < vs):
            raise ContractError(f"pair {(i, j)} out of range for {vt} teacher and {vs} student views")
        w[i, j] += 1.0
    wt = ad.const(w.T.astype(t.dtype))
    mixed = ad.matmul(wt, ad.reshape(t, (vt, b * p)))  # (vs, b*p)
    dots = ad.sum(ad.mul(ad.reshape(s, (vs, b * p)), mixed))
    return ad.scale(dots, 1.0 / (len(pairing) * b))


# ---------------------------------------------------------------------------
# coding rate
# ---------------------------------------------------------------------------


def cr_prefactor(p: int, b: int, n_procs: int) -> float:
    return (p + n_procs * b) / (p * n_procs * b)


def coding_rate(z_views: Sequence, eps: float = 0.05, n_procs: int = 1, prefactor: float | None = None) -> Tensor:
    """``-c / V * sum_i logdet(I_p + p / (B N eps) Z_i^T Z_i)`` over (B N, p) matrices Z_i.

    ``c`` defaults to ``(p + N B) / (p N B)``. ``B`` is the row count divided
    by ``N``.
    """
    if not z_views:
        raise ContractError("coding rate needs at least one view")
    zs = [z if isinstance(z, Tensor) else ad.const(np.asarray(z)) for z in z_views]
    rows, p = zs[0].shape if zs[0].ndim == 2 else (0, 0)
    if rows == 0 or p == 0:
        raise ContractError(f"coding rate needs non-empty (rows, p) matrices, got {zs[0].shape}")
    if any(z.shape != (rows, p) for z in zs):
        raise ContractError("coding-rate views must share one shape")
    if rows % n_procs:
        raise ContractError(f"{rows} rows do not split over {n_procs} processes")
    b = rows // n_procs
    c = cr_prefactor(p, b, n_procs) if prefactor is None else prefactor
    scale = p / (b * n_procs * eps)
    eye = ad.const(np.eye(p, dtype=zs[0].dtype))
    total = None
    for z in zs:
        gram = ad.matmul(ad.swap_last(z), z)
        term = ad.spd_logdet_cholesky(ad.add(eye, ad.scale(gram, scale)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, -c / len(zs))


# ---------------------------------------------------------------------------
# multispectral objective
# ---------------------------------------------------------------------------


def loss_ms(teacher_proj_g, student_proj_gl, cfg: LossConfig) -> tuple[Tensor, dict[str, Tensor]]:
    """``l_cos - gamma * l_cr`` from teacher globals (n, B, p) and student views (n + m, B, p).

    The coding rate uses the teacher global rows and the student global rows
    as its two views, each flattened to (n B, p).
    """
    t, s = _as_views(teacher_proj_g), _as_views(student_proj_gl)
    n, b, p = t.shape
    if s.shape[0] < n:
        raise ContractError("student must provide at least the global views")
    l_cos = cosine_alignment(t, s, dino_pairs(n, s.shape[0]))
    zt = ad.reshape(t, (n * b, p))
    zs = ad.reshape(ad.take(s, 0, n, axis=0), (n * b, p))
    l_cr = coding_rate([zt, zs], cfg.eps, cfg.n_procs, cfg.cr_prefactor)
    l_ms = ad.sub(l_cos, ad.scale(l_cr, cfg.gamma))
    return l_ms, {"l_cos_ms": l_cos, "l_cr": l_cr}


# ---------------------------------------------------------------------------
# optical objective
# ---------------------------------------------------------------------------


@dataclass
class TeacherTaps:
    """Raw frozen-teacher outputs on the global optical views.

    cls: (n, B, D); p_F, p_mid: (n, B, T, D). Rows are not yet normalized.
    """

    cls: np.ndarray
    p_F: np.ndarray
    p_mid: np.ndarray


@dataclass
class StudentTaps:
    """Student encoder taps on the optical views (before the heads).

    cls: (n + m, B, D), globals first. p_F / p_mid: global (n, B, T, D) and
    local (m, B, T_l, D) patch maps; the local maps are only used by the
    resampling pairing mode.
    """

    cls: Tensor
    p_F: Tensor
    p_mid: Tensor
    p_F_local: Tensor | None = None
    p_mid_local: Tensor | None = None


def l2n(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, eps)


def _grid(t: int) -> int:
    g = int(round(np.sqrt(t)))
    if g * g != t:
        raise ContractError(f"{t} tokens do not form a square grid")
    return g


def _match_grid(maps: np.ndarray, t_out: int) -> np.ndarray:
    """Bilinearly resample (..., T_in, D) token maps to ``t_out`` tokens when grids differ."""
    t_in = maps.shape[-2]
    if t_in == t_out:
        return maps
    r = grid_resample_matrix(_grid(t_out), _grid(t_in))
    return np.einsum("ot,...td->...od", r, maps)


def local_patch_targets(
    teacher_maps: np.ndarray,
    global_params: Sequence[Sequence[CropParams]],
    local_params: Sequence[Sequence[CropParams]],
    local_grid: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher global patch maps resampled onto each local view's token grid.

    ``teacher_maps`` is (n, B, T, D) with unit rows. For image ``b``,
    ``global_params[b][i]`` and ``local_params[b][j]`` are the crops that
    produced teacher view i and student local view j. Local token centers are
    carried through the source raster into each teacher view; tokens that
    land outside a teacher view get weight 0. Returns summed targets
    (m, B, T_l, D) and weights (m, B, T_l) counting the contributing views.
    """
    n, b, t, d = teacher_maps.shape
    g = _grid(t)
    m = len(local_params[0]) if b else 0
    targets = np.zeros((m, b, local_grid * local_grid, d))
    weights = np.zeros((m, b, local_grid * local_grid))
    centers = (np.arange(local_grid) + 0.5)
    for bi in range(b):
        for j, lp in enumerate(local_params[bi]):
            step = lp.out_size / local_grid
            uu, vv = np.meshgrid(centers * step, centers * step, indexing="ij")
            r, c = view_to_source(lp, uu.ravel(), vv.ravel())
            for i, gp in enumerate(global_params[bi]):
                u, v = source_to_view(gp, r, c)
                inside = (u >= 0) & (u <= gp.out_size) & (v >= 0) & (v <= gp.out_size)
                if not inside.any():
                    continue
                a = np.clip(u * g / gp.out_size - 0.5, 0, g - 1)
                e = np.clip(v * g / gp.out_size - 0.5, 0, g - 1)
                a0, e0 = np.floor(a).astype(int), np.floor(e).astype(int)
                a1, e1 = np.minimum(a0 + 1, g - 1), np.minimum(e0 + 1, g - 1)
                fa, fe = (a - a0)[:, None], (e - e0)[:, None]
                tm = teacher_maps[i, bi]
                val = (
                    (1 - fa) * (1 - fe) * tm[a0 * g + e0]
                    + (1 - fa) * fe * tm[a0 * g + e1]
                    + fa * (1 - fe) * tm[a1 * g + e0]
                    + fa * fe * tm[a1 * g + e1]
                )
                val = l2n(val)
                targets[j, bi] += val * inside[:, None]
                weights[j, bi] += inside
    return targets, weights


def _token_dots(student: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of token dot products against constant (possibly view-summed) targets."""
    return ad.sum(ad.mul(student, ad.const(targets.astype(student.dtype))))


def loss_optical(
    teacher: TeacherTaps,
    student: StudentTaps,
    heads: Callable[[str, Tensor], Tensor],
    cfg: LossConfig,
    geometry: tuple[Sequence[Sequence[CropParams]], Sequence[Sequence[CropParams]]] | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """``alpha1 cos(cls) + alpha2 cos(final patches) + alpha3 cos(mid patches)``.

    ``heads(name, x)`` applies the student head ``cls``, ``p1`` or ``p2``.
    Teacher taps are L2-normalized here. The class term pairs every teacher
    global view with every student view; the patch terms pair each teacher
    global view with the student view of the same crop, and in resampling
    mode also with every local view (``geometry`` then supplies the
    per-image global and local crop lists).
    """
    t_cls = l2n(np.asarray(teacher.cls, dtype=np.float64))
    n, b, _ = t_cls.shape
    s_cls = heads("cls", student.cls)
    l_cls = cosine_alignment(ad.const(t_cls.astype(s_cls.dtype)), s_cls, all_pairs(n, s_cls.shape[0]))

    def patch_term(head: str, t_maps, s_global: Tensor, s_local: Tensor | None) -> Tensor:
        t_maps = l2n(np.asarray(t_maps, dtype=np.float64))
        if s_global.shape[0] != n or s_global.shape[1] != b:
            raise ContractError("student global patch maps must match the teacher's (n, B)")
        t_g = l2n(_match_grid(t_maps, s_global.shape[2]))
        proj = heads(head, s_global)
        _check_unit(proj.data, "student patch")
        dots = _token_dots(proj, t_g)
        count = float(np.prod(proj.shape[:-1]))
        if cfg.patch_pairs == PATCH_RESAMPLE and s_local is not None and s_local.shape[0]:
            if geometry is None:
                raise ContractError("resampling patch pairs need the crop geometry")
            g_l = _grid(s_local.shape[2])
            tgt, w = local_patch_targets(t_maps, geometry[0], geometry[1], g_l)
            proj_l = heads(head, s_local)
            dots = ad.add(dots, _token_dots(proj_l, tgt))
            count += float(w.sum())
        return ad.scale(dots, 1.0 / count)

    l_p1 = patch_term("p1", teacher.p_F, student.p_F, student.p_F_local)
    l_p2 = patch_term("p2", teacher.p_mid, student.p_mid, student.p_mid_local)
    l_o = ad.add(ad.add(ad.scale(l_cls, cfg.alpha1), ad.scale(l_p1, cfg.alpha2)), ad.scale(l_p2, cfg.alpha3))
    return l_o, {"l_o_cls": l_cls, "l_o_p1": l_p1, "l_o_p2": l_p2, "student_cls": s_cls}


def total_loss(l_ms, l_o):
    """``-l_ms - l_o``; works on tensors and on plain floats."""
    if isinstance(l_ms, Tensor) or isinstance(l_o, Tensor):
        return ad.scale(ad.add(l_ms, l_o), -1.0)
    return -l_ms - l_o


def make_report(l_ms: Tensor, ms_parts: dict, l_o: Tensor, o_parts: dict, total: Tensor) -> LossReport:
    return LossReport(
        l_cos_ms=ms_parts["l_cos_ms"].item(),
        l_cr=ms_parts["l_cr"].item(),
        l_ms=l_ms.item(),
        l_o_cls=o_parts["l_o_cls"].item(),
        l_o_p1=o_parts["l_o_p1"].item(),
        l_o_p2=o_parts["l_o_p2"].item(),
        l_o=l_o.item(),
        total=total.item(),
    )
