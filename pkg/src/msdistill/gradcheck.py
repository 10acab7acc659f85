"""Finite-difference verification of every loss component at float64.

A tiny student sees a fixed two-image micro-batch (two global and two local
views each). The EMA and frozen teachers are constants, so each component is
a deterministic function of the student parameters alone and central
differences can be compared with the tape gradients coordinate by coordinate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import LossConfig
from .model import EncoderConfig, HeadConfig, StudentModel, init_encoder_params, to_tensors
from .raster import generate_synthetic_dataset
from .teachers import EmaTeacher, FrozenTeacher, default_frozen_encoder
from .trainer import build_batch, compute_losses
from .views import AugConfig

COMPONENTS = ("l_cos", "l_cr", "l_ms", "l_o", "total")
THRESHOLD = 1e-4


@dataclass
class GradcheckResult:
    component: str
    max_rel_error: float
    n_coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < THRESHOLD)


def micro_setup(seed: int = 0):
    """Tiny float64 student, both teachers and one fixed batch."""
    enc = EncoderConfig(patch_size=2, embed_dim=8, depth=2, heads=2, mid_layer=1, ms_channels=10,
                        optical_channels=3, mlp_ratio=2, image_size=8)
    heads = HeadConfig(hidden_dim=8, bottleneck_ms=4, bottleneck_opt=6)
    aug = AugConfig(n=2, m=2, out_global=8, out_local=4)
    data = generate_synthetic_dataset(2, 10, 12, 12, 2, seed)
    batch = build_batch(data, np.arange(2), aug, seed, 0)
    model = StudentModel.create(enc, heads, seed=seed, dtype=np.float64)
    # Training init keeps head outputs near zero norm, where the L2 normalization
    # is so curved that central differences lose all accuracy. Any point works
    # for a gradient check, so draw a well-scaled one instead.
    prng = np.random.default_rng([seed, 3])
    for k, t in model.params.items():
        if t.data.ndim == 2 and not k.startswith("embed."):
            t.data = prng.standard_normal(t.data.shape) / np.sqrt(t.data.shape[0])
        elif k.endswith("norm1.weight") or k.endswith("norm2.weight") or k == "norm.weight":
            t.data = 1.0 + 0.1 * prng.standard_normal(t.data.shape)
        else:
            t.data = t.data + 0.1 * prng.standard_normal(t.data.shape)
    # a teacher slightly away from the student so the cosine terms are not at a stationary point
    rng = np.random.default_rng([seed, 1])
    teacher = EmaTeacher.from_student(model)
    for t in teacher.params.values():
        t.data = t.data + 0.05 * rng.standard_normal(t.data.shape)
    fenc = default_frozen_encoder(enc, heads.bottleneck_opt)
    fparams = init_encoder_params(fenc, np.random.default_rng([seed, 2]), branches=("opt",))
    frozen = FrozenTeacher("random-frozen", fenc, to_tensors(fparams, np.float64, requires_grad=False), seed)
    return model, teacher, frozen, batch, aug


def component_fn(name: str, model, teacher, frozen, batch, aug, cfg: LossConfig):
    def fn():
        res = compute_losses(model, teacher, frozen, batch, cfg, aug.n, aug.m, len(batch.indices))
        return res.loss if name == "total" else res.parts[name]
    return fn


def run_gradcheck(components=COMPONENTS, seed: int = 0, coords_per_tensor: int = 5,
                  break_cholesky: bool = False, h: float = 1e-4) -> list[GradcheckResult]:
    model, teacher, frozen, batch, aug = micro_setup(seed)
    cfg = LossConfig()
    params = list(model.params.values())
    results = []
    for name in components:
        if name not in COMPONENTS:
            raise ValueError(f"unknown component {name!r}; choose from {', '.join(COMPONENTS)}")
        t0 = time.perf_counter()
        fn = component_fn(name, model, teacher, frozen, batch, aug, cfg)
        _, grads = ad.grad(fn, params)
        # only tensors the component depends on are worth probing
        live = [p for p, g in zip(params, grads) if np.any(g != 0)]
        rng = np.random.default_rng([seed, COMPONENTS.index(name)])
        if break_cholesky:
            with ad.inject_fault("cholesky_backward"):
                err = ad.finite_diff_check(fn, live, h=h, max_coords=coords_per_tensor, rng=rng)
        else:
            err = ad.finite_diff_check(fn, live, h=h, max_coords=coords_per_tensor, rng=rng)
        n_coords = sum(min(p.size, coords_per_tensor) for p in live)
        results.append(GradcheckResult(name, err, n_coords, time.perf_counter() - t0))
    return results
