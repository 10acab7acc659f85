"""Student encoder with separate multispectral and optical patch embeddings.

The backbone is a plain pre-norm transformer. Parameters live in flat
``dict[str, Tensor]`` maps keyed by dotted names so that the EMA teacher, the
optimizer and the checkpoint writer can all address them uniformly.

Parameter count (``D`` embed width, ``P`` patch size, ``R`` mlp ratio,
``G`` = (image_size / P)^2 positional slots, ``C`` multispectral channels)::

    embeddings   (C + 3) * P^2 * D + 2 * D  +  D  +  G * D
    per block    4 * D + (3 * D^2 + 3 * D) + (D^2 + D) + (R * D^2 + R * D) + (R * D^2 + D)
    final norm   2 * D                                   (omitted when depth == 0)
    each head    in * hidden + hidden + hidden * out + out

See :func:`parameter_count`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, ShapeError, ValidationError
from .resample import interp_matrix

MS = "ms"
OPTICAL = "opt"
HEAD_NAMES = ("ms", "cls", "p1", "p2")


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mid_layer: int = 2
    ms_channels: int = 10
    optical_channels: int = 3
    mlp_ratio: int = 4
    image_size: int = 32  # sets the positional-embedding grid at init

    def validate(self) -> None:
        if self.patch_size < 1 or self.embed_dim < 1 or self.heads < 1:
            raise ValidationError("patch_size, embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValidationError("depth must be non-negative")
        if self.depth == 0:
            if self.mid_layer != 0:
                raise ValidationError("depth 0 requires mid_layer 0")
        elif self.depth == 1:
            if self.mid_layer not in (0, 1):
                raise ValidationError("depth 1 allows mid_layer 0 or 1")
        elif not 1 <= self.mid_layer < self.depth:
            raise ValidationError(f"mid_layer must lie in [1, {self.depth}), got {self.mid_layer}")
        if self.image_size % self.patch_size:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.optical_channels != 3:
            raise ValidationError("the optical branch is fixed at 3 channels")
        if self.ms_channels < 3:
            raise ValidationError("multispectral branch needs at least 3 channels")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class HeadConfig:
    hidden_dim: int = 256
    bottleneck_ms: int = 32
    bottleneck_opt: int = 64

    def out_dim(self, head: str) -> int:
        return self.bottleneck_ms if head == "ms" else self.bottleneck_opt


class EncoderOutputs(NamedTuple):
    cls_F: Tensor  # (N, D)
    p_F: Tensor  # (N, T, D)
    p_mid: Tensor  # (N, T, D)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, branches=(MS, OPTICAL)) -> dict[str, np.ndarray]:
    cfg.validate()
    d, p = cfg.embed_dim, cfg.patch_size
    out: dict[str, np.ndarray] = {}
    for branch in branches:
        c = cfg.ms_channels if branch == MS else cfg.optical_channels
        out[f"embed.{branch}.weight"] = _xavier(rng, c * p * p, d)
        out[f"embed.{branch}.bias"] = np.zeros(d)
    out["embed.cls"] = _trunc_normal(rng, (d,))
    out["embed.pos"] = _trunc_normal(rng, (cfg.grid * cfg.grid, d))
    hid = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        out[pre + "norm1.weight"] = np.ones(d)
        out[pre + "norm1.bias"] = np.zeros(d)
        out[pre + "qkv.weight"] = _trunc_normal(rng, (d, 3 * d))
        out[pre + "qkv.bias"] = np.zeros(3 * d)
        out[pre + "proj.weight"] = _trunc_normal(rng, (d, d))
        out[pre + "proj.bias"] = np.zeros(d)
        out[pre + "norm2.weight"] = np.ones(d)
        out[pre + "norm2.bias"] = np.zeros(d)
        out[pre + "fc1.weight"] = _trunc_normal(rng, (d, hid))
        out[pre + "fc1.bias"] = np.zeros(hid)
        out[pre + "fc2.weight"] = _trunc_normal(rng, (hid, d))
        out[pre + "fc2.bias"] = np.zeros(d)
    if cfg.depth > 0:
        out["norm.weight"] = np.ones(d)
        out["norm.bias"] = np.zeros(d)
    return out


def init_head_params(name: str, in_dim: int, hidden_dim: int, out_dim: int, rng) -> dict[str, np.ndarray]:
    pre = f"head.{name}."
    return {
        pre + "fc1.weight": _trunc_normal(rng, (in_dim, hidden_dim)),
        pre + "fc1.bias": np.zeros(hidden_dim),
        pre + "fc2.weight": _trunc_normal(rng, (hidden_dim, out_dim)),
        pre + "fc2.bias": np.zeros(out_dim),
    }


def to_tensors(arrays: Mapping[str, np.ndarray], dtype=np.float32, requires_grad=True) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=dtype), requires_grad=requires_grad, name=k) for k, v in arrays.items()}


def parameter_count(cfg: EncoderConfig, heads: HeadConfig | None = None, branches=(MS, OPTICAL)) -> int:
    d, p, r = cfg.embed_dim, cfg.patch_size, cfg.mlp_ratio
    n = 0
    for branch in branches:
        c = cfg.ms_channels if branch == MS else cfg.optical_channels
        n += c * p * p * d + d
    n += d + cfg.grid * cfg.grid * d
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (r * d * d + r * d) + (r * d * d + d)
    n += cfg.depth * block
    if cfg.depth > 0:
        n += 2 * d
    if heads is not None:
        for h in HEAD_NAMES:
            n += d * heads.hidden_dim + heads.hidden_dim + heads.hidden_dim * heads.out_dim(h) + heads.out_dim(h)
    return n


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, H, W) -> (N, T, C*patch*patch), tokens in row-major grid order."""
    n, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValidationError(f"image size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(n, gh * gw, c * patch * patch))


@lru_cache(maxsize=None)
def grid_resample_matrix(g_out: int, g_in: int) -> np.ndarray:
    """Bilinear map from a g_in x g_in token grid to a g_out x g_out grid, as (g_out^2, g_in^2)."""
    r = interp_matrix(g_out, g_in)
    return np.kron(r, r)


def embed_patches(images, branch: str, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Linear patch projection + positional embedding + prepended class token.

    ``images`` is an (N, C, H, W) array (or a single (C, H, W) image). Returns
    (N, T + 1, D) tokens with the class token at index 0.
    """
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    expected = cfg.ms_channels if branch == MS else cfg.optical_channels
    if branch not in (MS, OPTICAL):
        raise ValidationError(f"unknown branch {branch!r}")
    if x.shape[1] != expected:
        raise ValidationError(f"{branch} branch expects {expected} channels, got {x.shape[1]}")
    if x.shape[2] != x.shape[3]:
        raise ValidationError("views must be square")
    weight = params[f"embed.{branch}.weight"]
    n = x.shape[0]
    g = x.shape[2] // cfg.patch_size
    patches = ad.const(patchify(x, cfg.patch_size).astype(weight.dtype, copy=False))
    tokens = ad.linear(patches, weight, params[f"embed.{branch}.bias"])
    pos = params["embed.pos"]
    g0 = int(round(math.sqrt(pos.shape[0])))
    if g != g0:
        pos = ad.matmul(ad.const(grid_resample_matrix(g, g0).astype(pos.dtype)), pos)
    tokens = ad.add(tokens, ad.expand(pos, tokens.shape))
    d = tokens.shape[-1]
    cls = ad.expand(params["embed.cls"], (n, 1, d))
    return ad.concat([cls, tokens], axis=1)


def attention(x: Tensor, params: Mapping[str, Tensor], pre: str, heads: int) -> Tensor:
    n, t, d = x.shape
    dh = d // heads
    w, b = params[pre + "qkv.weight"], params[pre + "qkv.bias"]
    parts = []
    for j in range(3):
        h = ad.linear(x, ad.take(w, j * d, (j + 1) * d, axis=1), ad.take(b, j * d, (j + 1) * d))
        parts.append(ad.transpose(ad.reshape(h, (n, t, heads, dh)), (0, 2, 1, 3)))
    q, k, v = parts
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
    out = ad.matmul(ad.softmax(scores), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (n, t, d))
    return ad.linear(out, params[pre + "proj.weight"], params[pre + "proj.bias"])


def block(x: Tensor, params: Mapping[str, Tensor], i: int, heads: int) -> Tensor:
    pre = f"blocks.{i}."
    h = ad.layer_norm(x, params[pre + "norm1.weight"], params[pre + "norm1.bias"])
    x = ad.add(x, attention(h, params, pre, heads))
    h = ad.layer_norm(x, params[pre + "norm2.weight"], params[pre + "norm2.bias"])
    h = ad.gelu(ad.linear(h, params[pre + "fc1.weight"], params[pre + "fc1.bias"]))
    return ad.add(x, ad.linear(h, params[pre + "fc2.weight"], params[pre + "fc2.bias"]))


def encode(tokens: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig) -> EncoderOutputs:
    """Run the transformer blocks and expose the class, final-patch and mid-patch taps.

    With ``depth == 0`` the taps are the embedded tokens themselves.
    """
    n, t1, d = tokens.shape
    x = tokens
    mid = tokens
    for i in range(cfg.depth):
        x = block(x, params, i, cfg.heads)
        if i + 1 == cfg.mid_layer:
            mid = x
    if cfg.depth > 0:
        x = ad.layer_norm(x, params["norm.weight"], params["norm.bias"])
    cls = ad.reshape(ad.take(x, 0, 1, axis=1), (n, d))
    return EncoderOutputs(cls, ad.take(x, 1, t1, axis=1), ad.take(mid, 1, t1, axis=1))


def project(params: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    """Two-layer perceptron head (GELU between) followed by L2 normalization."""
    w1 = params[f"head.{name}.fc1.weight"]
    if x.shape[-1] != w1.shape[0]:
        raise ShapeError(f"head {name} expects width {w1.shape[0]}, got {x.shape[-1]}")
    h = ad.gelu(ad.linear(x, w1, params[f"head.{name}.fc1.bias"]))
    h = ad.linear(h, params[f"head.{name}.fc2.weight"], params[f"head.{name}.fc2.bias"])
    return ad.l2_normalize(h)


# ---------------------------------------------------------------------------
# the student
# ---------------------------------------------------------------------------


@dataclass
class StudentModel:
    """Encoder shared by both branches plus the four student projection heads.

    Heads: ``ms`` (multispectral projection), ``cls``, ``p1`` (final patch
    tokens) and ``p2`` (mid-layer patch tokens) for the optical distillation.
    """

    encoder: EncoderConfig
    heads: HeadConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, encoder: EncoderConfig, heads: HeadConfig, seed: int = 0, dtype=np.float32) -> "StudentModel":
        encoder.validate()
        rng = np.random.default_rng(seed)
        arrays = init_encoder_params(encoder, rng)
        for name in HEAD_NAMES:
            arrays.update(init_head_params(name, encoder.embed_dim, heads.hidden_dim, heads.out_dim(name), rng))
        return cls(encoder, heads, to_tensors(arrays, dtype))

    def astype(self, dtype) -> "StudentModel":
        return StudentModel(self.encoder, self.heads, to_tensors({k: v.data for k, v in self.params.items()}, dtype))

    def forward(self, images, branch: str) -> EncoderOutputs:
        return encode(embed_patches(images, branch, self.params, self.encoder), self.params, self.encoder)

    def forward_joint(self, batches) -> list[EncoderOutputs]:
        """Encode several ``(images, branch)`` batches of equal size in one pass.

        Embeddings stay branch-specific; the shared encoder then runs once on
        the stacked tokens, which is cheaper than separate passes and gives
        the same per-sample outputs.
        """
        tokens = [embed_patches(images, branch, self.params, self.encoder) for images, branch in batches]
        if len(tokens) == 1:
            return [encode(tokens[0], self.params, self.encoder)]
        sizes = [t.shape[0] for t in tokens]
        out = encode(ad.concat(tokens, axis=0), self.params, self.encoder)
        parts = [ad.split(o, sizes, axis=0) for o in out]
        return [EncoderOutputs(*(p[i] for p in parts)) for i in range(len(sizes))]

    def project(self, name: str, x: Tensor) -> Tensor:
        return project(self.params, name, x)

    def ms_subset_names(self) -> list[str]:
        """Names mirrored by the EMA teacher: MS embedding, encoder, and the MS head."""
        return [k for k in self.params if not k.startswith(("embed.opt.", "head.cls.", "head.p1.", "head.p2."))]

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "heads": asdict(self.heads)}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: StudentModel, header: Mapping | None = None, extra: Mapping[str, np.ndarray] | None = None):
    """Write the student (plus optional extra blobs such as optimizer state)."""
    head = {"kind": "student", **model.config_dict(), **(header or {})}
    blobs = {k: v.data for k, v in model.params.items()}
    if extra:
        clash = set(blobs) & set(extra)
        if clash:
            raise ValidationError(f"extra blobs collide with parameters: {sorted(clash)[:3]}")
        blobs.update(extra)
    return save_checkpoint(path, head, blobs)


def load_model(path, dtype=np.float32) -> tuple[StudentModel, dict, dict[str, np.ndarray]]:
    """Read a student checkpoint; returns the model, the header and the non-parameter blobs."""
    header, blobs = load_checkpoint(path)
    if header.get("kind") != "student":
        raise FormatError(f"{path}: not a student checkpoint (kind={header.get('kind')!r})")
    enc = EncoderConfig(**header["encoder"])
    heads = HeadConfig(**header["heads"])
    expected = set(StudentModel.create(enc, heads).params)
    missing = expected - set(blobs)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)[:3]}")
    params = {k: blobs.pop(k) for k in sorted(expected)}
    model = StudentModel(enc, heads, to_tensors(params, dtype))
    return model, header, blobs
