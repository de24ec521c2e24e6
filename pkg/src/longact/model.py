"""A small temporal ConvNet with exact analytic gradients.

Architecture (all math in float64):

    input (T, D)
      -> linear projection D -> H
      -> K residual blocks:  h + PW(GELU(DW(LN(h))))
           LN  = layer norm over channels (gain, bias)
           DW  = depthwise temporal conv, odd width w, zero "same" padding
           PW  = pointwise (1x1) linear H -> H
      -> hidden (T, H)
      -> segmentation head  hidden @ w_seg + b_seg -> logits (T, C)
      -> reconstruction head hidden @ w_rec + b_rec -> recon  (T, D)

A learned ``mask_token`` (shape (D,)) replaces masked input rows during
masked-reconstruction pretraining; its gradient is the sum of the input-row
gradients at the masked positions.

Parameters live in a flat name -> ndarray dict; gradients come back in an
identically keyed dict.  ``finite_difference_gradients`` provides the
central-difference checker used to validate every analytic gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

LN_EPS = 1e-8
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

CHECKPOINT_MAGIC = b"EGOC"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or container version not recognized."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload."""


class CheckpointShapeError(CheckpointError):
    """Tensor table is inconsistent or does not match the expected model."""


@dataclass(frozen=True)
class ModelHyper:
    """Model dimensions.  ``kernel_width`` must be odd (centered padding)."""

    feature_dim: int = 16
    hidden_dim: int = 32
    num_classes: int = 10
    num_blocks: int = 4
    kernel_width: int = 9

    def __post_init__(self) -> None:
        for name in ("feature_dim", "hidden_dim", "num_classes", "num_blocks", "kernel_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel_width % 2 == 0:
            raise ValueError(f"kernel_width must be odd, got {self.kernel_width}")


def parameter_shapes(hyper: ModelHyper) -> dict[str, tuple[int, ...]]:
    """Canonical tensor table: name -> shape."""
    d, h, c, w = hyper.feature_dim, hyper.hidden_dim, hyper.num_classes, hyper.kernel_width
    shapes: dict[str, tuple[int, ...]] = {
        "w_in": (d, h),
        "b_in": (h,),
        "w_seg": (h, c),
        "b_seg": (c,),
        "w_rec": (h, d),
        "b_rec": (d,),
        "mask_token": (d,),
    }
    for k in range(hyper.num_blocks):
        shapes[f"blocks.{k}.ln_gain"] = (h,)
        shapes[f"blocks.{k}.ln_bias"] = (h,)
        shapes[f"blocks.{k}.dw_kernel"] = (w, h)
        shapes[f"blocks.{k}.pw_weight"] = (h, h)
        shapes[f"blocks.{k}.pw_bias"] = (h,)
    return shapes


@dataclass
class ModelParams:
    """Hyperparameters plus the flat tensor dict (float64)."""

    hyper: ModelHyper
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = parameter_shapes(self.hyper)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"tensor table mismatch: missing={missing} extra={extra}")
        for name in sorted(expected):
            t = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
            if t.shape != expected[name]:
                raise ValueError(
                    f"tensor {name!r} has shape {t.shape}, expected {expected[name]}"
                )
            self.tensors[name] = t

    def copy(self) -> "ModelParams":
        return ModelParams(
            hyper=self.hyper, tensors={k: v.copy() for k, v in self.tensors.items()}
        )


def zero_gradients(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def init_params(hyper: ModelHyper, rng: np.random.Generator) -> ModelParams:
    """Gaussian init, drawn tensor-by-tensor in sorted name order.

    Weights use 1/sqrt(fan_in) scales; the residual branch output (pointwise
    weight) is damped by 0.5 so deep stacks start near the identity; layer
    norm gains start at 1, all biases at 0; the mask token matches the input
    feature scale.
    """
    d, h, w = hyper.feature_dim, hyper.hidden_dim, hyper.kernel_width
    stds = {
        "w_in": d ** -0.5,
        "w_seg": h ** -0.5,
        "w_rec": h ** -0.5,
        "mask_token": d ** -0.5,
    }
    tensors: dict[str, np.ndarray] = {}
    for name, shape in sorted(parameter_shapes(hyper).items()):
        if name.endswith(("ln_gain",)):
            tensors[name] = np.ones(shape)
        elif name.endswith(("ln_bias", "pw_bias")) or name in ("b_in", "b_seg", "b_rec"):
            tensors[name] = np.zeros(shape)
        elif name.endswith("dw_kernel"):
            tensors[name] = rng.standard_normal(shape) * (w ** -0.5)
        elif name.endswith("pw_weight"):
            tensors[name] = rng.standard_normal(shape) * (0.5 * h ** -0.5)
        else:
            tensors[name] = rng.standard_normal(shape) * stds[name]
    return ModelParams(hyper=hyper, tensors=tensors)


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------

def _gelu_inner(x: np.ndarray) -> np.ndarray:
    """tanh argument of the GELU approximation (pow-free: x**3 is slow)."""
    return _GELU_C * (x + _GELU_A * (x * x * x))


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_gelu_inner(x)))


def _gelu_fwd(x: np.ndarray):
    """(activation, tanh value); the tanh is cached for the backward pass."""
    t = np.tanh(_gelu_inner(x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d gelu / dx given the cached tanh value."""
    return 0.5 * (1.0 + t) + (
        0.5 * _GELU_C
    ) * x * (1.0 - t * t) * (1.0 + 3.0 * _GELU_A * (x * x))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return _gelu_bwd(x, np.tanh(_gelu_inner(x)))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return (xc / np.sqrt(var + LN_EPS)) * gain + bias


def _layer_norm_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _layer_norm_bwd(dy, gain, xhat, inv):
    dgain = np.einsum("bth,bth->h", dy, xhat)
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _depthwise_fwd(x, kernel):
    w = kernel.shape[0]
    r = (w - 1) // 2
    t = x.shape[1]
    xp = np.pad(x, ((0, 0), (r, r), (0, 0)))
    out = np.zeros_like(x)
    for j in range(w):
        out += xp[:, j : j + t, :] * kernel[j]
    return out, xp


def _depthwise_bwd(dout, kernel, xp):
    w = kernel.shape[0]
    r = (w - 1) // 2
    t = dout.shape[1]
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    for j in range(w):
        dxp[:, j : j + t, :] += dout * kernel[j]
        dkernel[j] = np.einsum("bth,bth->h", dout, xp[:, j : j + t, :])
    return dxp[:, r : r + t, :], dkernel


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForwardResult:
    """Per-clip outputs (no batch axis)."""

    hidden: np.ndarray   # (T, H) final block output
    logits: np.ndarray   # (T, C)
    recon: np.ndarray    # (T, D)


@dataclass(frozen=True)
class ForwardDetail:
    """Like ForwardResult, plus each block's output (for feature readout)."""

    block_hidden: tuple[np.ndarray, ...]
    hidden: np.ndarray
    logits: np.ndarray
    recon: np.ndarray


def _forward_batch(params: ModelParams, x: np.ndarray):
    """Run the network on (B, T, D) input; returns outputs plus the cache."""
    p = params.tensors
    k_blocks = params.hyper.num_blocks
    h = x @ p["w_in"] + p["b_in"]
    h_list = [h]
    blocks = []
    for k in range(k_blocks):
        gain, bias = p[f"blocks.{k}.ln_gain"], p[f"blocks.{k}.ln_bias"]
        yln, xhat, inv = _layer_norm_fwd(h, gain, bias)
        z, xp = _depthwise_fwd(yln, p[f"blocks.{k}.dw_kernel"])
        a, t = _gelu_fwd(z)
        branch = a @ p[f"blocks.{k}.pw_weight"] + p[f"blocks.{k}.pw_bias"]
        h = h + branch
        h_list.append(h)
        blocks.append((xhat, inv, xp, z, a, t))
    logits = h @ p["w_seg"] + p["b_seg"]
    recon = h @ p["w_rec"] + p["b_rec"]
    cache = {"x": x, "h_list": h_list, "blocks": blocks}
    return h, logits, recon, cache


def _backward_batch(params: ModelParams, cache, d_logits, d_recon):
    """Exact gradients for (B, T, *) upstream; returns (grads, d_input).

    ``d_logits`` / ``d_recon`` may be None to mean an all-zero upstream for
    that head.  The mask-token entry of the returned gradient dict is zero;
    callers that masked input rows must fill it from ``d_input``.
    """
    p = params.tensors
    hidden = cache["h_list"][-1]
    grads = zero_gradients(params)
    d_h = np.zeros_like(hidden)
    if d_logits is not None:
        grads["w_seg"] = np.einsum("bth,btc->hc", hidden, d_logits)
        grads["b_seg"] = d_logits.sum(axis=(0, 1))
        d_h += d_logits @ p["w_seg"].T
    if d_recon is not None:
        grads["w_rec"] = np.einsum("bth,btd->hd", hidden, d_recon)
        grads["b_rec"] = d_recon.sum(axis=(0, 1))
        d_h += d_recon @ p["w_rec"].T
    for k in reversed(range(params.hyper.num_blocks)):
        xhat, inv, xp, z, a, t = cache["blocks"][k]
        dp = d_h
        grads[f"blocks.{k}.pw_bias"] = dp.sum(axis=(0, 1))
        grads[f"blocks.{k}.pw_weight"] = np.einsum("bth,btm->hm", a, dp)
        da = dp @ p[f"blocks.{k}.pw_weight"].T
        dz = da * _gelu_bwd(z, t)
        dyln, dkernel = _depthwise_bwd(dz, p[f"blocks.{k}.dw_kernel"], xp)
        grads[f"blocks.{k}.dw_kernel"] = dkernel
        dx_branch, dgain, dbias = _layer_norm_bwd(
            dyln, p[f"blocks.{k}.ln_gain"], xhat, inv
        )
        grads[f"blocks.{k}.ln_gain"] = dgain
        grads[f"blocks.{k}.ln_bias"] = dbias
        d_h = d_h + dx_branch
    grads["w_in"] = np.einsum("btd,bth->dh", cache["x"], d_h)
    grads["b_in"] = d_h.sum(axis=(0, 1))
    d_input = d_h @ p["w_in"].T
    return grads, d_input


def forward(params: ModelParams, frames: np.ndarray) -> ForwardResult:
    """Run one clip (T, D) through the network.

    Pure function of (params, frames): identical inputs give bit-identical
    outputs.
    """
    x = _check_frames(params, frames)
    hidden, logits, recon, _ = _forward_batch(params, x[None])
    return ForwardResult(hidden=hidden[0], logits=logits[0], recon=recon[0])


def forward_detailed(params: ModelParams, frames: np.ndarray) -> ForwardDetail:
    """Like :func:`forward`, also exposing every block's output."""
    x = _check_frames(params, frames)
    hidden, logits, recon, cache = _forward_batch(params, x[None])
    blocks = tuple(h[0] for h in cache["h_list"][1:])
    return ForwardDetail(
        block_hidden=blocks, hidden=hidden[0], logits=logits[0], recon=recon[0]
    )


def backward(
    params: ModelParams,
    frames: np.ndarray,
    d_logits: np.ndarray | None,
    d_recon: np.ndarray | None,
    masked_rows: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of sum(d_logits * logits) + sum(d_recon * recon) w.r.t. all
    parameters, for a single clip.

    ``frames`` must be the ACTUAL network input; when pretraining masked rows
    with the mask token, pass the token-substituted frames plus the masked row
    indices, and the mask-token gradient is accumulated from those rows.
    """
    x = _check_frames(params, frames)
    if d_logits is not None:
        d_logits = np.asarray(d_logits, dtype=np.float64)[None]
    if d_recon is not None:
        d_recon = np.asarray(d_recon, dtype=np.float64)[None]
    _, _, _, cache = _forward_batch(params, x[None])
    grads, d_input = _backward_batch(params, cache, d_logits, d_recon)
    if masked_rows is not None and len(masked_rows) > 0:
        grads["mask_token"] = d_input[0][np.asarray(masked_rows, dtype=np.int64)].sum(axis=0)
    return grads


def _check_frames(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.hyper.feature_dim:
        raise ValueError(
            f"frames must be (T, {params.hyper.feature_dim}), got shape {x.shape}"
        )
    return x


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def finite_difference_gradients(loss_fn, params: ModelParams, step: float = 1e-3):
    """Central-difference gradient of ``loss_fn(params)`` for every tensor.

    Perturbs each parameter element in place (restoring it afterwards), so
    ``loss_fn`` must read the tensors on every call.  O(parameter count) loss
    evaluations: intended for small test models only.
    """
    grads = {}
    for name in sorted(params.tensors):
        flat = params.tensors[name].reshape(-1)
        out = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(params)
            flat[i] = orig - step
            lm = loss_fn(params)
            flat[i] = orig
            out[i] = (lp - lm) / (2.0 * step)
        grads[name] = out.reshape(params.tensors[name].shape)
    return grads


def gradient_max_rel_err(
    analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]
) -> float:
    """Worst per-tensor relative error: max|a - n| / max(max|a|, max|n|, 1e-8)."""
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n)) / denom))
    return worst


# ---------------------------------------------------------------------------
# Checkpoint I/O (binary, little-endian, float64)
# ---------------------------------------------------------------------------

def checkpoint_save(params: ModelParams, path: str | Path) -> None:
    """Write all tensors in sorted name order.

    Layout: magic "EGOC", u32 version, u32 tensor count, then per tensor:
    u32 name length, UTF-8 name, u32 rank, u32 dims..., float64 LE data.
    """
    names = sorted(params.tensors)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            t = params.tensors[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {self.pos}: needed {n} more bytes"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_load(path: str | Path, expect: ModelHyper | None = None) -> ModelParams:
    """Read a checkpoint; reconstructs the hyperparameters from tensor shapes.

    With ``expect`` given, every tensor must match the expected table exactly
    or a CheckpointShapeError naming the offending tensor is raised.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"bad checkpoint magic: {magic!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version: {version}")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
        if name in tensors:
            raise CheckpointShapeError(f"duplicate tensor {name!r}")
        tensors[name] = np.ascontiguousarray(data, dtype=np.float64)
    if r.pos != len(r.raw):
        raise CheckpointShapeError(f"{len(r.raw) - r.pos} trailing bytes after tensor table")
    hyper = expect if expect is not None else _hyper_from_tensors(tensors)
    expected = parameter_shapes(hyper)
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            raise CheckpointShapeError(f"missing tensor {name!r}")
        if name not in expected:
            raise CheckpointShapeError(f"unexpected tensor {name!r}")
        if tensors[name].shape != expected[name]:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {expected[name]}"
            )
    return ModelParams(hyper=hyper, tensors=tensors)


def _hyper_from_tensors(tensors: dict[str, np.ndarray]) -> ModelHyper:
    for req in ("w_in", "w_seg", "blocks.0.dw_kernel"):
        if req not in tensors:
            raise CheckpointShapeError(f"missing tensor {req!r}")
    if tensors["w_in"].ndim != 2 or tensors["w_seg"].ndim != 2:
        raise CheckpointShapeError("projection tensors must be rank 2")
    if tensors["blocks.0.dw_kernel"].ndim != 2:
        raise CheckpointShapeError("tensor 'blocks.0.dw_kernel' must be rank 2")
    blocks = {
        int(name.split(".")[1])
        for name in tensors
        if name.startswith("blocks.") and name.endswith(".dw_kernel")
    }
    if blocks != set(range(len(blocks))):
        raise CheckpointShapeError(f"non-contiguous block indices: {sorted(blocks)}")
    try:
        return ModelHyper(
            feature_dim=tensors["w_in"].shape[0],
            hidden_dim=tensors["w_in"].shape[1],
            num_classes=tensors["w_seg"].shape[1],
            num_blocks=len(blocks),
            kernel_width=tensors["blocks.0.dw_kernel"].shape[0],
        )
    except ValueError as exc:
        raise CheckpointShapeError(str(exc)) from exc
