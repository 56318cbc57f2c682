"""Layer primitives with explicit forward/backward rules.

Tensors are plain ``numpy.ndarray`` objects in float64, images laid out
NHWC (batch, height, width, channels). Every forward function returns
``(output, cache)``; the matching backward consumes ``(dout, cache)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


@dataclass(frozen=True)
class ConvSpec:
    filter_count: int
    filter_size: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.filter_count < 1 or self.filter_size < 1 or self.stride < 1:
            raise ValueError("filter_count, filter_size and stride must be positive")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.padding == "same" and self.filter_size % 2 == 0:
            raise ValueError("same padding requires an odd filter_size")

    def pad(self) -> int:
        return self.filter_size // 2 if self.padding == "same" else 0


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps_bn: float = 1e-5

    def __post_init__(self):
        c = np.shape(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if np.shape(getattr(self, name)) != c:
                raise ShapeError(f"BatchNorm {name} has shape {np.shape(getattr(self, name))}, gamma has {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps_bn < 0:
            raise ValueError("eps_bn must be non-negative")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps_bn: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            momentum=momentum,
            eps_bn=eps_bn,
        )


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_hw(h: int, w: int, spec: ConvSpec) -> tuple[int, int]:
    p = spec.pad()
    oh = (h + 2 * p - spec.filter_size) // spec.stride + 1
    ow = (w + 2 * p - spec.filter_size) // spec.stride + 1
    return oh, ow


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, OH, OW, C, k, k) view, no copy
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    return win


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Rows are output positions, columns ordered (kh, kw, C) to match kernels."""
    win = _windows(xp, k, stride)
    n, oh, ow, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, k * k * c)


def conv2d(x: np.ndarray, kernels: np.ndarray, spec: ConvSpec):
    """Bias-free 2-D cross-correlation. ``kernels`` is (k, k, C_in, C_out)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    k = spec.filter_size
    if kernels.ndim != 4 or kernels.shape[:2] != (k, k) or kernels.shape[3] != spec.filter_count:
        raise ShapeError(
            f"kernel shape {kernels.shape} inconsistent with spec "
            f"(size {k}, filters {spec.filter_count})"
        )
    if kernels.shape[2] != x.shape[3]:
        raise ShapeError(
            f"input has {x.shape[3]} channels but kernels expect {kernels.shape[2]}"
        )
    p = spec.pad()
    if x.shape[1] + 2 * p < k or x.shape[2] + 2 * p < k:
        raise ShapeError(f"input spatial extent {x.shape[1:3]} smaller than kernel {k}")
    n = x.shape[0]
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], spec)
    f = spec.filter_count
    if k == 1 and spec.stride == 1:
        cols = x.reshape(-1, x.shape[3])
    else:
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = _im2col(xp, k, spec.stride)
    out = (cols @ kernels.reshape(-1, f)).reshape(n, oh, ow, f)
    return out, (cols, kernels, spec, x.shape)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Returns ``(dx, dkernels)``; ``dx`` is None when ``need_dx`` is False."""
    cols, kernels, spec, x_shape = cache
    k, s, p = spec.filter_size, spec.stride, spec.pad()
    n, oh, ow, f = dout.shape
    c = kernels.shape[2]
    d2 = dout.reshape(-1, f)
    dk = (cols.T @ d2).reshape(kernels.shape)
    if not need_dx:
        return None, dk
    if k == 1 and s == 1:
        return (d2 @ kernels[0, 0].T).reshape(x_shape), dk
    if s == 1:
        # full correlation of the output gradient with the flipped kernel
        q = k - 1 - p
        dp = np.pad(dout, ((0, 0), (q, q), (q, q), (0, 0)))
        flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
        dx = (_im2col(dp, k, 1) @ flipped).reshape(x_shape)
        return dx, dk
    dcols = (d2 @ kernels.reshape(-1, f).T).reshape(n, oh, ow, k, k, c)
    hp, wp = x_shape[1] + 2 * p, x_shape[2] + 2 * p
    dxp = np.zeros((n, hp, wp, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p:p + x_shape[1], p:p + x_shape[2], :], dk


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batchnorm(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Per-channel normalization over every axis but the last.

    In ``train`` mode the running statistics of ``state`` are updated in place.
    """
    c = x.shape[-1]
    if state.gamma.shape != (c,):
        raise ShapeError(f"BatchNorm state has {state.gamma.shape[0]} channels, input has {c}")
    x2 = x.reshape(-1, c)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mu = x2.mean(axis=0)
        centered = x2 - mu
        var = np.einsum("ij,ij->j", centered, centered) / x2.shape[0]
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mu
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    elif mode == "infer":
        centered = x2 - state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps_bn)
    xhat = centered * inv_std
    out = xhat * state.gamma + state.beta
    return out.reshape(x.shape), (xhat, inv_std, state.gamma, mode)


def batchnorm_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    d2 = dout.reshape(xhat.shape)
    dgamma = np.einsum("ij,ij->j", d2, xhat)
    dbeta = d2.sum(axis=0)
    if mode == "infer":
        return dout * (gamma * inv_std), dgamma, dbeta
    m = d2.shape[0]
    dx = (gamma * inv_std / m) * (m * d2 - dbeta - xhat * dgamma)
    return dx.reshape(dout.shape), dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise / structural ops
# --------------------------------------------------------------------------

def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask):
    return dout * mask


def sigmoid(x: np.ndarray):
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return out, out


def sigmoid_backward(dout: np.ndarray, out):
    return dout * out * (1.0 - out)


def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2):
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extent {(h, w)}")
    win = _windows(x, window, stride)  # (N, OH, OW, C, k, k)
    flat = win.reshape(*win.shape[:4], window * window)
    # argmax returns the first maximum in row-major window order
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, window, stride)


def maxpool2d_backward(dout: np.ndarray, cache):
    idx, x_shape, k, s = cache
    n, oh, ow, c = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    di, dj = np.divmod(idx, k)
    for i in range(k):
        for j in range(k):
            hit = (di == i) & (dj == j)
            dx[:, i:i + s * oh:s, j:j + s * ow:s, :] += np.where(hit, dout, 0.0)
    return dx


def concat_channels(inputs: Sequence[np.ndarray]):
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape[:-1]
    for t in inputs[1:]:
        if t.shape[:-1] != ref:
            raise ShapeError(f"cannot concat {t.shape} with leading extents {ref}")
    sizes = [t.shape[-1] for t in inputs]
    return np.concatenate(inputs, axis=-1), sizes


def concat_channels_backward(dout: np.ndarray, sizes):
    bounds = np.cumsum(sizes)[:-1]
    return np.split(dout, bounds, axis=-1)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Affine map on flattened features; ``weights`` is (in, out)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense input has {flat.shape[1]} features, weights expect {weights.shape[0]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    return flat @ weights + bias, (flat, weights, x.shape)


def dense_backward(dout: np.ndarray, cache):
    flat, weights, x_shape = cache
    dx = (dout @ weights.T).reshape(x_shape)
    return dx, flat.T @ dout, dout.sum(axis=0)


def dropout(x: np.ndarray, rate: float, mode: str = "train", rng_seed: int = 0):
    """Inverted dropout; identity in ``infer`` mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x.copy(), None
    keep = np.random.default_rng(rng_seed).random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask):
    return dout if mask is None else dout * mask


def global_avg_pool(x: np.ndarray):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout: np.ndarray, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()


def channel_gate(x: np.ndarray, gates: np.ndarray):
    """Scale NHWC feature maps by per-sample, per-channel gates (N, C)."""
    return x * gates[:, None, None, :], (x, gates)


def channel_gate_backward(dout: np.ndarray, cache):
    x, gates = cache
    return dout * gates[:, None, None, :], (dout * x).sum(axis=(1, 2))


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_index: tuple | None
    n_checked: int
    n_skipped: int = 0
    errors: list = field(default_factory=list)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))


def finite_difference_check(
    f: Callable[[], float],
    params: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-6,
    indices: Sequence[tuple] | None = None,
    smooth: Callable[[], object] | None = None,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``f`` w.r.t. ``params``.

    ``params`` is perturbed in place and restored. ``smooth``, when given,
    returns a fingerprint of the piecewise branch taken by ``f`` (relu masks,
    pooling argmaxes, loss branches); coordinates whose perturbation changes
    that fingerprint straddle a kink and are skipped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if indices is None:
        indices = list(np.ndindex(params.shape))
    worst, worst_idx, skipped, errs = 0.0, None, 0, []
    for idx in indices:
        orig = params[idx]
        params[idx] = orig + epsilon
        fp = f()
        sig_p = smooth() if smooth else None
        params[idx] = orig - epsilon
        fm = f()
        sig_m = smooth() if smooth else None
        params[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        if smooth is not None and sig_p != sig_m:
            skipped += 1
            continue
        numeric = (fp - fm) / (2.0 * epsilon)
        err = relative_error(float(analytic[idx]), numeric)
        errs.append(err)
        if worst_idx is None or err > worst:
            worst, worst_idx = err, idx
    return GradCheckReport(worst, worst_idx, len(errs), skipped, errs)
