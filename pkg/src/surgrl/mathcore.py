"""Dense/convolutional numerics with hand-derived gradients.

All arrays are float64 numpy tensors in row-major order.  Backward passes
are written out analytically for the fixed layer zoo (dense, 3x3 stride-2
convolution); their correctness is enforced by `finite_diff_check` rather
than by an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# dense layer
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[b, o] = sum_i x[b, i] * w[i, o] + b[o]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _require(x.ndim == 2, f"dense_forward: input must be 2-D, got shape {x.shape}")
    _require(w.ndim == 2, f"dense_forward: weights must be 2-D, got shape {w.shape}")
    _require(b.ndim == 1, f"dense_forward: bias must be 1-D, got shape {b.shape}")
    _require(x.shape[1] == w.shape[0],
             f"dense_forward: input width {x.shape[1]} != weight rows {w.shape[0]}")
    _require(w.shape[1] == b.shape[0],
             f"dense_forward: weight cols {w.shape[1]} != bias length {b.shape[0]}")
    return require_finite("dense_forward output", x @ w + b)


def dense_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Analytic gradients of dense_forward: (grad_input, grad_weights, grad_bias)."""
    grad_out, x, w = as_tensor(grad_out), as_tensor(x), as_tensor(w)
    _require(grad_out.ndim == 2 and grad_out.shape == (x.shape[0], w.shape[1]),
             f"dense_backward: grad shape {grad_out.shape} does not match "
             f"batch {x.shape[0]} x outputs {w.shape[1]}")
    _require(x.shape[1] == w.shape[0],
             f"dense_backward: input width {x.shape[1]} != weight rows {w.shape[0]}")
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# 3x3 stride-2 convolution (zero padding 1)
# ---------------------------------------------------------------------------

_KSIZE = 3
_PAD = 1

_EINSUM_PATHS: dict = {}


def _einsum(subscripts: str, *operands) -> np.ndarray:
    """einsum with the contraction path cached per (subscripts, shapes)."""
    key = (subscripts,) + tuple(op.shape for op in operands)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(subscripts, *operands, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(subscripts, *operands, optimize=path)


def conv2d_out_size(size: int, stride: int) -> int:
    return (size + 2 * _PAD - _KSIZE) // stride + 1


def _conv_patch_view(xp: np.ndarray, h_out: int, w_out: int,
                     stride: int) -> np.ndarray:
    # view[b, c, kh, kw, i, j] = xp[b, c, i*stride + kh, j*stride + kw]
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], _KSIZE, _KSIZE, h_out, w_out),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False)


def _check_conv_shapes(x, kernels, bias):
    _require(x.ndim == 4, f"conv2d: input must be B x C x H x W, got shape {x.shape}")
    _require(kernels.ndim == 4 and kernels.shape[2:] == (_KSIZE, _KSIZE),
             f"conv2d: kernels must be F x C x 3 x 3, got shape {kernels.shape}")
    _require(x.shape[1] == kernels.shape[1],
             f"conv2d: input channels {x.shape[1]} != kernel channels {kernels.shape[1]}")
    _require(x.shape[2] >= _KSIZE and x.shape[3] >= _KSIZE,
             f"conv2d: spatial size {x.shape[2:]} must be at least 3x3")
    if bias is not None:
        _require(bias.shape == (kernels.shape[0],),
                 f"conv2d: bias shape {bias.shape} != ({kernels.shape[0]},)")


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   stride: int = 2) -> np.ndarray:
    """Cross-correlation with 3x3 kernels, zero padding 1.  No activation."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    _check_conv_shapes(x, kernels, bias)
    h_out = conv2d_out_size(x.shape[2], stride)
    w_out = conv2d_out_size(x.shape[3], stride)
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    patches = _conv_patch_view(xp, h_out, w_out, stride)
    out = _einsum("bcuvij,fcuv->bfij", patches, kernels)
    out += bias[None, :, None, None]
    return require_finite("conv2d_forward output", out)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                    stride: int = 2, need_grad_input: bool = True):
    """Analytic gradients of conv2d_forward: (grad_input, grad_kernels, grad_bias).

    `need_grad_input=False` skips the input gradient (returns None in its
    place); used for the first layer, whose input is the observation.
    """
    grad_out, x, kernels = as_tensor(grad_out), as_tensor(x), as_tensor(kernels)
    _check_conv_shapes(x, kernels, None)
    h_out = conv2d_out_size(x.shape[2], stride)
    w_out = conv2d_out_size(x.shape[3], stride)
    _require(grad_out.shape == (x.shape[0], kernels.shape[0], h_out, w_out),
             f"conv2d_backward: grad shape {grad_out.shape} != "
             f"{(x.shape[0], kernels.shape[0], h_out, w_out)}")
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    patches = _conv_patch_view(xp, h_out, w_out, stride)

    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_k = _einsum("bfij,bcuvij->fcuv", grad_out, patches)
    if not need_grad_input:
        return None, grad_k, grad_b
    grad_xp = np.zeros_like(xp)
    for kh in range(_KSIZE):
        for kw in range(_KSIZE):
            grad_xp[:, :,
                    kh:kh + stride * (h_out - 1) + 1:stride,
                    kw:kw + stride * (w_out - 1) + 1:stride] += _einsum(
                        "bfij,fc->bcij", grad_out, kernels[:, :, kh, kw])
    grad_x = grad_xp[:, :, _PAD:-_PAD, _PAD:-_PAD]
    return grad_x, grad_k, grad_b


# ---------------------------------------------------------------------------
# parameter store and Adam
# ---------------------------------------------------------------------------

@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameters with gradients and Adam moments, in insertion order."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already registered")
        value = as_tensor(value).copy()
        self._entries[name] = ParamEntry(
            value=value,
            grad=np.zeros_like(value),
            m=np.zeros_like(value),
            v=np.zeros_like(value),
        )
        return value

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def add_grad(self, name: str, grad: np.ndarray):
        entry = self._entries[name]
        _require(grad.shape == entry.value.shape,
                 f"gradient shape {grad.shape} != parameter {name!r} shape "
                 f"{entry.value.shape}")
        entry.grad += grad

    def zero_grads(self):
        for entry in self._entries.values():
            entry.grad.fill(0.0)

    def n_params(self) -> int:
        return sum(e.value.size for e in self._entries.values())


@dataclass
class AdamConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def adam_step(store: ParamStore, cfg: AdamConfig):
    """One Adam update with bias correction, in insertion order; zeros gradients."""
    for name, entry in store.items():
        if not np.isfinite(entry.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; "
                                 "update aborted")
    for name, entry in store.items():
        g = entry.grad
        entry.step += 1
        entry.m *= cfg.beta1
        entry.m += (1.0 - cfg.beta1) * g
        entry.v *= cfg.beta2
        entry.v += (1.0 - cfg.beta2) * np.square(g)
        m_hat = entry.m / (1.0 - cfg.beta1 ** entry.step)
        v_hat = entry.v / (1.0 - cfg.beta2 ** entry.step)
        entry.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon_hat)
        require_finite(f"parameter {name!r} after adam_step", entry.value)
        entry.grad.fill(0.0)


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    checked: int
    tolerance: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.1e}) over {self.checked} sampled "
                f"parameters; worst at {self.worst_param}[{self.worst_index}]")


def finite_diff_check(loss_fn, store: ParamStore, h: float = 1e-5,
                      tolerance: float = 1e-4, samples: int = 120,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare store gradients against central differences of `loss_fn`.

    `store` must already hold the analytic gradient of `loss_fn` at the
    current parameter values.  A random subset of `samples` scalar
    parameters is perturbed by +-h; parameters are restored afterwards.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    flat_index = []
    for name, entry in store.items():
        flat_index.extend((name, i) for i in range(entry.value.size))
    if not flat_index:
        raise ValueError("parameter store is empty")
    n_check = min(samples, len(flat_index))
    chosen = rng.choice(len(flat_index), size=n_check, replace=False)

    max_rel, worst_name, worst_idx = 0.0, "", -1
    failures = []
    for pick in chosen:
        name, idx = flat_index[int(pick)]
        value = store[name].value.reshape(-1)
        analytic = float(store[name].grad.reshape(-1)[idx])
        original = value[idx]
        value[idx] = original + h
        loss_plus = float(loss_fn())
        value[idx] = original - h
        loss_minus = float(loss_fn())
        value[idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        if rel > max_rel:
            max_rel, worst_name, worst_idx = rel, name, idx
        if rel > tolerance:
            failures.append((name, idx, analytic, numeric, rel))
    return GradCheckReport(max_rel_error=max_rel, worst_param=worst_name,
                           worst_index=worst_idx, checked=n_check,
                           tolerance=tolerance, failures=failures)
