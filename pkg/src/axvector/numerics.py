"""Dense float64 kernels and their hand-written backward passes.

Every forward here is a pure function of its arguments; the matching
``*_backward`` consumes the forward's inputs (plus cheap recomputed
intermediates) and returns exact gradients of the documented contract.
Shape arithmetic is validated before any compute so failures surface as
descriptive ``ValueError``s instead of numpy broadcasting accidents.
All kernels run in 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor applied to second-moment variances before the square root.  Keeps the
# standard deviation (and its gradient) defined when the variance collapses;
# the gradient is zero while the floor is active.
VARIANCE_FLOOR = 1e-10

# Tolerance on sum(weights) == 1 for weighted statistics.
WEIGHT_SUM_TOL = 1e-9


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def require_all_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# dilated 1-D convolution over time (valid, no padding)
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Filter bank for a dilated 1-D convolution along the time axis.

    weights: (kernel, in_channels, out_channels); bias: (out_channels,).
    """

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        self.weights = as_f64(self.weights)
        self.bias = as_f64(self.bias)
        require(self.weights.ndim == 3,
                f"conv weights must have shape (kernel, in, out), got {self.weights.shape}")
        require(self.bias.ndim == 1 and self.bias.shape[0] == self.weights.shape[2],
                f"conv bias length {self.bias.shape} must equal out channels {self.weights.shape[2]}")
        require(self.kernel_width >= 1, "kernel width must be >= 1")
        require(int(self.dilation) >= 1, "dilation must be >= 1")
        self.dilation = int(self.dilation)

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


def output_frames(frames: int, kernel: int, dilation: int) -> int:
    """Frame count after a valid convolution: T - (kernel-1)*dilation."""
    return frames - (kernel - 1) * dilation


def sliding_windows(x: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    """Gather the (t_out, kernel, channels) input windows of a valid conv."""
    t_out = output_frames(x.shape[0], kernel, dilation)
    require(t_out >= 1,
            f"input with {x.shape[0]} frames is too short for kernel {kernel} "
            f"with dilation {dilation} (needs more than {(kernel - 1) * dilation} frames)")
    win = np.empty((t_out, kernel, x.shape[1]), dtype=np.float64)
    for k in range(kernel):
        win[:, k, :] = x[k * dilation:k * dilation + t_out]
    return win


def _check_conv_input(x, params: ConvParams) -> np.ndarray:
    x = as_f64(x)
    require(x.ndim == 2, f"conv input must be (frames, channels), got shape {x.shape}")
    require(x.shape[1] == params.in_channels,
            f"conv input has {x.shape[1]} channels, filters expect {params.in_channels}")
    return x


def conv1d(x, params: ConvParams) -> np.ndarray:
    """Valid (unpadded) convolution along time.

    out[t, o] = sum_k sum_i x[t + k*dilation, i] * weights[k, i, o] + bias[o]
    """
    x = _check_conv_input(x, params)
    win = sliding_windows(x, params.kernel_width, params.dilation)
    t_out = win.shape[0]
    flat = win.reshape(t_out, -1) @ params.weights.reshape(-1, params.out_channels)
    return flat + params.bias


def conv1d_backward(x, params: ConvParams, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv1d: (d_input, d_weights, d_bias)."""
    x = _check_conv_input(x, params)
    kernel, dilation = params.kernel_width, params.dilation
    t_out = output_frames(x.shape[0], kernel, dilation)
    upstream = as_f64(upstream)
    require(upstream.shape == (t_out, params.out_channels),
            f"upstream shape {upstream.shape} does not match conv output "
            f"({t_out}, {params.out_channels})")
    win = sliding_windows(x, kernel, dilation)
    d_bias = upstream.sum(axis=0)
    d_weights = (win.reshape(t_out, -1).T @ upstream).reshape(params.weights.shape)
    d_input = np.zeros_like(x)
    for k in range(kernel):
        d_input[k * dilation:k * dilation + t_out] += upstream @ params.weights[k].T
    return d_input, d_weights, d_bias


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(v) -> np.ndarray:
    """Probabilities exp(v_i) / sum_j exp(v_j), computed with max subtraction."""
    v = as_f64(v)
    require(v.ndim == 1 and v.size >= 1, "softmax input must be a nonempty vector")
    require_all_finite(v, "softmax input")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_backward(probs: np.ndarray, upstream) -> np.ndarray:
    """Gradient through softmax given its output probabilities."""
    upstream = as_f64(upstream)
    inner = probs @ upstream
    return probs * (upstream - inner)


# ---------------------------------------------------------------------------
# weighted first/second-order statistics over frames
# ---------------------------------------------------------------------------


def _check_weights(values: np.ndarray, weights) -> np.ndarray:
    weights = as_f64(weights)
    require(weights.ndim == 1 and weights.shape[0] == values.shape[0],
            f"weights must be one per frame; got {weights.shape} for {values.shape[0]} frames")
    require(bool(np.all(weights >= 0.0)), "weights must be nonnegative")
    require(abs(float(weights.sum()) - 1.0) <= WEIGHT_SUM_TOL,
            f"weights must sum to 1 (got {float(weights.sum())!r})")
    return weights


def weighted_stats(values, weights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted per-channel mean and standard deviation over frames.

    mean = sum_t w_t v_t
    std  = sqrt(max(sum_t w_t v_t*v_t - mean*mean, VARIANCE_FLOOR))

    Weights must be nonnegative and sum to one.
    """
    values = as_f64(values)
    require(values.ndim == 2 and values.shape[0] >= 1,
            f"values must be (frames, channels) with frames >= 1, got {values.shape}")
    weights = _check_weights(values, weights)
    mean = weights @ values
    second = weights @ (values * values)
    variance = np.maximum(second - mean * mean, VARIANCE_FLOOR)
    return mean, np.sqrt(variance)


def weighted_stats_backward(values, weights, d_mean, d_std) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of weighted_stats w.r.t. values and weights.

    The variance floor contributes zero gradient while active.
    """
    values = as_f64(values)
    weights = _check_weights(values, weights)
    d_mean = as_f64(d_mean)
    d_std = as_f64(d_std)
    mean = weights @ values
    second = weights @ (values * values)
    raw_var = second - mean * mean
    std = np.sqrt(np.maximum(raw_var, VARIANCE_FLOOR))
    d_var = np.where(raw_var > VARIANCE_FLOOR, d_std / (2.0 * std), 0.0)
    d_mean_eff = d_mean - 2.0 * mean * d_var
    d_values = weights[:, None] * (d_mean_eff + 2.0 * values * d_var)
    d_weights = values @ d_mean_eff + (values * values) @ d_var
    return d_values, d_weights


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x) -> np.ndarray:
    return np.maximum(as_f64(x), 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return upstream * (x > 0.0)


def tanh_backward(tanh_out: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through np.tanh given its cached output."""
    return upstream * (1.0 - tanh_out * tanh_out)
