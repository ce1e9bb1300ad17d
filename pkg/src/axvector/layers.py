"""Network building blocks: batch normalization (fixed and input-conditioned
affine), statistics pooling, and the input-conditioned convolution whose
filters are mixed per utterance from a trainable pool.

Forward functions return ``(output, cache)`` pairs; each cache carries exactly
the intermediates its ``*_backward`` companion needs.  Parameter gradients
come back as dicts keyed by the parameter field names, so callers can
accumulate them into whatever container they use.  Parameter containers are
treated as immutable during a forward/backward pair; only the normalization
running statistics mutate, and only in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConvParams,
    as_f64,
    conv1d,
    conv1d_backward,
    require,
    softmax,
    softmax_backward,
    weighted_stats,
    weighted_stats_backward,
)

MODES = ("train", "infer")


def _check_mode(mode: str) -> None:
    require(mode in MODES, f"mode must be one of {MODES}, got {mode!r}")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BnState:
    """Normalization state: running statistics plus an optional fixed affine.

    ``gamma``/``beta`` are None when the affine is supplied externally (the
    input-conditioned normalization generates them per utterance instead).
    Running statistics are updated only in train mode; inference before any
    update raises unless the statistics were explicitly initialized.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    initialized: bool = False

    def __post_init__(self):
        self.running_mean = as_f64(self.running_mean)
        self.running_var = as_f64(self.running_var)
        require(0.0 < self.momentum < 1.0, "momentum must lie in (0, 1)")
        require(self.eps > 0.0, "epsilon must be positive")
        require(bool(np.all(self.running_var >= 0.0)), "running variance must be nonnegative")

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               affine: bool = True) -> "BnState":
        state = cls(running_mean=np.zeros(channels), running_var=np.zeros(channels),
                    momentum=momentum, eps=eps)
        if affine:
            state.gamma = np.ones(channels)
            state.beta = np.zeros(channels)
        return state

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def _normalize_core(x, state: BnState, mode: str):
    """Shared standardization: (x - mean) / sqrt(var + eps).

    Train mode uses batch statistics per channel over all leading axes and
    updates the running statistics by exponential moving average; infer mode
    uses the running statistics.
    """
    _check_mode(mode)
    x = as_f64(x)
    require(x.ndim in (2, 3), f"normalization input must be 2-D or 3-D, got shape {x.shape}")
    require(x.shape[-1] == state.channels,
            f"input has {x.shape[-1]} channels, state tracks {state.channels}")
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))
    require(count >= 1, "normalization batch must be nonempty")
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
        state.initialized = True
    else:
        if not state.initialized:
            raise RuntimeError("inference-mode normalization before any training update; "
                               "initialize the running statistics first")
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean) * inv_std
    cache = {"xhat": xhat, "inv_std": inv_std, "mode": mode, "count": count, "axes": axes}
    return xhat, cache


def _normalize_core_backward(cache, d_xhat: np.ndarray) -> np.ndarray:
    xhat, inv_std, axes = cache["xhat"], cache["inv_std"], cache["axes"]
    if cache["mode"] == "infer":
        return d_xhat * inv_std
    n = float(cache["count"])
    sum_d = d_xhat.sum(axis=axes)
    sum_dx = (d_xhat * xhat).sum(axis=axes)
    return (inv_std / n) * (n * d_xhat - sum_d - xhat * sum_dx)


def batch_norm(x, state: BnState, mode: str):
    """Per-channel batch normalization with the state's fixed affine."""
    require(state.gamma is not None and state.beta is not None,
            "batch_norm needs a state with gamma and beta")
    xhat, core = _normalize_core(x, state, mode)
    y = xhat * state.gamma + state.beta
    return y, {"core": core, "gamma": state.gamma}


def batch_norm_backward(cache, upstream):
    """Gradients of batch_norm: (d_input, d_gamma, d_beta)."""
    core = cache["core"]
    upstream = as_f64(upstream)
    axes = core["axes"]
    d_gamma = (upstream * core["xhat"]).sum(axis=axes)
    d_beta = upstream.sum(axis=axes)
    d_input = _normalize_core_backward(core, upstream * cache["gamma"])
    return d_input, d_gamma, d_beta


# ---------------------------------------------------------------------------
# statistics pooling
# ---------------------------------------------------------------------------


def stats_pooling(frames):
    """Concatenated per-channel mean and standard deviation over frames.

    Identical to weighted_stats with uniform weights; order is [mean, std].
    """
    frames = as_f64(frames)
    require(frames.ndim == 2 and frames.shape[0] >= 1,
            f"pooling input must be (frames, channels) with frames >= 1, got {frames.shape}")
    weights = np.full(frames.shape[0], 1.0 / frames.shape[0])
    mean, std = weighted_stats(frames, weights)
    cache = {"frames": frames, "weights": weights, "channels": frames.shape[1]}
    return np.concatenate([mean, std]), cache


def stats_pooling_backward(cache, upstream):
    c = cache["channels"]
    upstream = as_f64(upstream)
    d_values, _ = weighted_stats_backward(cache["frames"], cache["weights"],
                                          upstream[:c], upstream[c:])
    return d_values


# ---------------------------------------------------------------------------
# input-conditioned convolution (filters mixed from a pool)
# ---------------------------------------------------------------------------


@dataclass
class AcnnParams:
    """Parameters of the input-conditioned convolution block.

    The attentive context is built from two pointwise maps of the input
    frames: ``value_*`` feeds the pooled statistics, ``score_*`` plus
    ``score_proj`` produce the per-frame attention logits.  ``mix_*`` turns
    the pooled context (mean and std concatenated, length 2*hidden) into
    unconstrained mixing coefficients over the filter pool.
    """

    value_weight: np.ndarray   # (in, hidden)
    value_bias: np.ndarray     # (hidden,)
    score_weight: np.ndarray   # (in, hidden)
    score_bias: np.ndarray     # (hidden,)
    score_proj: np.ndarray     # (hidden,)
    mix_weight: np.ndarray     # (2*hidden, pool)
    mix_bias: np.ndarray       # (pool,)
    pool_weight: np.ndarray    # (pool, kernel, in, out)
    pool_bias: np.ndarray      # (pool, out)
    dilation: int = 1

    def __post_init__(self):
        for name in ("value_weight", "value_bias", "score_weight", "score_bias",
                     "score_proj", "mix_weight", "mix_bias", "pool_weight", "pool_bias"):
            setattr(self, name, as_f64(getattr(self, name)))
        hidden = self.value_weight.shape[1]
        in_dim = self.value_weight.shape[0]
        require(self.score_weight.shape == (in_dim, hidden), "score map shape mismatch")
        require(self.value_bias.shape == (hidden,) and self.score_bias.shape == (hidden,),
                "attention bias shape mismatch")
        require(self.score_proj.shape == (hidden,), "score projector shape mismatch")
        require(self.pool_weight.ndim == 4 and self.pool_weight.shape[0] >= 1,
                "filter pool must be (pool, kernel, in, out) with pool >= 1")
        require(self.pool_weight.shape[2] == in_dim,
                f"filter pool expects {self.pool_weight.shape[2]} input channels, "
                f"attention maps expect {in_dim}")
        pool, out = self.pool_weight.shape[0], self.pool_weight.shape[3]
        require(self.pool_bias.shape == (pool, out), "pool bias shape mismatch")
        require(self.mix_weight.shape == (2 * hidden, pool) and self.mix_bias.shape == (pool,),
                "mixing regression shape mismatch")
        require(int(self.dilation) >= 1, "dilation must be >= 1")
        self.dilation = int(self.dilation)

    @property
    def hidden(self) -> int:
        return self.value_weight.shape[1]

    @property
    def pool_size(self) -> int:
        return self.pool_weight.shape[0]


def acnn_context(frames, params: AcnnParams):
    """Attentive mean+std context vector over the input frames.

    values_t = frames_t @ value_weight + value_bias
    logit_t  = score_proj . tanh(frames_t @ score_weight + score_bias)
    attn     = softmax(logits);  context = [mean, std] of values under attn.
    """
    frames = as_f64(frames)
    require(frames.ndim == 2 and frames.shape[0] >= 1,
            f"context input must be (frames, channels), got {frames.shape}")
    values = frames @ params.value_weight + params.value_bias
    scored = np.tanh(frames @ params.score_weight + params.score_bias)
    attn = softmax(scored @ params.score_proj)
    mean, std = weighted_stats(values, attn)
    cache = {"frames": frames, "values": values, "scored": scored, "attn": attn,
             "params": params}
    return np.concatenate([mean, std]), cache


def acnn_context_backward(cache, d_context):
    """Gradients of acnn_context: (d_frames, grads dict)."""
    p: AcnnParams = cache["params"]
    frames, values, scored, attn = (cache["frames"], cache["values"],
                                    cache["scored"], cache["attn"])
    h = p.hidden
    d_context = as_f64(d_context)
    d_values, d_attn = weighted_stats_backward(values, attn, d_context[:h], d_context[h:])
    d_logits = softmax_backward(attn, d_attn)
    d_scored = np.outer(d_logits, p.score_proj)
    d_pre = d_scored * (1.0 - scored * scored)
    grads = {
        "value_weight": frames.T @ d_values,
        "value_bias": d_values.sum(axis=0),
        "score_weight": frames.T @ d_pre,
        "score_bias": d_pre.sum(axis=0),
        "score_proj": scored.T @ d_logits,
    }
    d_frames = d_values @ p.value_weight.T + d_pre @ p.score_weight.T
    return d_frames, grads


def acnn_filters(context, params: AcnnParams, mix_override=None):
    """Mix the filter pool into one filter bank.

    coeffs = context @ mix_weight + mix_bias (no normalization); the output
    weights and bias are the coefficient-weighted sums of the pool entries.
    ``mix_override`` bypasses the regression with fixed coefficients.
    """
    if mix_override is not None:
        coeffs = as_f64(mix_override)
        require(coeffs.shape == (params.pool_size,),
                f"mix override must have {params.pool_size} coefficients")
        context = None
    else:
        context = as_f64(context)
        require(context.shape == (2 * params.hidden,),
                f"context must have length {2 * params.hidden}, got {context.shape}")
        coeffs = context @ params.mix_weight + params.mix_bias
    weights = np.tensordot(coeffs, params.pool_weight, axes=1)
    bias = coeffs @ params.pool_bias
    cache = {"context": context, "coeffs": coeffs, "params": params,
             "overridden": mix_override is not None}
    return (weights, bias), cache


def acnn_filters_backward(cache, d_weights, d_bias):
    """Gradients of acnn_filters: (d_context, grads dict)."""
    p: AcnnParams = cache["params"]
    coeffs = cache["coeffs"]
    d_weights = as_f64(d_weights)
    d_bias = as_f64(d_bias)
    d_coeffs = (np.tensordot(p.pool_weight, d_weights, axes=([1, 2, 3], [0, 1, 2]))
                + p.pool_bias @ d_bias)
    grads = {
        "pool_weight": coeffs[:, None, None, None] * d_weights[None],
        "pool_bias": np.outer(coeffs, d_bias),
    }
    if cache["overridden"]:
        d_context = None
    else:
        grads["mix_weight"] = np.outer(cache["context"], d_coeffs)
        grads["mix_bias"] = d_coeffs
        d_context = p.mix_weight @ d_coeffs
    return d_context, grads


def acnn_forward(frames, params: AcnnParams, mix_override=None):
    """One utterance through the adaptive convolution: context, filter
    mixing, then a conventional valid convolution with the mixed filters."""
    if mix_override is None:
        context, ctx_cache = acnn_context(frames, params)
    else:
        context, ctx_cache = None, None
    (weights, bias), mix_cache = acnn_filters(context, params, mix_override)
    conv = ConvParams(weights, bias, params.dilation)
    out = conv1d(frames, conv)
    cache = {"frames": as_f64(frames), "conv": conv,
             "ctx_cache": ctx_cache, "mix_cache": mix_cache}
    return out, cache


def acnn_backward(cache, upstream):
    """Gradients of acnn_forward: (d_frames, grads dict over AcnnParams)."""
    frames = cache["frames"]
    d_frames, d_weights, d_bias = conv1d_backward(frames, cache["conv"], upstream)
    d_context, grads = acnn_filters_backward(cache["mix_cache"], d_weights, d_bias)
    if cache["ctx_cache"] is not None:
        d_frames_ctx, ctx_grads = acnn_context_backward(cache["ctx_cache"], d_context)
        d_frames = d_frames + d_frames_ctx
        grads.update(ctx_grads)
    return d_frames, grads


def acnn_layer(frames, params: AcnnParams, activation=None, mix_override=None):
    """Contract-level composition: context -> filters -> conv (-> activation)."""
    out, _ = acnn_forward(frames, params, mix_override)
    return activation(out) if activation is not None else out


# ---------------------------------------------------------------------------
# input-conditioned batch normalization
# ---------------------------------------------------------------------------


@dataclass
class AbnParams:
    """Parameters of the input-conditioned normalization affine.

    ``ctx_*`` maps frames to a tanh feature space whose attention-weighted
    sum is the utterance context; ``scale_*`` and ``shift_*`` regress the
    per-utterance normalization affine from that context.
    """

    ctx_weight: np.ndarray     # (channels, hidden)
    ctx_bias: np.ndarray       # (hidden,)
    scale_weight: np.ndarray   # (hidden, channels)
    scale_bias: np.ndarray     # (channels,)
    shift_weight: np.ndarray   # (hidden, channels)
    shift_bias: np.ndarray     # (channels,)

    def __post_init__(self):
        for name in ("ctx_weight", "ctx_bias", "scale_weight", "scale_bias",
                     "shift_weight", "shift_bias"):
            setattr(self, name, as_f64(getattr(self, name)))
        channels, hidden = self.ctx_weight.shape
        require(self.ctx_bias.shape == (hidden,), "context bias shape mismatch")
        for name in ("scale_weight", "shift_weight"):
            require(getattr(self, name).shape == (hidden, channels),
                    f"{name} must map hidden -> channels")
        for name in ("scale_bias", "shift_bias"):
            require(getattr(self, name).shape == (channels,),
                    f"{name} must have one entry per channel")

    @property
    def hidden(self) -> int:
        return self.ctx_weight.shape[1]

    @property
    def channels(self) -> int:
        return self.ctx_weight.shape[0]


def abn_context(frames, params: AbnParams):
    """Frame-attention context: tanh features weighted by a softmax over the
    per-frame feature means."""
    frames = as_f64(frames)
    require(frames.ndim == 2 and frames.shape[0] >= 1,
            f"context input must be (frames, channels), got {frames.shape}")
    feats = np.tanh(frames @ params.ctx_weight + params.ctx_bias)
    attn = softmax(feats.mean(axis=1))
    context = attn @ feats
    cache = {"frames": frames, "feats": feats, "attn": attn, "params": params}
    return context, cache


def abn_context_backward(cache, d_context):
    """Gradients of abn_context: (d_frames, grads dict)."""
    p: AbnParams = cache["params"]
    frames, feats, attn = cache["frames"], cache["feats"], cache["attn"]
    d_context = as_f64(d_context)
    d_feats = np.outer(attn, d_context)
    d_attn = feats @ d_context
    d_means = softmax_backward(attn, d_attn)
    d_feats += d_means[:, None] / feats.shape[1]
    d_pre = d_feats * (1.0 - feats * feats)
    grads = {
        "ctx_weight": frames.T @ d_pre,
        "ctx_bias": d_pre.sum(axis=0),
    }
    return d_pre @ p.ctx_weight.T, grads


def abn_apply(x, state: BnState, contexts, params: AbnParams, mode: str):
    """Batch-normalize with a per-utterance generated affine.

    Statistics are the standard batch-norm statistics (batch stats in train
    mode, running stats at inference); only the affine is generated, one
    (scale, shift) pair per utterance from its context vector.
    """
    x = as_f64(x)
    require(x.ndim == 3, f"adaptive normalization expects (batch, frames, channels), got {x.shape}")
    contexts = as_f64(contexts)
    require(contexts.ndim == 2 and contexts.shape[0] == x.shape[0],
            f"need one context per utterance: got {contexts.shape[0] if contexts.ndim == 2 else contexts.shape} "
            f"contexts for batch of {x.shape[0]}")
    require(contexts.shape[1] == params.hidden, "context width does not match the generator maps")
    xhat, core = _normalize_core(x, state, mode)
    scales = contexts @ params.scale_weight + params.scale_bias
    shifts = contexts @ params.shift_weight + params.shift_bias
    y = xhat * scales[:, None, :] + shifts[:, None, :]
    cache = {"core": core, "contexts": contexts, "scales": scales, "params": params}
    return y, cache


def abn_apply_backward(cache, upstream):
    """Gradients of abn_apply: (d_input, d_contexts, grads dict)."""
    p: AbnParams = cache["params"]
    core, contexts, scales = cache["core"], cache["contexts"], cache["scales"]
    upstream = as_f64(upstream)
    d_scales = (upstream * core["xhat"]).sum(axis=1)
    d_shifts = upstream.sum(axis=1)
    grads = {
        "scale_weight": contexts.T @ d_scales,
        "scale_bias": d_scales.sum(axis=0),
        "shift_weight": contexts.T @ d_shifts,
        "shift_bias": d_shifts.sum(axis=0),
    }
    d_contexts = d_scales @ p.scale_weight.T + d_shifts @ p.shift_weight.T
    d_input = _normalize_core_backward(core, upstream * scales[:, None, :])
    return d_input, d_contexts, grads


def abn_layer(x, state: BnState, params: AbnParams, mode: str):
    """Full adaptive normalization layer: per-utterance contexts computed from
    the layer input itself, then the generated-affine normalization."""
    x = as_f64(x)
    require(x.ndim == 3, f"adaptive normalization expects a 3-D batch, got shape {x.shape}")
    ctx_caches = []
    contexts = np.empty((x.shape[0], params.hidden))
    for b in range(x.shape[0]):
        contexts[b], c = abn_context(x[b], params)
        ctx_caches.append(c)
    y, apply_cache = abn_apply(x, state, contexts, params, mode)
    return y, {"apply": apply_cache, "ctx_caches": ctx_caches}


def abn_layer_backward(cache, upstream):
    """Gradients of abn_layer: (d_input, grads dict over AbnParams)."""
    d_input, d_contexts, grads = abn_apply_backward(cache["apply"], upstream)
    for b, ctx_cache in enumerate(cache["ctx_caches"]):
        d_frames, ctx_grads = abn_context_backward(ctx_cache, d_contexts[b])
        d_input[b] += d_frames
        for key, val in ctx_grads.items():
            grads[key] = grads.get(key, 0.0) + val
    return d_input, grads
