"""Feature bank operators: stacked modified non-local blocks, pooling, and STO.

Short-term features ``S`` (queries) attend to a window of long-term features
``L``. Shapes carry optional leading batch axes: ``S`` is ``(..., N_q, d_in)``,
``L`` is ``(..., N, d_in)`` and its mask ``(..., N)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .tensor import Parameter, RngStream, Tensor

EMBEDDED_GAUSSIAN = "embedded_gaussian"
DOT_PRODUCT = "dot_product"
CONCAT = "concat"
VARIANTS = (EMBEDDED_GAUSSIAN, DOT_PRODUCT, CONCAT)


@dataclass
class FboConfig:
    variant: str = EMBEDDED_GAUSSIAN
    layers: int = 2
    activation_order: str = "pre"
    use_scale: bool = True
    use_ln: bool = True
    dropout_rate: float = 0.2
    d_f: int = 512
    share_reduction: bool = False
    # Compatibility switch: let zero-padded rows take part in attention.
    unmasked_zero_pad: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown NL variant {self.variant!r}")
        if self.layers not in (1, 2, 3):
            raise ValueError(f"layers must be 1, 2 or 3, got {self.layers}")
        if self.activation_order not in ("pre", "post"):
            raise ValueError(f"activation_order must be 'pre' or 'post', got {self.activation_order!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class StoConfig:
    num_distractors: int = 8

    def __post_init__(self):
        if self.num_distractors < 0:
            raise ValueError("num_distractors must be >= 0")


def _weight(rng: RngStream, fan_in: int, fan_out: int, name: str, gain: float = 1.0) -> Parameter:
    return Parameter(rng.normal((fan_in, fan_out), gain / math.sqrt(fan_in)), name=name)


def _bias(n: int, name: str) -> Parameter:
    return Parameter(np.zeros(n), name=name, decay=False)


@dataclass
class NlBlockParams:
    theta_w: Parameter
    theta_b: Parameter
    phi_w: Parameter
    phi_b: Parameter
    g_w: Parameter
    g_b: Parameter
    out_w: Parameter
    out_b: Parameter
    ln_gamma: Parameter
    ln_beta: Parameter
    concat_w: Parameter | None = None

    @classmethod
    def init(cls, d_f: int, rng: RngStream, prefix: str = "nl", variant: str = EMBEDDED_GAUSSIAN,
             out_gain: float = 1.0) -> "NlBlockParams":
        p = prefix
        concat_w = None
        if variant == CONCAT:
            concat_w = Parameter(rng.normal((2 * d_f, 1), 1.0 / math.sqrt(2 * d_f)), name=f"{p}.concat_w")
        return cls(
            theta_w=_weight(rng, d_f, d_f, f"{p}.theta_w"),
            theta_b=_bias(d_f, f"{p}.theta_b"),
            phi_w=_weight(rng, d_f, d_f, f"{p}.phi_w"),
            phi_b=_bias(d_f, f"{p}.phi_b"),
            g_w=_weight(rng, d_f, d_f, f"{p}.g_w"),
            g_b=_bias(d_f, f"{p}.g_b"),
            out_w=_weight(rng, d_f, d_f, f"{p}.out_w", out_gain),
            out_b=_bias(d_f, f"{p}.out_b"),
            ln_gamma=Parameter(np.ones(d_f), name=f"{p}.ln_gamma", decay=False),
            ln_beta=Parameter(np.zeros(d_f), name=f"{p}.ln_beta", decay=False),
            concat_w=concat_w,
        )

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None]


@dataclass
class ReductionParams:
    """Input projections ``d_in -> d_f`` for queries (short) and keys/values (long)."""

    short_w: Parameter
    short_b: Parameter
    long_w: Parameter
    long_b: Parameter

    @classmethod
    def init(cls, d_in: int, d_f: int, rng: RngStream, shared: bool = False) -> "ReductionParams":
        short_w = _weight(rng, d_in, d_f, "reduce.short_w")
        short_b = _bias(d_f, "reduce.short_b")
        if shared:
            return cls(short_w, short_b, short_w, short_b)
        return cls(short_w, short_b, _weight(rng, d_in, d_f, "reduce.long_w"), _bias(d_f, "reduce.long_b"))

    def parameters(self) -> list[Parameter]:
        out = []
        for p in (self.short_w, self.short_b, self.long_w, self.long_b):
            if all(p is not q for q in out):
                out.append(p)
        return out


def init_stack(config: FboConfig, rng: RngStream) -> list[NlBlockParams]:
    return [
        NlBlockParams.init(config.d_f, rng, prefix=f"nl{i}", variant=config.variant)
        for i in range(config.layers)
    ]


def _key_mask(mask: np.ndarray | None, kv: Tensor, config: FboConfig) -> np.ndarray:
    if mask is None or config.unmasked_zero_pad:
        return np.ones(kv.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != kv.shape[:-1]:
        raise tn.ShapeError(f"mask {mask.shape} does not match key rows {kv.shape[:-1]}")
    return mask


def reduce_inputs(S, L, mask, reduction: ReductionParams, config: FboConfig,
                  rng: RngStream | None = None, training: bool = False):
    """Project queries and window rows to ``d_f`` and apply input dropout.

    Returns ``(Q, K, mask)``; the mask is passed through unchanged.
    """
    S, L = tn.as_tensor(S), tn.as_tensor(L)
    if S.shape[-1] != reduction.short_w.shape[0] or L.shape[-1] != reduction.long_w.shape[0]:
        raise tn.ShapeError(f"reduce_inputs: S {S.shape} / L {L.shape} do not match projections")
    q = tn.linear(S, reduction.short_w, reduction.short_b)
    k = tn.linear(L, reduction.long_w, reduction.long_b)
    q, _ = tn.dropout(q, config.dropout_rate, rng, training)
    k, _ = tn.dropout(k, config.dropout_rate, rng, training)
    return q, k, mask


def attention_weights(Q: Tensor, KV: Tensor, key_mask: np.ndarray, params: NlBlockParams,
                      config: FboConfig) -> Tensor:
    """Pairwise weights ``(..., N_q, N)``; masked keys get weight 0."""
    theta = tn.linear(Q, params.theta_w, params.theta_b)
    phi = tn.linear(KV, params.phi_w, params.phi_b)
    pair_mask = key_mask[..., None, :]
    if config.variant == CONCAT:
        d_f = config.d_f
        # w . [theta_i ; phi_j] splits into a query term plus a key term.
        left = tn.matmul(theta, tn.row_slice(params.concat_w, 0, d_f))
        right = tn.transpose(tn.matmul(phi, tn.row_slice(params.concat_w, d_f, 2 * d_f)))
        scores = tn.relu(tn.add(left, right))
        n_valid = np.maximum(key_mask.sum(axis=-1), 1)[..., None, None]
        return tn.mul(scores, pair_mask / n_valid)
    affinity = tn.matmul(theta, tn.transpose(phi))
    if config.use_scale:
        affinity = tn.scale(affinity, 1.0 / math.sqrt(config.d_f))
    if config.variant == DOT_PRODUCT:
        n_valid = np.maximum(key_mask.sum(axis=-1), 1)[..., None, None]
        return tn.mul(affinity, pair_mask / n_valid)
    return tn.softmax_rows(affinity, pair_mask)


def nl_block(Q, KV, mask, params: NlBlockParams, config: FboConfig,
             rng: RngStream | None = None, training: bool = False) -> Tensor:
    """One modified non-local block: queries ``Q`` attend to ``KV``.

    A sample whose keys are all masked passes ``Q`` through unchanged.
    """
    Q, KV = tn.as_tensor(Q), tn.as_tensor(KV)
    key_mask = _key_mask(mask, KV, config)
    has_keys = key_mask.any(axis=-1)
    all_have_keys = bool(np.all(has_keys))
    if not all_have_keys:
        if not np.any(has_keys):
            return Q
        key_mask = key_mask | ~has_keys[..., None]

    weights = attention_weights(Q, KV, key_mask, params, config)
    g = tn.linear(KV, params.g_w, params.g_b)
    h = tn.matmul(weights, g)
    if config.activation_order == "pre":
        if config.use_ln:
            h = tn.layer_norm(h, params.ln_gamma, params.ln_beta)
        h = tn.linear(tn.relu(h), params.out_w, params.out_b)
        h, _ = tn.dropout(h, config.dropout_rate, rng, training)
        out = tn.add(Q, h)
    else:
        h = tn.linear(h, params.out_w, params.out_b)
        if config.use_ln:
            h = tn.layer_norm(h, params.ln_gamma, params.ln_beta)
        h, _ = tn.dropout(h, config.dropout_rate, rng, training)
        out = tn.relu(tn.add(Q, h))

    if not all_have_keys:
        out = tn.where(has_keys[..., None, None], out, Q)
    return out


def fbo_nl(S, L, mask, reduction: ReductionParams, stack: list[NlBlockParams], config: FboConfig,
           rng: RngStream | None = None, training: bool = False) -> Tensor:
    """Reduce inputs, then apply the block stack; each layer attends to the same keys."""
    if not 1 <= len(stack) <= 3:
        raise ValueError(f"the NL stack must have 1 to 3 blocks, got {len(stack)}")
    q, k, mask = reduce_inputs(S, L, mask, reduction, config, rng, training)
    for params in stack:
        q = nl_block(q, k, mask, params, config, rng, training)
    return q


def fbo_pool(rows: np.ndarray, mask: np.ndarray | None, kind: str) -> np.ndarray:
    """Masked average or max over window rows: ``(..., N, d) -> (..., 1, d)``.

    A window with no valid row pools to the zero vector.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if mask is None:
        mask = np.ones(rows.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)[..., None]
    count = mask.sum(axis=-2, keepdims=True)
    if kind == "avg":
        out = np.where(mask, rows, 0.0).sum(axis=-2, keepdims=True) / np.maximum(count, 1)
    elif kind == "max":
        out = np.where(mask, rows, -np.inf).max(axis=-2, keepdims=True, initial=-np.inf)
        out = np.where(count > 0, out, 0.0)
    else:
        raise ValueError(f"pool kind must be 'avg' or 'max', got {kind!r}")
    return out


def sample_distractors(reservoir: np.ndarray, count: int, batch_shape: tuple[int, ...],
                       rng: RngStream) -> np.ndarray:
    """Draw rows uniformly with replacement: ``batch_shape + (count, d)``."""
    if reservoir.shape[0] == 0:
        raise ValueError("distractor reservoir is empty")
    idx = rng.integers(0, reservoir.shape[0], size=batch_shape + (count,))
    return np.asarray(reservoir, dtype=np.float64)[idx]


def sto(S, reduction: ReductionParams, stack: list[NlBlockParams], config: FboConfig,
        sto_config: StoConfig, rng: RngStream | None = None, training: bool = False, *,
        context=None, context_mask=None, reservoir: np.ndarray | None = None,
        encode=None) -> Tensor:
    """Short-term operator: the NL stack over the clip's own features.

    Keys default to ``S`` itself; for segment-level tasks ``context`` holds the
    per-time-step clip features instead. In training, ``num_distractors`` rows
    sampled from ``reservoir`` (passed through ``encode`` if given) join the keys.
    """
    S = tn.as_tensor(S)
    if context is None:
        context, context_mask = S, None
    context = tn.as_tensor(context)
    if context_mask is None:
        context_mask = np.ones(context.shape[:-1], dtype=bool)
    if training and sto_config.num_distractors > 0:
        if reservoir is None or rng is None:
            raise ValueError("distractor training needs a reservoir and an RngStream")
        extra = sample_distractors(reservoir, sto_config.num_distractors, context.shape[:-2],
                                   rng.child("distractors"))
        extra = encode(extra) if encode is not None else Tensor(extra)
        context = tn.concat([context, extra], axis=-2)
        context_mask = np.concatenate(
            [context_mask, np.ones(extra.shape[:-1], dtype=bool)], axis=-1
        )
    return fbo_nl(S, context, context_mask, reduction, stack, config, rng, training)


def assemble_head_input(S, fbo_out) -> Tensor:
    """Channel-wise ``[S, fbo_out]``; a single pooled row is broadcast to every query."""
    S, fbo_out = tn.as_tensor(S), tn.as_tensor(fbo_out)
    if fbo_out.shape[:-1] != S.shape[:-1]:
        if fbo_out.shape[-2] != 1 or fbo_out.shape[:-2] != S.shape[:-2]:
            raise tn.ShapeError(f"head input: fbo output {fbo_out.shape} does not match S {S.shape}")
        if fbo_out.requires_grad:
            fbo_out = tn.add(fbo_out, np.zeros(S.shape[:-1] + (1,)))
        else:
            fbo_out = Tensor(np.broadcast_to(fbo_out.value, S.shape[:-1] + fbo_out.shape[-1:]))
    return tn.concat([S, fbo_out], axis=-1)
