"""Short-term encoder + feature bank operator + linear classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fbo as F
from . import tensor as tn
from .tensor import Parameter, RngStream, Tensor

KINDS = ("none", "nl", "avg", "max", "sto")


@dataclass
class Batch:
    """One minibatch; every sample has a single query row.

    ``queries`` is ``B x 1 x d``; ``bank_rows``/``clip_rows`` are padded
    ``B x N x d`` with boolean masks ``B x N``.
    """

    queries: np.ndarray
    bank_rows: np.ndarray
    bank_mask: np.ndarray
    clip_rows: np.ndarray
    clip_mask: np.ndarray
    labels: np.ndarray


class LfbModel:
    """Classifier over ``[S, FBO(S, L~)]``.

    ``kind`` picks the operator: ``none`` (short-term features only), ``nl``
    (NL stack over the bank window), ``avg``/``max`` (pooled window), or
    ``sto`` (NL stack over the clip's own features).
    """

    def __init__(self, kind: str, d_in: int, num_classes: int, fbo_config: F.FboConfig,
                 sto_config: F.StoConfig | None = None, seed: int = 0,
                 reservoir: np.ndarray | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown FBO kind {kind!r}; choose from {KINDS}")
        self.kind = kind
        self.d_in = d_in
        self.num_classes = num_classes
        self.fbo_config = fbo_config
        self.sto_config = sto_config or F.StoConfig()
        self.reservoir = reservoir
        rng = RngStream(seed, "init")

        self.encoder_w = Parameter(rng.normal((d_in, d_in), 1.0 / math.sqrt(d_in)), "encoder.w")
        self.encoder_b = Parameter(np.zeros(d_in), "encoder.b", decay=False)
        self.reduction = None
        self.stack: list[F.NlBlockParams] = []
        extra = 0
        if kind in ("nl", "sto"):
            self.reduction = F.ReductionParams.init(d_in, fbo_config.d_f, rng, fbo_config.share_reduction)
            self.stack = F.init_stack(fbo_config, rng)
            extra = fbo_config.d_f
        elif kind in ("avg", "max"):
            extra = d_in
        self.head_width = d_in + extra
        self.head_w = Parameter(rng.normal((self.head_width, num_classes), 0.01), "head.w")
        self.head_b = Parameter(np.zeros(num_classes), "head.b", decay=False)

    def parameters(self) -> dict[str, Parameter]:
        params = [self.encoder_w, self.encoder_b]
        if self.reduction is not None:
            params += self.reduction.parameters()
        for block in self.stack:
            params += block.parameters()
        params += [self.head_w, self.head_b]
        return {p.name: p for p in params}

    def feature_parameters(self) -> list[Parameter]:
        """Parameters producing short-term features (frozen in the second stage)."""
        return [self.encoder_w, self.encoder_b]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        for name, value in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            if params[name].shape != value.shape:
                raise tn.ShapeError(f"{name}: checkpoint {value.shape} vs model {params[name].shape}")
            params[name].value = np.array(value, dtype=params[name].value.dtype)
        if strict:
            missing = set(params) - set(state)
            if missing:
                raise KeyError(f"checkpoint lacks {sorted(missing)}")

    def encode(self, x) -> Tensor:
        return tn.linear(x, self.encoder_w, self.encoder_b)

    def logits(self, batch: Batch, rng: RngStream | None = None, training: bool = False) -> Tensor:
        S = self.encode(batch.queries)
        cfg = self.fbo_config
        if self.kind == "none":
            head_in = S
        elif self.kind == "nl":
            out = F.fbo_nl(S, batch.bank_rows, batch.bank_mask, self.reduction, self.stack, cfg, rng, training)
            head_in = F.assemble_head_input(S, out)
        elif self.kind in ("avg", "max"):
            pooled = F.fbo_pool(batch.bank_rows, batch.bank_mask, self.kind)
            head_in = F.assemble_head_input(S, pooled)
        else:
            context = self.encode(batch.clip_rows)
            out = F.sto(S, self.reduction, self.stack, cfg, self.sto_config, rng, training,
                        context=context, context_mask=batch.clip_mask,
                        reservoir=self.reservoir, encode=self.encode)
            head_in = F.assemble_head_input(S, out)
        flat = tn.reshape(head_in, (head_in.shape[0], self.head_width))
        return tn.linear(flat, self.head_w, self.head_b)

    def predict(self, batch: Batch) -> np.ndarray:
        """Softmax class probabilities, eval mode."""
        z = self.logits(batch).value
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
