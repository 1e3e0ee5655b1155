"""Finite-difference verification of every differentiable operation.

Each case builds fresh leaves from a seed and a closure computing a scalar
loss from their current values. The analytic gradient comes from the tape;
the numeric one from central differences on each leaf in turn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fbo as F
from . import tensor as tn
from .model import Batch, LfbModel
from .tensor import Parameter, RngStream, Tensor
from .training import bce_multilabel_loss, ce_loss

TOLERANCE = 1e-4
STEP = 1e-5

LossFn = Callable[[], Tensor]
Builder = Callable[[RngStream], tuple[list[Tensor], LossFn]]


def _leaf(rng: RngStream, shape, name: str, away_from_zero: bool = False) -> Tensor:
    value = rng.normal(shape)
    if away_from_zero:
        # Keep relu / kink inputs at least 0.05 from the hinge.
        value = np.where(np.abs(value) < 0.05, np.sign(value + 1e-12) * 0.05, value)
    return Tensor(value, requires_grad=True, name=name)


def _project(out: Tensor, rng: RngStream) -> Tensor:
    """Contract with a fixed random tensor so every output entry matters."""
    weights = rng.normal(out.shape)
    return tn.sum_all(tn.mul(out, weights))


def _jitter(params: list[Parameter], rng: RngStream, scale: float = 0.3) -> None:
    """Move parameters off their init values (zero biases put relu on its hinge)."""
    for p in params:
        p.value = p.value + rng.normal(p.shape, scale)


def check(leaves: list[Tensor], loss_fn: LossFn, h: float = STEP) -> float:
    """Worst relative error over all leaves."""
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.value) if isinstance(leaf, Parameter) else None
    with tn.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.value) if leaf.grad is None else np.array(leaf.grad)
        original = leaf.value

        def f(x, leaf=leaf):
            leaf.value = x
            return float(loss_fn().value)

        numeric = tn.finite_diff_grad(f, original, h)
        leaf.value = original
        worst = max(worst, tn.grad_rel_error(analytic, numeric))
    return worst


# ------------------------------------------------------------------ cases

def _unary(op) -> Builder:
    def build(rng):
        x = _leaf(rng, (3, 4), "x", away_from_zero=True)
        proj = _fixed(rng, "proj")
        return [x], lambda: _project(op(x), proj())
    return build


def _binary(op, shape_a, shape_b) -> Builder:
    def build(rng):
        a, b = _leaf(rng, shape_a, "a"), _leaf(rng, shape_b, "b")
        proj = _fixed(rng, "proj")
        return [a, b], lambda: _project(op(a, b), proj())
    return build


def _fixed(rng: RngStream, purpose: str) -> Callable[[], RngStream]:
    child = rng.child(purpose)
    return lambda: RngStream(child.seed, child.purpose)


def _softmax(rng):
    x = _leaf(rng, (4, 6), "x")
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    proj = _fixed(rng, "proj")
    return [x], lambda: _project(tn.softmax_rows(x, mask), proj())


def _layer_norm(rng):
    x = _leaf(rng, (5, 8), "x")
    gamma = Parameter(1.0 + 0.1 * rng.normal(8), "gamma")
    beta = Parameter(rng.normal(8), "beta")
    proj = _fixed(rng, "proj")
    return [x, gamma, beta], lambda: _project(tn.layer_norm(x, gamma, beta), proj())


def _linear(rng):
    x = _leaf(rng, (2, 4, 3), "x")
    w = Parameter(rng.normal((3, 2)), "w")
    b = Parameter(rng.normal(2), "b")
    proj = _fixed(rng, "proj")
    return [x, w, b], lambda: _project(tn.linear(x, w, b), proj())


def _dropout(rng):
    x = _leaf(rng, (4, 5), "x")
    drop, proj = _fixed(rng, "dropout"), _fixed(rng, "proj")
    return [x], lambda: _project(tn.dropout(x, 0.3, drop(), True)[0], proj())


def _concat(rng):
    a, b = _leaf(rng, (2, 3), "a"), _leaf(rng, (2, 2), "b")
    proj = _fixed(rng, "proj")
    return [a, b], lambda: _project(tn.concat([a, b], axis=-1), proj())


def _where(rng):
    a, b = _leaf(rng, (3, 4), "a"), _leaf(rng, (1, 4), "b")
    cond = rng.random((3, 4)) > 0.5
    proj = _fixed(rng, "proj")
    return [a, b], lambda: _project(tn.where(cond, a, b), proj())


def _bce(rng):
    x = _leaf(rng, (4, 3), "logits")
    y = (rng.random((4, 3)) > 0.5).astype(float)
    return [x], lambda: bce_multilabel_loss(x, y)


def _ce(rng):
    x = _leaf(rng, (5, 4), "logits")
    y = rng.integers(0, 4, size=5)
    return [x], lambda: ce_loss(x, y)


def _window_mask(rng, batch: int, n: int, empty_sample: bool) -> np.ndarray:
    mask = rng.random((batch, n)) > 0.3
    mask[:, 0] = True
    if empty_sample:
        mask[-1] = False
    return mask


def _nl_block(variant: str, order: str) -> Builder:
    def build(rng):
        d_f = 4
        cfg = F.FboConfig(variant=variant, activation_order=order, d_f=d_f, layers=1)
        params = F.NlBlockParams.init(d_f, rng.child("init"), variant=variant)
        _jitter(params.parameters(), rng.child("jitter"))
        q = _leaf(rng, (3, 2, d_f), "q")
        kv = _leaf(rng, (3, 5, d_f), "kv")
        mask = _window_mask(rng, 3, 5, empty_sample=True)
        drop, proj = _fixed(rng, "dropout"), _fixed(rng, "proj")
        leaves = [q, kv] + params.parameters()
        return leaves, lambda: _project(F.nl_block(q, kv, mask, params, cfg, drop(), True), proj())
    return build


def _reduce(rng):
    cfg = F.FboConfig(d_f=3)
    red = F.ReductionParams.init(5, 3, rng.child("init"))
    _jitter(red.parameters(), rng.child("jitter"))
    s, l = _leaf(rng, (2, 1, 5), "s"), _leaf(rng, (2, 4, 5), "l")
    drop, proj = _fixed(rng, "dropout"), _fixed(rng, "proj")

    def loss():
        q, k, _ = F.reduce_inputs(s, l, None, red, cfg, drop(), True)
        return tn.add(_project(q, proj()), _project(k, proj().child("k")))

    return [s, l] + red.parameters(), loss


def _fbo_nl_default(rng):
    cfg = F.FboConfig(d_f=4)  # 2 layers, embedded Gaussian, pre-activation
    init = rng.child("init")
    red = F.ReductionParams.init(6, 4, init)
    stack = F.init_stack(cfg, init)
    _jitter(red.parameters() + [p for b in stack for p in b.parameters()], rng.child("jitter"))
    s, l = _leaf(rng, (2, 2, 6), "s"), _leaf(rng, (2, 5, 6), "l")
    mask = _window_mask(rng, 2, 5, empty_sample=False)
    drop, proj = _fixed(rng, "dropout"), _fixed(rng, "proj")
    leaves = [s, l] + red.parameters() + [p for b in stack for p in b.parameters()]
    return leaves, lambda: _project(F.fbo_nl(s, l, mask, red, stack, cfg, drop(), True), proj())


def _model(kind: str) -> Builder:
    def build(rng):
        d_in, classes, batch = 4, 3, 2
        reservoir = rng.normal((10, d_in))
        model = LfbModel(kind, d_in, classes, F.FboConfig(d_f=3), F.StoConfig(2),
                         seed=int(rng.integers(0, 2**31)), reservoir=reservoir)
        _jitter(list(model.parameters().values()), rng.child("jitter"))
        queries = rng.normal((batch, 1, d_in))
        bank = rng.normal((batch, 5, d_in))
        bank_mask = _window_mask(rng, batch, 5, empty_sample=False)
        clip = rng.normal((batch, 2, d_in))
        labels = rng.integers(0, classes, size=batch)
        b = Batch(queries, bank, bank_mask, clip, np.ones((batch, 2), bool), labels)
        drop = _fixed(rng, "dropout")
        return list(model.parameters().values()), lambda: ce_loss(model.logits(b, drop(), True), labels)
    return build


CASES: dict[str, Builder] = {
    "matmul": _binary(tn.matmul, (2, 3, 4), (4, 2)),
    "transpose": _unary(tn.transpose),
    "reshape": _unary(lambda x: tn.reshape(x, (2, 6))),
    "row_slice": _unary(lambda x: tn.row_slice(x, 1, 3)),
    "add": _binary(tn.add, (3, 4), (4,)),
    "mul": _binary(tn.mul, (3, 4), (3, 1)),
    "scale": _unary(lambda x: tn.scale(x, 1.0 / np.sqrt(512))),
    "linear": _linear,
    "relu": _unary(tn.relu),
    "dropout": _dropout,
    "softmax_rows": _softmax,
    "layer_norm": _layer_norm,
    "concat": _concat,
    "where": _where,
    "sum_all": _unary(tn.sum_all),
    "bce_multilabel_loss": _bce,
    "ce_loss": _ce,
    **{f"nl_block[{v},{o}]": _nl_block(v, o) for v in F.VARIANTS for o in ("pre", "post")},
    "reduce_inputs": _reduce,
    "fbo_nl[2L default]": _fbo_nl_default,
    **{f"model_loss[{k}]": _model(k) for k in ("nl", "avg", "sto")},
}


@dataclass
class CaseResult:
    name: str
    seeds: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


@dataclass
class Report:
    results: list[CaseResult]
    seconds: float

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        width = max(len(r.name) for r in self.results)
        lines = [f"{'case':<{width}}  seeds  max_rel_err  status"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{r.name:<{width}}  {r.seeds:>5}  {r.max_error:11.3e}  {status}")
        lines.append(f"{sum(r.passed for r in self.results)}/{len(self.results)} cases passed "
                     f"in {self.seconds:.1f} s (tolerance {TOLERANCE:g}, h={STEP:g})")
        return "\n".join(lines)


def run(seeds: int = 20, base_seed: int = 0, cases: dict[str, Builder] | None = None) -> Report:
    start = time.perf_counter()
    results = []
    for name, build in (cases or CASES).items():
        t0 = time.perf_counter()
        worst = 0.0
        for s in range(seeds):
            leaves, loss_fn = build(RngStream(base_seed + s, f"gradcheck/{name}"))
            worst = max(worst, check(leaves, loss_fn))
        results.append(CaseResult(name, seeds, worst, time.perf_counter() - t0))
    return Report(results, time.perf_counter() - start)
