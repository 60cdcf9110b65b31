"""Network programs: DAGs of layers over (possibly sliced) shared parameters.

A :class:`Network` is a flat list of steps in topological order.  Each step
sums its input slots, applies one layer, and writes an output slot.  Shared
supernet parameters enter through :class:`ParamRef`, which can select a
sub-tensor (channel subsets, grouped-conv subparts); gradients scatter back
into the owning tensor through a recorded ``slice`` node, so parameter
sharing is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import layers as L
from .tensor import (NumericError, ShapeError, Tape, Tensor, backward,
                     check_finite, global_norm)


@dataclass
class ParamRef:
    """Reference to (a slice of) a stored parameter tensor.

    ``index`` is ``None`` for whole-tensor bindings.  Fancy index arrays
    must contain unique entries (channel picks never repeat), which makes
    the backward scatter a plain assignment.
    """

    tensor: Tensor
    index: Optional[tuple] = None

    def materialize(self) -> np.ndarray:
        if self.index is None:
            return self.tensor.data
        return self.tensor.data[self.index]

    def scatter(self, g: np.ndarray) -> np.ndarray:
        """Embed a slice gradient into a zero array of the full shape."""
        if self.index is None:
            return g
        full = np.zeros_like(self.tensor.data)
        full[self.index] = g
        return full


@dataclass
class Step:
    layer: L.LayerSpec
    params: dict[str, ParamRef] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: tuple[int, ...] = (0,)
    out: int = 0
    tag: str = ""


@dataclass
class Network:
    """A program plus bookkeeping about its expected input."""

    steps: list[Step]
    num_slots: int
    out_slot: int
    input_shape: tuple = ()

    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for s in self.steps:
            for ref in s.params.values():
                seen.setdefault(id(ref.tensor), ref.tensor)
        return list(seen.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out, seen = [], set()
        for s in self.steps:
            for name, ref in s.params.items():
                if id(ref.tensor) not in seen:
                    seen.add(id(ref.tensor))
                    out.append((f"{s.tag}.{name}" if s.tag else name, ref.tensor))
        return out

    def relu_count(self) -> int:
        return sum(1 for s in self.steps if s.layer.kind == "relu")


def _param_tensor(tape: Tape, ref: ParamRef, train_abs: bool = False) -> Tensor:
    """Materialize a ParamRef onto the tape as a slice node."""
    data = ref.materialize()
    out = Tensor(data, name=ref.tensor.name)
    tape.record("slice", (ref.tensor,), out,
                lambda g, ref=ref: (ref.scatter(g),))
    return out


def forward(net: Network, x: Tensor, mode: str = "train",
            rng: Optional[np.random.Generator] = None,
            labels: Optional[np.ndarray] = None,
            linearize: bool = False) -> tuple[Tensor, Tape]:
    """Run the program, recording a tape.

    ``mode`` selects batch-statistics vs running-buffer batchnorm and
    enables dropout.  ``linearize`` turns relu/batchnorm/dropout into
    identities (used by data-free scoring).  ``labels`` feed any terminal
    ``softmax_xent`` layer.  Raises :class:`ShapeError` naming the step
    index on a wiring mistake.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    tape = Tape()
    slots: list[Optional[Tensor]] = [None] * net.num_slots
    slots[0] = x
    if net.input_shape and tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"input shape {tuple(x.shape[1:])} does not match "
                         f"expected {tuple(net.input_shape)}", layer_index=0)

    for i, step in enumerate(net.steps):
        try:
            ins = [slots[j] for j in step.inputs]
            if any(t is None for t in ins):
                raise ShapeError("step reads an unwritten slot")
            if len(ins) > 1:
                shapes = {t.shape for t in ins}
                if len(shapes) != 1:
                    raise ShapeError(f"sum inputs disagree on shape: {sorted(shapes)}")
                acc = ins[0].data.copy()
                for t in ins[1:]:
                    acc += t.data
                summed = Tensor(acc)
                tape.record("sum", tuple(ins), summed,
                            lambda g, k=len(ins): tuple(g for _ in range(k)))
                cur = summed
            else:
                cur = ins[0]
            cur = _apply_layer(tape, step, cur, train, rng, labels, linearize, i)
            slots[step.out] = cur
        except ShapeError as e:
            if e.layer_index is None:
                raise ShapeError(str(e), layer_index=i) from e
            raise
    out = slots[net.out_slot]
    if out is None:
        raise ShapeError("program never wrote the output slot")
    return out, tape


def _apply_layer(tape: Tape, step: Step, x: Tensor, train: bool,
                 rng: Optional[np.random.Generator],
                 labels: Optional[np.ndarray], linearize: bool,
                 idx: int) -> Tensor:
    spec = step.layer
    kind = spec.kind
    if linearize and kind in ("relu", "batchnorm", "dropout"):
        kind = "identity"
    if kind == "identity":
        return x
    if kind == "conv2d":
        wt = _param_tensor(tape, step.params["weight"])
        out_arr, ctx = L.conv2d_fwd(x.data, wt.data, spec.stride, spec.padding,
                                    spec.groups)
        out = Tensor(out_arr)

        def bwd(g, wt=wt, ctx=ctx):
            dx, dw = L.conv2d_bwd(g, wt.data, ctx)
            return dx, dw
        return tape.record("conv2d", (x, wt), out, bwd)
    if kind == "linear":
        wt = _param_tensor(tape, step.params["weight"])
        bt = _param_tensor(tape, step.params["bias"]) if "bias" in step.params else None
        out_arr, ctx = L.linear_fwd(x.data, wt.data,
                                    None if bt is None else bt.data)
        out = Tensor(out_arr)
        if bt is None:
            def bwd(g, wt=wt, ctx=ctx):
                dx, dw, _ = L.linear_bwd(g, wt.data, False, ctx)
                return dx, dw
            return tape.record("linear", (x, wt), out, bwd)

        def bwd(g, wt=wt, ctx=ctx):
            dx, dw, db = L.linear_bwd(g, wt.data, True, ctx)
            return dx, dw, db
        return tape.record("linear", (x, wt, bt), out, bwd)
    if kind == "batchnorm":
        gamma = beta = None
        if spec.affine:
            gamma = _param_tensor(tape, step.params["gamma"])
            beta = _param_tensor(tape, step.params["beta"])
        out_arr, ctx = L.batchnorm_fwd(
            x.data, None if gamma is None else gamma.data,
            None if beta is None else beta.data,
            step.buffers["running_mean"], step.buffers["running_var"],
            spec.eps, spec.momentum, train)
        out = Tensor(out_arr)
        if gamma is None:
            def bwd(g, ctx=ctx):
                dx, _, _ = L.batchnorm_bwd(g, None, ctx)
                return (dx,)
            return tape.record("batchnorm", (x,), out, bwd)

        def bwd(g, gamma=gamma, ctx=ctx):
            dx, dg, db = L.batchnorm_bwd(g, gamma.data, ctx)
            return dx, dg, db
        return tape.record("batchnorm", (x, gamma, beta), out, bwd)
    if kind == "relu":
        out_arr, ctx = L.relu_fwd(x.data)
        out = Tensor(out_arr)
        return tape.record("relu", (x,), out, lambda g, ctx=ctx: (L.relu_bwd(g, ctx),))
    if kind == "avgpool":
        out_arr, ctx = L.avgpool_fwd(x.data, spec.kernel, spec.stride, spec.padding)
        out = Tensor(out_arr)
        return tape.record("avgpool", (x,), out,
                           lambda g, ctx=ctx: (L.avgpool_bwd(g, ctx),))
    if kind == "maxpool":
        out_arr, ctx = L.maxpool_fwd(x.data, spec.kernel, spec.stride, spec.padding)
        out = Tensor(out_arr)
        return tape.record("maxpool", (x,), out,
                           lambda g, ctx=ctx: (L.maxpool_bwd(g, ctx),))
    if kind == "global_avgpool":
        out_arr, ctx = L.global_avgpool_fwd(x.data)
        out = Tensor(out_arr)
        return tape.record("global_avgpool", (x,), out,
                           lambda g, ctx=ctx: (L.global_avgpool_bwd(g, ctx),))
    if kind == "dropout":
        out_arr, mask = L.dropout_fwd(x.data, spec.p, rng, train)
        if mask is None:
            return x
        out = Tensor(out_arr)
        return tape.record("dropout", (x,), out,
                           lambda g, mask=mask: (L.dropout_bwd(g, mask),))
    if kind == "softmax_xent":
        if labels is None:
            raise ShapeError("softmax_xent layer needs labels")
        out_arr, ctx = L.softmax_xent_fwd(x.data, labels)
        out = Tensor(out_arr)
        return tape.record("softmax_xent", (x,), out,
                           lambda g, ctx=ctx: (L.softmax_xent_bwd(g, ctx),))
    raise ValueError(f"unhandled layer kind {kind!r}")


def cross_entropy(tape: Tape, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Record mean cross entropy on an existing tape."""
    out_arr, ctx = L.softmax_xent_fwd(logits.data, labels)
    out = Tensor(out_arr)
    return tape.record("softmax_xent", (logits,), out,
                       lambda g, ctx=ctx: (L.softmax_xent_bwd(g, ctx),))


def sum_output(tape: Tape, t: Tensor) -> Tensor:
    """Record the full-tensor sum (float64 accumulation) as a scalar."""
    out = Tensor(np.array(t.data.sum(dtype=np.float64), dtype=t.dtype))
    return tape.record("sum_all", (t,), out,
                       lambda g, shape=t.shape, dt=t.dtype:
                       (np.broadcast_to(np.asarray(g, dtype=dt), shape),))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


# --------------------------------------------------------------------------
# flat parameter-vector helpers and the finite-difference HVP

def params_to_vector(params: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1).astype(np.float64) for p in params])


def vector_to_params(vec: np.ndarray, params: Iterable[Tensor]) -> None:
    off = 0
    for p in params:
        n = p.size
        p.data = vec[off:off + n].reshape(p.shape).astype(p.dtype)
        off += n
    if off != vec.size:
        raise ShapeError(f"vector length {vec.size} does not match parameters ({off})")


def gradient_vector(net: Network, x: Tensor, loss_fn: Callable,
                    mode: str = "train",
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Flat gradient of ``loss_fn(out, tape) -> scalar Tensor`` over net params."""
    out, tape = forward(net, x, mode=mode, rng=rng)
    loss = loss_fn(out, tape)
    gmap = backward(tape, loss)
    parts = []
    for p in net.parameters():
        g = gmap.get(id(p))
        parts.append((np.zeros_like(p.data) if g is None else g)
                     .reshape(-1).astype(np.float64))
    return np.concatenate(parts)


def hvp(net: Network, x: Tensor, loss_fn: Callable, v: np.ndarray,
        eps: Optional[float] = None,
        rng_factory: Optional[Callable[[], np.random.Generator]] = None) -> np.ndarray:
    """Hessian-vector product over parameters via central differences.

    Returns ``(g(theta + e*vhat) - g(theta - e*vhat)) / (2e) * ||v||`` with
    ``vhat = v/||v||``.  ``eps`` defaults to 1e-3 relative to the parameter
    norm.  Dropout-bearing nets must pass a ``rng_factory`` producing
    identically seeded generators so both probes see one mask sequence.
    """
    params = net.parameters()
    theta = params_to_vector(params)
    vnorm = float(np.linalg.norm(v))
    if not vnorm > 0:
        raise NumericError("hvp direction has zero norm")
    vhat = np.asarray(v, dtype=np.float64) / vnorm
    if eps is None:
        eps = 1e-3 * max(float(np.linalg.norm(theta)), 1.0)
    if not eps > 0:
        raise NumericError("hvp eps must be positive")

    def grad_at(vec: np.ndarray) -> np.ndarray:
        vector_to_params(vec, params)
        rng = rng_factory() if rng_factory is not None else None
        g = gradient_vector(net, x, loss_fn, rng=rng)
        return check_finite(g, "hvp gradient probe")

    try:
        g_plus = grad_at(theta + eps * vhat)
        g_minus = grad_at(theta - eps * vhat)
    finally:
        vector_to_params(theta, params)
    return (g_plus - g_minus) / (2.0 * eps) * vnorm
