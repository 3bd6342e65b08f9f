"""Static network graphs over the autodiff tape.

A Graph is a declarative, topologically ordered list of named nodes; running
it produces tape Vars, which is what the training loop composes its losses
from. The array container for parameters is numpy; the differentiation
machinery itself lives in autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFault, Var

EPS_NORM = 1e-12  # inside sqrt of the L2 norm: safe at zero gradient


class GraphError(ValueError):
    """Graph construction or evaluation rejected an ill-formed input."""


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple = ()
    # per-node static shape; batch axis is None
    shape: tuple = ()
    attrs: dict = field(default_factory=dict)


# shape rules; `None` marks the batch axis
def _infer_shape(op, in_shapes, attrs):
    if op == "input":
        return (None,) + tuple(attrs["shape"])
    if op == "param":
        return tuple(attrs["shape"])
    if op == "const":
        return tuple(np.asarray(attrs["value"]).shape)
    if op == "matmul":
        (b, d), w = in_shapes
        if w[0] != d:
            raise GraphError(f"matmul inner extents differ: {d} vs {w[0]}")
        return (b, w[1])
    if op == "conv2d":
        x, w = in_shapes
        if len(x) != 4 or len(w) != 4:
            raise GraphError("conv2d expects 4-D input and kernel")
        if w[1] != x[1]:
            raise GraphError(f"conv2d channel mismatch: {x[1]} vs {w[1]}")
        if w[2] != w[3] or w[2] % 2 == 0:
            raise GraphError("conv2d kernels must be square with odd size")
        return (x[0], w[0], x[2], x[3])
    if op == "bias_add":
        x, b = in_shapes
        if len(x) == 2 and b == (x[1],):
            return x
        if len(x) == 4 and b == (x[1], 1, 1):
            return x
        raise GraphError(f"bias_add shape mismatch: {x} vs {b}")
    if op in ("relu", "elu", "tanh", "sigmoid", "softmax"):
        return in_shapes[0]
    if op == "mul":
        a, b = in_shapes
        if a != b:
            raise GraphError(f"elementwise mul shape mismatch: {a} vs {b}")
        return a
    if op == "mean_batch":
        x = in_shapes[0]
        return x[1:]
    if op == "avgpool2":
        b, c, h, w = in_shapes[0]
        if h % 2 or w % 2:
            raise GraphError("avgpool2 needs even spatial extents")
        return (b, c, h // 2, w // 2)
    if op == "flatten":
        x = in_shapes[0]
        return (x[0], int(np.prod(x[1:])))
    if op == "reshape":
        x = in_shapes[0]
        return (x[0],) + tuple(attrs["shape"])
    if op == "concat":
        first = in_shapes[0]
        d = 0
        for s in in_shapes:
            if s[:1] != first[:1] or s[2:] != first[2:]:
                raise GraphError("concat operands differ outside axis 1")
            d += s[1]
        return (first[0], d) + first[2:]
    if op == "scale":
        return in_shapes[0]
    raise GraphError(f"unknown op kind: {op}")


class Graph:
    """An acyclic, topologically ordered node list with static shapes."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self.by_name = {}
        self.shapes = {}
        for n in self.nodes:
            if n.name in self.by_name:
                raise GraphError(f"duplicate node name: {n.name}")
            for inp in n.inputs:
                if inp not in self.by_name:
                    raise GraphError(
                        f"node {n.name} uses {inp!r} before it is defined"
                    )
            in_shapes = [self.shapes[i] for i in n.inputs]
            self.shapes[n.name] = _infer_shape(n.op, in_shapes, n.attrs)
            self.by_name[n.name] = n
        self.output = self.nodes[-1].name if self.nodes else None

    @property
    def input_names(self):
        return [n.name for n in self.nodes if n.op == "input"]

    @property
    def param_names(self):
        return [n.attrs["param"] for n in self.nodes if n.op == "param"]


class ParamSet:
    """Named parameter tensors plus their Adam state."""

    def __init__(self, tensors):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        self.step = 0

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def n_params(self):
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self):
        ps = ParamSet({k: v.copy() for k, v in self.tensors.items()})
        ps.m = {k: v.copy() for k, v in self.m.items()}
        ps.v = {k: v.copy() for k, v in self.v.items()}
        ps.step = self.step
        return ps

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def _check_input_shape(node, arr):
    want = node.attrs["shape"]
    if arr.shape[1:] != tuple(want):
        raise GraphError(
            f"input {node.name!r}: expected per-sample shape {tuple(want)}, "
            f"got {arr.shape[1:]}"
        )


def forward_vars(graph, params, inputs, trainable=True):
    """Evaluate the graph on tape Vars.

    Returns (node -> Var map, param name -> Var map). Inputs may be numpy
    arrays or Vars (pass Vars when gradients to an input are needed).
    `trainable=False` treats parameters as constants so no gradient flows
    to them (used when the critic scores features inside the predictor
    step).
    """
    out = {}
    pvars = {}
    for n in graph.nodes:
        if n.op == "input":
            if n.name not in inputs:
                raise GraphError(f"missing input {n.name!r}")
            x = inputs[n.name]
            v = x if isinstance(x, Var) else ad.leaf(np.asarray(x, dtype=np.float64))
            _check_input_shape(n, v.data)
            out[n.name] = v
            continue
        if n.op == "param":
            pname = n.attrs["param"]
            if pname not in params.tensors:
                raise GraphError(f"parameter {pname!r} missing from ParamSet")
            if pname not in pvars:
                arr = params.tensors[pname]
                pvars[pname] = ad.leaf(arr) if trainable else ad.const(arr)
            out[n.name] = pvars[pname]
            continue
        if n.op == "const":
            out[n.name] = ad.const(n.attrs["value"])
            continue
        args = [out[i] for i in n.inputs]
        try:
            if n.op == "matmul":
                v = ad.matmul(args[0], args[1])
            elif n.op == "conv2d":
                v = ad.conv2d(args[0], args[1])
            elif n.op == "bias_add":
                b = args[1]
                if args[0].ndim == 4:
                    b = ad.reshape(b, (1,) + b.shape)
                v = ad.add(args[0], b)
            elif n.op == "relu":
                v = ad.relu(args[0])
            elif n.op == "elu":
                v = ad.elu(args[0])
            elif n.op == "tanh":
                v = ad.tanh(args[0])
            elif n.op == "sigmoid":
                v = ad.sigmoid(args[0])
            elif n.op == "softmax":
                v = ad.softmax(args[0], axis=1)
            elif n.op == "mul":
                v = ad.mul(args[0], args[1])
            elif n.op == "mean_batch":
                v = ad.mean(args[0], axis=0)
            elif n.op == "avgpool2":
                v = ad.avgpool2(args[0])
            elif n.op == "flatten":
                b = args[0].shape[0]
                v = ad.reshape(args[0], (b, int(np.prod(args[0].shape[1:]))))
            elif n.op == "reshape":
                b = args[0].shape[0]
                v = ad.reshape(args[0], (b,) + tuple(n.attrs["shape"]))
            elif n.op == "concat":
                v = ad.concat(args, axis=1)
            elif n.op == "scale":
                v = ad.mul(args[0], float(n.attrs["factor"]))
            else:
                raise GraphError(f"unknown op kind: {n.op}")
        except NumericFault as e:
            raise NumericFault(f"node {n.name!r}: {e}") from e
        out[n.name] = v
    return out, pvars


def forward(graph, params, inputs):
    """Run the graph; returns every node's output as a numpy array."""
    out, _ = forward_vars(graph, params, inputs, trainable=False)
    return {k: v.data for k, v in out.items()}


def backprop_params(graph, params, inputs, loss_node=None):
    """Gradient of a scalar node with respect to every parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    loss_node = loss_node or graph.output
    out, pvars = forward_vars(graph, params, inputs)
    loss = out[loss_node]
    if loss.data.size != 1:
        raise GraphError(f"loss node {loss_node!r} is not scalar: {loss.shape}")
    names = list(pvars)
    gs = ad.grad(loss, [pvars[k] for k in names])
    grads = params.zeros_like()
    for k, g in zip(names, gs):
        grads[k] = g.data
    if not np.all([np.isfinite(v).all() for v in grads.values()]):
        raise NumericFault("non-finite parameter gradient")
    return grads


def _critic_out_var(graph, params, z, trainable):
    out, pvars = forward_vars(graph, params, {graph.input_names[0]: z},
                              trainable=trainable)
    y = out[graph.output]
    if y.ndim == 2 and y.shape[1] == 1:
        y = ad.reshape(y, (y.shape[0],))
    if y.ndim != 1:
        raise GraphError(f"expected one scalar per row, got shape {y.shape}")
    return y, pvars


def input_gradient(graph, params, x):
    """Per-row gradient of a scalar-per-row graph with respect to its input.

    Rows are independent, so differentiating the summed output recovers each
    row's own gradient.
    """
    z = ad.leaf(np.asarray(x, dtype=np.float64))
    y, _ = _critic_out_var(graph, params, z, trainable=False)
    (gz,) = ad.grad(ad.vsum(y), [z])
    if not np.isfinite(gz.data).all():
        raise NumericFault("non-finite input gradient")
    return gz.data


def grad_norm_penalty(graph, params, z):
    """Tape node for mean over rows of (||d f/d z||_2 - 1)^2.

    Both the critic parameters and z stay live on the tape, so the result
    can be differentiated with respect to either. The norm runs over every
    non-batch axis, so image-shaped inputs work too.
    """
    y, pvars = _critic_out_var(graph, params, z, trainable=True)
    (gz,) = ad.grad(ad.vsum(y), [z])
    axes = tuple(range(1, gz.ndim))
    norms = ad.sqrt(ad.vsum(ad.mul(gz, gz), axis=axes) + EPS_NORM)
    return ad.mean((norms - 1.0) ** 2.0), pvars


def penalty_param_gradient(graph, params, z_batch, scale=1.0):
    """d/d(params) of the gradient penalty at the rows of z_batch.

    Second-order: the inner gradient is built on the tape and backpropagated
    a second time. `scale` multiplies the penalty (callers fold in their
    Lagrange coefficient here).
    """
    z = ad.leaf(np.asarray(z_batch, dtype=np.float64))
    pen, pvars = grad_norm_penalty(graph, params, z)
    names = list(pvars)
    gs = ad.grad(ad.mul(pen, float(scale)), [pvars[k] for k in names])
    grads = params.zeros_like()
    for k, g in zip(names, gs):
        grads[k] = g.data
        if not np.isfinite(g.data).all():
            raise NumericFault(f"non-finite penalty gradient for {k!r}")
    return grads
