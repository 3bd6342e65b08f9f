"""Builders for the three networks: feature extractor, label predictor, critic.

Each builder returns a (Graph, ParamSet) pair with He-style seeded
initialisation. Node names are part of the contract:

  extractor: input "x", output "feat" (batch, feature_dim)
  predictor: input "z", nodes "penultimate", "logits", output "probs"
  critic:    input "z", node "gate" (when attention is on), output "score"

The critic uses smooth activations only (ELU, sigmoid) so its gradient
penalty stays differentiable with respect to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, GraphError, Node, ParamSet

PREDICTOR_HIDDEN = {
    "predictor_spatial": (64, 32),
    "predictor_kspace": (128, 64, 32),
}
CRITIC_HIDDEN = (64, 32)


@dataclass(frozen=True)
class NetSpec:
    variant: str
    input_shape: tuple = ()        # per-sample, extractor only, e.g. (1, 32, 32)
    feature_dim: int = 64
    n_classes: int = 5
    channels: tuple = (8, 16, 32)  # extractor conv channels
    hidden: tuple = ()             # () -> variant default
    attention: bool = True         # critic only
    input_scale: float = 1.0       # fixed input multiplier (k-space conditioning)

    def hidden_dims(self):
        if self.hidden:
            return tuple(self.hidden)
        if self.variant in PREDICTOR_HIDDEN:
            return PREDICTOR_HIDDEN[self.variant]
        if self.variant == "critic":
            return CRITIC_HIDDEN
        return ()

    def to_dict(self):
        return {
            "variant": self.variant,
            "input_shape": list(self.input_shape),
            "feature_dim": self.feature_dim,
            "n_classes": self.n_classes,
            "channels": list(self.channels),
            "hidden": list(self.hidden),
            "attention": self.attention,
            "input_scale": self.input_scale,
        }

    @staticmethod
    def from_dict(d):
        return NetSpec(
            variant=d["variant"],
            input_shape=tuple(d["input_shape"]),
            feature_dim=int(d["feature_dim"]),
            n_classes=int(d["n_classes"]),
            channels=tuple(d["channels"]),
            hidden=tuple(d["hidden"]),
            attention=bool(d["attention"]),
            input_scale=float(d["input_scale"]),
        )


def _he_linear(rng, din, dout):
    return rng.normal(scale=np.sqrt(2.0 / din), size=(din, dout))


def _he_conv(rng, cout, cin, k):
    return rng.normal(scale=np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))


def build_extractor(spec, seed):
    """Small CNN: conv-ELU blocks with 2x average-pool downsampling, then a
    linear head onto the feature space."""
    if spec.variant != "extractor":
        raise GraphError(f"not an extractor spec: {spec.variant}")
    c, h, w = spec.input_shape
    n_blocks = len(spec.channels)
    if h % (2**n_blocks) or w % (2**n_blocks):
        raise GraphError(
            f"input {h}x{w} not divisible by 2^{n_blocks} for pooling"
        )
    rng = np.random.default_rng(seed)
    tensors = {}
    nodes = [Node("x", "input", attrs={"shape": (c, h, w)})]
    prev = "x"
    if spec.input_scale != 1.0:
        nodes.append(Node("xs", "scale", ("x",), attrs={"factor": spec.input_scale}))
        prev = "xs"
    cin = c
    for i, cout in enumerate(spec.channels):
        tensors[f"conv{i}_w"] = _he_conv(rng, cout, cin, 3)
        tensors[f"conv{i}_b"] = np.zeros((cout, 1, 1))
        nodes += [
            Node(f"conv{i}_w", "param", attrs={"param": f"conv{i}_w", "shape": (cout, cin, 3, 3)}),
            Node(f"conv{i}_b", "param", attrs={"param": f"conv{i}_b", "shape": (cout, 1, 1)}),
            Node(f"conv{i}", "conv2d", (prev, f"conv{i}_w")),
            Node(f"biased{i}", "bias_add", (f"conv{i}", f"conv{i}_b")),
            Node(f"act{i}", "elu", (f"biased{i}",)),
            Node(f"pool{i}", "avgpool2", (f"act{i}",)),
        ]
        prev = f"pool{i}"
        cin = cout
    flat_dim = spec.channels[-1] * (h // 2**n_blocks) * (w // 2**n_blocks)
    tensors["fc_w"] = _he_linear(rng, flat_dim, spec.feature_dim)
    tensors["fc_b"] = np.zeros(spec.feature_dim)
    nodes += [
        Node("flat", "flatten", (prev,)),
        Node("fc_w", "param", attrs={"param": "fc_w", "shape": (flat_dim, spec.feature_dim)}),
        Node("fc_b", "param", attrs={"param": "fc_b", "shape": (spec.feature_dim,)}),
        Node("fc", "matmul", ("flat", "fc_w")),
        Node("feat", "bias_add", ("fc", "fc_b")),
    ]
    return Graph(nodes), ParamSet(tensors)


def _dense_stack(rng, tensors, nodes, prev, din, dims, act, prefix, last_name=None):
    for i, dout in enumerate(dims):
        wname, bname = f"{prefix}w{i}", f"{prefix}b{i}"
        tensors[wname] = _he_linear(rng, din, dout)
        tensors[bname] = np.zeros(dout)
        nodes += [
            Node(wname, "param", attrs={"param": wname, "shape": (din, dout)}),
            Node(bname, "param", attrs={"param": bname, "shape": (dout,)}),
            Node(f"{prefix}mm{i}", "matmul", (prev, wname)),
            Node(f"{prefix}h{i}", "bias_add", (f"{prefix}mm{i}", bname)),
        ]
        prev = f"{prefix}h{i}"
        if act is not None:
            aname = last_name if (last_name and i == len(dims) - 1) else f"{prefix}a{i}"
            nodes.append(Node(aname, act, (prev,)))
            prev = aname
        din = dout
    return prev, din


def build_predictor(spec, seed):
    """MLP onto class logits; the last hidden layer is exposed as
    "penultimate" so the center loss can live there when configured."""
    if spec.variant not in PREDICTOR_HIDDEN:
        raise GraphError(f"not a predictor spec: {spec.variant}")
    rng = np.random.default_rng(seed)
    dims = spec.hidden_dims()
    tensors = {}
    nodes = [Node("z", "input", attrs={"shape": (spec.feature_dim,)})]
    prev, din = _dense_stack(
        rng, tensors, nodes, "z", spec.feature_dim, dims, "elu", "",
        last_name="penultimate",
    )
    tensors["out_w"] = _he_linear(rng, din, spec.n_classes)
    tensors["out_b"] = np.zeros(spec.n_classes)
    nodes += [
        Node("out_w", "param", attrs={"param": "out_w", "shape": (din, spec.n_classes)}),
        Node("out_b", "param", attrs={"param": "out_b", "shape": (spec.n_classes,)}),
        Node("out_mm", "matmul", (prev, "out_w")),
        Node("logits", "bias_add", ("out_mm", "out_b")),
        Node("probs", "softmax", ("logits",)),
    ]
    return Graph(nodes), ParamSet(tensors)


def build_critic(spec, seed):
    """Scalar-per-row distance estimator, optionally with a sigmoid feature
    gate in front (the attention switch)."""
    if spec.variant != "critic":
        raise GraphError(f"not a critic spec: {spec.variant}")
    rng = np.random.default_rng(seed)
    d = spec.feature_dim
    tensors = {}
    nodes = [Node("z", "input", attrs={"shape": (d,)})]
    prev = "z"
    if spec.attention:
        tensors["att_w1"] = _he_linear(rng, d, d)
        tensors["att_b1"] = np.zeros(d)
        tensors["att_w2"] = _he_linear(rng, d, d)
        tensors["att_b2"] = np.zeros(d)
        nodes += [
            Node("att_w1", "param", attrs={"param": "att_w1", "shape": (d, d)}),
            Node("att_b1", "param", attrs={"param": "att_b1", "shape": (d,)}),
            Node("att_mm1", "matmul", ("z", "att_w1")),
            Node("att_h1", "bias_add", ("att_mm1", "att_b1")),
            Node("att_a1", "elu", ("att_h1",)),
            Node("att_w2", "param", attrs={"param": "att_w2", "shape": (d, d)}),
            Node("att_b2", "param", attrs={"param": "att_b2", "shape": (d,)}),
            Node("att_mm2", "matmul", ("att_a1", "att_w2")),
            Node("att_h2", "bias_add", ("att_mm2", "att_b2")),
            Node("gate", "sigmoid", ("att_h2",)),
            Node("gated", "mul", ("z", "gate")),
        ]
        prev = "gated"
    prev, din = _dense_stack(
        rng, tensors, nodes, prev, d, spec.hidden_dims(), "elu", "fc_"
    )
    tensors["out_w"] = _he_linear(rng, din, 1)
    tensors["out_b"] = np.zeros(1)
    nodes += [
        Node("out_w", "param", attrs={"param": "out_w", "shape": (din, 1)}),
        Node("out_b", "param", attrs={"param": "out_b", "shape": (1,)}),
        Node("out_mm", "matmul", (prev, "out_w")),
        Node("score", "bias_add", ("out_mm", "out_b")),
    ]
    return Graph(nodes), ParamSet(tensors)


def build(spec, seed):
    if spec.variant == "extractor":
        return build_extractor(spec, seed)
    if spec.variant in PREDICTOR_HIDDEN:
        return build_predictor(spec, seed)
    if spec.variant == "critic":
        return build_critic(spec, seed)
    raise GraphError(f"unknown variant: {spec.variant}")


def expected_param_count(spec):
    """Parameter count as a pure function of the spec (golden-count rule)."""
    if spec.variant == "extractor":
        c, h, w = spec.input_shape
        total, cin = 0, c
        for cout in spec.channels:
            total += cout * cin * 9 + cout
            cin = cout
        flat = spec.channels[-1] * (h // 2 ** len(spec.channels)) * (
            w // 2 ** len(spec.channels)
        )
        return total + flat * spec.feature_dim + spec.feature_dim
    dims = spec.hidden_dims()
    if spec.variant in PREDICTOR_HIDDEN:
        chain = (spec.feature_dim,) + dims + (spec.n_classes,)
    else:
        chain = (spec.feature_dim,) + dims + (1,)
    total = sum(a * b + b for a, b in zip(chain, chain[1:]))
    if spec.variant == "critic" and spec.attention:
        d = spec.feature_dim
        total += 2 * (d * d + d)
    return total
