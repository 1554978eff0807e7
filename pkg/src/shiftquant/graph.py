"""Graph IR, batch-norm folding, and fusion into unified modules.

A Graph is a topologically ordered list of nodes over six kinds: input,
output, conv, relu, bn, add.  A Model bundles a graph with its named
weight tensors.  Two passes prepare a model for quantization:

  fold_bn  - merges every batch-norm into an adjacent convolution, so
             the quantized graph never sees a bn node
  fuse     - partitions the compute nodes into unified modules (cases
             a-d, see nnops), each of which quantizes its output once

Both passes are pure: they return new objects and leave inputs intact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nnops
from .errors import (
    DanglingRefError,
    GraphError,
    InvalidInputError,
    ShapeError,
    UnfoldableGraphError,
    UnsupportedOpError,
)
from .nnops import ConvAttrs

NODE_KINDS = ("input", "output", "conv", "relu", "bn", "add")
COMPUTE_KINDS = ("conv", "relu", "add")


@dataclass(frozen=True)
class BNRefs:
    """Tensor names and epsilon of one batch-norm node."""

    gamma: str
    beta: str
    mean: str
    var: str
    eps: float


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: ConvAttrs | None = None  # conv only
    weight: str | None = None  # conv only
    bias: str | None = None  # conv only, may be None for bias-free convs
    bn: BNRefs | None = None  # bn only
    shape: tuple[int, int, int] | None = None  # input only, (C, H, W)


@dataclass(frozen=True)
class Graph:
    """Nodes in topological order with exactly one input and one output."""

    nodes: tuple[Node, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        seen: set[str] = set()
        n_in = n_out = 0
        arity = {"input": 0, "output": 1, "conv": 1, "relu": 1, "bn": 1, "add": 2}
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise UnsupportedOpError(f"unknown node kind {node.kind!r} at node {node.id!r}")
            if node.id in seen:
                raise GraphError(f"duplicate node id {node.id!r}")
            if len(node.inputs) != arity[node.kind]:
                raise GraphError(
                    f"node {node.id!r} ({node.kind}) takes {arity[node.kind]} inputs, "
                    f"got {len(node.inputs)}"
                )
            for ref in node.inputs:
                if ref not in seen:
                    raise GraphError(
                        f"node {node.id!r} consumes {ref!r} which is not defined earlier "
                        "(graph must be in topological order)"
                    )
            if node.kind == "input":
                n_in += 1
                if node.shape is None or len(node.shape) != 3:
                    raise GraphError(f"input node {node.id!r} needs a (C, H, W) shape")
            if node.kind == "output":
                n_out += 1
            if node.kind == "conv" and (node.attrs is None or node.weight is None):
                raise GraphError(f"conv node {node.id!r} needs attrs and a weight ref")
            if node.kind == "bn" and node.bn is None:
                raise GraphError(f"bn node {node.id!r} needs bn refs")
            seen.add(node.id)
        if n_in != 1 or n_out != 1:
            raise GraphError(f"graph needs exactly one input and one output node, got {n_in}/{n_out}")
        consumed = {ref for n in self.nodes for ref in n.inputs}
        dangling = [n.id for n in self.nodes if n.kind != "output" and n.id not in consumed]
        if dangling:
            raise GraphError(f"nodes {dangling} feed nothing; dead branches are not allowed")

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"no node {node_id!r}")

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for ref in n.inputs:
                out[ref].append(n)
        return out

    @property
    def input_node(self) -> Node:
        return next(n for n in self.nodes if n.kind == "input")

    @property
    def output_node(self) -> Node:
        return next(n for n in self.nodes if n.kind == "output")


@dataclass(frozen=True)
class Model:
    """A graph plus the named float tensors it references."""

    graph: Graph
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for node in self.graph.nodes:
            for role, ref in _tensor_refs(node):
                if ref not in self.tensors:
                    raise DanglingRefError(
                        f"node {node.id!r} references missing tensor {ref!r} as {role}"
                    )
        infer_shapes(self.graph, self.tensors)


def _tensor_refs(node: Node):
    if node.kind == "conv":
        yield "weight", node.weight
        if node.bias is not None:
            yield "bias", node.bias
    elif node.kind == "bn":
        for role in ("gamma", "beta", "mean", "var"):
            yield role, getattr(node.bn, role)


def infer_shapes(graph: Graph, tensors: dict[str, np.ndarray]) -> dict[str, tuple[int, int, int]]:
    """Per-node (C, H, W) activation shapes; raises ShapeError on any clash."""
    shapes: dict[str, tuple[int, int, int]] = {}
    for node in graph.nodes:
        if node.kind == "input":
            shapes[node.id] = tuple(node.shape)
        elif node.kind == "conv":
            c, h, w = shapes[node.inputs[0]]
            wt = tensors[node.weight]
            if wt.ndim != 4:
                raise ShapeError(f"weight {node.weight!r} must be rank 4, got {wt.shape}")
            if wt.shape[1] != c:
                raise ShapeError(
                    f"conv {node.id!r} expects {wt.shape[1]} input channels, producer has {c}"
                )
            if node.bias is not None and tensors[node.bias].shape != (wt.shape[0],):
                raise ShapeError(
                    f"bias of conv {node.id!r} must have shape ({wt.shape[0]},), "
                    f"got {tensors[node.bias].shape}"
                )
            oh, ow = nnops.conv_output_hw(h, w, wt.shape[2], wt.shape[3], node.attrs)
            shapes[node.id] = (wt.shape[0], oh, ow)
        elif node.kind == "bn":
            c, h, w = shapes[node.inputs[0]]
            for role in ("gamma", "beta", "mean", "var"):
                ref = getattr(node.bn, role)
                if tensors[ref].shape != (c,):
                    raise ShapeError(
                        f"bn {node.id!r} {role} must have shape ({c},), got {tensors[ref].shape}"
                    )
            shapes[node.id] = (c, h, w)
        elif node.kind == "add":
            a, b = (shapes[r] for r in node.inputs)
            if a != b:
                raise ShapeError(f"add {node.id!r} operands differ: {a} vs {b}")
            shapes[node.id] = a
        else:  # relu, output
            shapes[node.id] = shapes[node.inputs[0]]
    return shapes


# ------------------------------------------------------- batch-norm folding


@dataclass(frozen=True)
class BNParams:
    """Materialized batch-norm statistics for folding."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise InvalidInputError(f"bn eps must be > 0, got {self.eps}")
        if np.any(np.asarray(self.var) < 0):
            raise InvalidInputError("bn variance must be >= 0")


def fold_bn_into_prev_conv(
    w: np.ndarray, b: np.ndarray, bn: BNParams
) -> tuple[np.ndarray, np.ndarray]:
    """Merge bn(conv(x)) into a single convolution.

    Each output channel l is rescaled: w'[l] = w[l] * gamma[l]/sqrt(var[l]+eps)
    and b'[l] = gamma[l]*(b[l]-mean[l])/sqrt(var[l]+eps) + beta[l].
    Exact for any padding because bn acts after the convolution.
    """
    denom = np.sqrt(bn.var.astype(np.float64) + bn.eps)
    scale = bn.gamma / denom
    w2 = w.astype(np.float64) * scale[:, None, None, None]
    b2 = scale * (b.astype(np.float64) - bn.mean) + bn.beta
    return w2, b2


def fold_bn_into_next_conv(
    w: np.ndarray, b: np.ndarray, bn: BNParams
) -> tuple[np.ndarray, np.ndarray]:
    """Merge conv(bn(x)) into a single convolution.

    Input channel k is rescaled by a[k] = gamma[k]/sqrt(var[k]+eps) and the
    shift b[k] = beta[k] - a[k]*mean[k] is absorbed into the bias:
    b'[l] = b[l] + sum_{k,i,j} w[l,k,i,j] * b[k].  Only exact when the conv
    has no zero padding, because padded positions never saw the bn shift.
    """
    denom = np.sqrt(bn.var.astype(np.float64) + bn.eps)
    a = bn.gamma / denom
    shift = bn.beta - a * bn.mean
    w2 = w.astype(np.float64) * a[None, :, None, None]
    b2 = b.astype(np.float64) + np.einsum("lkij,k->l", w.astype(np.float64), shift)
    return w2, b2


def _bn_params(node: Node, tensors: dict[str, np.ndarray]) -> BNParams:
    r = node.bn
    return BNParams(
        gamma=tensors[r.gamma].astype(np.float64),
        beta=tensors[r.beta].astype(np.float64),
        mean=tensors[r.mean].astype(np.float64),
        var=tensors[r.var].astype(np.float64),
        eps=r.eps,
    )


def fold_bn(model: Model) -> Model:
    """Remove every bn node by folding it into an adjacent convolution.

    A bn whose producer is a convolution with no other consumer folds
    backward (preferred).  Otherwise a bn whose only consumer is a
    convolution with zero padding folds forward.  Anything else raises
    UnfoldableGraphError.  Idempotent: a graph without bn nodes is
    returned unchanged.
    """
    nodes = list(model.graph.nodes)
    tensors = dict(model.tensors)
    while True:
        graph = Graph(tuple(nodes))
        bn_node = next((n for n in nodes if n.kind == "bn"), None)
        if bn_node is None:
            break
        consumers = graph.consumers()
        producer = graph.node(bn_node.inputs[0])
        bn = _bn_params(bn_node, tensors)
        nexts = consumers[bn_node.id]

        if producer.kind == "conv" and len(consumers[producer.id]) == 1:
            conv = producer
            w = tensors[conv.weight]
            b = tensors[conv.bias] if conv.bias else np.zeros(w.shape[0])
            w2, b2 = fold_bn_into_prev_conv(w, b, bn)
            bias_name = conv.bias or f"{conv.id}.bias"
            tensors[conv.weight] = w2
            tensors[bias_name] = b2
            nodes = [
                replace(
                    n,
                    inputs=tuple(conv.id if r == bn_node.id else r for r in n.inputs),
                )
                for n in nodes
                if n.id != bn_node.id
            ]
            nodes = [
                replace(n, bias=bias_name) if n.id == conv.id else n for n in nodes
            ]
        elif len(nexts) == 1 and nexts[0].kind == "conv":
            conv = nexts[0]
            if conv.attrs.padding != 0:
                raise UnfoldableGraphError(
                    f"bn {bn_node.id!r} feeds conv {conv.id!r} with zero padding "
                    f"{conv.attrs.padding}; folding forward would corrupt the borders"
                )
            w = tensors[conv.weight]
            b = tensors[conv.bias] if conv.bias else np.zeros(w.shape[0])
            w2, b2 = fold_bn_into_next_conv(w, b, bn)
            bias_name = conv.bias or f"{conv.id}.bias"
            tensors[conv.weight] = w2
            tensors[bias_name] = b2
            nodes = [
                replace(
                    n,
                    inputs=tuple(bn_node.inputs[0] if r == bn_node.id else r for r in n.inputs),
                    bias=bias_name if n.id == conv.id else n.bias,
                )
                for n in nodes
                if n.id != bn_node.id
            ]
        else:
            raise UnfoldableGraphError(
                f"bn {bn_node.id!r} is not adjacent to exactly one foldable convolution"
            )
    # drop tensors that no longer have a referent (the bn statistics)
    graph = Graph(tuple(nodes))
    live = {ref for n in graph.nodes for _, ref in _tensor_refs(n)}
    return Model(graph, {k: v for k, v in tensors.items() if k in live})


# ------------------------------------------------------------------ fusion


@dataclass(frozen=True)
class UnifiedModule:
    """One fused conv [+add] [+relu] group with a single output quantization."""

    case: str  # one of nnops.MODULE_CASES
    members: tuple[str, ...]  # node ids, in topological order
    conv_id: str
    attrs: ConvAttrs
    weight: str
    bias: str | None
    input_ref: str  # node whose activation feeds the convolution
    shortcut_ref: str | None  # other add operand for cases c and d
    output_id: str  # node whose activation is the module output


def fuse(graph: Graph) -> tuple[UnifiedModule, ...]:
    """Partition all compute nodes into unified modules, longest match first.

    Walking in topological order, each unclaimed convolution greedily
    tries conv+add+relu (c), then conv+add (d), then conv+relu (b), then
    stands alone (a).  Every compute node must end up in exactly one
    module; anything left over is an unsupported arrangement.
    """
    if any(n.kind == "bn" for n in graph.nodes):
        raise GraphError("fuse requires a graph with batch norms already folded")
    consumers = graph.consumers()
    order = {n.id: i for i, n in enumerate(graph.nodes)}
    assigned: set[str] = set()
    modules: list[UnifiedModule] = []

    for node in graph.nodes:
        if node.kind != "conv" or node.id in assigned:
            continue
        members = [node.id]
        case = "a"
        output_id = node.id
        shortcut_ref = None
        cons = [c for c in consumers[node.id]]
        if len(cons) == 1 and cons[0].kind == "add" and cons[0].id not in assigned:
            add = cons[0]
            other = next((r for r in add.inputs if r != node.id), None)
            if other is not None:
                case = "d"
                members.append(add.id)
                output_id = add.id
                shortcut_ref = other
                add_cons = consumers[add.id]
                if (
                    len(add_cons) == 1
                    and add_cons[0].kind == "relu"
                    and add_cons[0].id not in assigned
                ):
                    case = "c"
                    members.append(add_cons[0].id)
                    output_id = add_cons[0].id
        if case == "a" and len(cons) == 1 and cons[0].kind == "relu" and cons[0].id not in assigned:
            case = "b"
            members.append(cons[0].id)
            output_id = cons[0].id
        assigned.update(members)
        modules.append(
            UnifiedModule(
                case=case,
                members=tuple(members),
                conv_id=node.id,
                attrs=node.attrs,
                weight=node.weight,
                bias=node.bias,
                input_ref=node.inputs[0],
                shortcut_ref=shortcut_ref,
                output_id=output_id,
            )
        )

    leftover = [
        n.id for n in graph.nodes if n.kind in COMPUTE_KINDS and n.id not in assigned
    ]
    if leftover:
        raise UnsupportedOpError(
            f"nodes {leftover} cannot be fused into any module "
            "(relu/add must follow a convolution)"
        )
    modules.sort(key=lambda m: order[m.output_id])
    return tuple(modules)


def count_quant_ops(modules: tuple[UnifiedModule, ...]) -> int:
    """Activation quantizations of the fused graph: one per module."""
    return len(modules)


def count_quant_ops_naive(graph: Graph) -> int:
    """Activation quantizations if every compute node quantized its output."""
    return sum(1 for n in graph.nodes if n.kind in COMPUTE_KINDS)


# --------------------------------------------------------- float execution


def run_graph_float(model: Model, x: np.ndarray) -> dict[str, np.ndarray]:
    """Node-by-node float reference execution; returns every node's output."""
    x = np.asarray(x, dtype=np.float64)
    graph = model.graph
    c, h, w = graph.input_node.shape
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ShapeError(f"input must be (N, {c}, {h}, {w}), got {x.shape}")
    vals: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind == "input":
            vals[node.id] = x
        elif node.kind == "conv":
            wt = model.tensors[node.weight].astype(np.float64)
            b = (
                model.tensors[node.bias].astype(np.float64)
                if node.bias
                else np.zeros(wt.shape[0])
            )
            vals[node.id] = nnops.conv2d_float(vals[node.inputs[0]], wt, b, node.attrs)
        elif node.kind == "bn":
            bn = _bn_params(node, model.tensors)
            v = vals[node.inputs[0]]
            scale = bn.gamma / np.sqrt(bn.var + bn.eps)
            vals[node.id] = (v - bn.mean[:, None, None]) * scale[:, None, None] + bn.beta[
                :, None, None
            ]
        elif node.kind == "relu":
            vals[node.id] = np.maximum(vals[node.inputs[0]], 0.0)
        elif node.kind == "add":
            vals[node.id] = vals[node.inputs[0]] + vals[node.inputs[1]]
        else:  # output
            vals[node.id] = vals[node.inputs[0]]
    return vals


def run_modules_float(
    model: Model, modules: tuple[UnifiedModule, ...], x: np.ndarray
) -> dict[str, np.ndarray]:
    """Module-by-module float execution (no quantization), for equivalence checks."""
    x = np.asarray(x, dtype=np.float64)
    vals: dict[str, np.ndarray] = {model.graph.input_node.id: x}
    for m in modules:
        w = model.tensors[m.weight].astype(np.float64)
        b = model.tensors[m.bias].astype(np.float64) if m.bias else np.zeros(w.shape[0])
        shortcut = vals[m.shortcut_ref] if m.shortcut_ref is not None else None
        vals[m.output_id] = nnops.run_unified_module_ref(
            m.case, vals[m.input_ref], w, b, m.attrs, shortcut=shortcut
        )
    out_node = model.graph.output_node
    vals[out_node.id] = vals[out_node.inputs[0]]
    return vals
