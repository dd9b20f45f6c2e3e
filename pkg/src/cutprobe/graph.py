"""Layer-graph representation: loading, validation, truncation, parameter
counting, and forward execution.

A graph description is JSON with top-level fields ``name``, ``input_shape``
(C, H, W), ``nodes`` (topologically ordered), ``cut_points`` (label -> node
id), and optional ``output`` (defaults to the last node). Shape propagation
runs at load time so malformed geometry fails before any forward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import ops
from .errors import GraphError, ShapeMismatchError
from .weights import WeightStore, parse_weights

OP_KINDS = frozenset(
    {"input", "conv", "maxpool", "avgpool", "batchnorm", "relu", "concat", "linear", "flatten"}
)

# attrs required per op kind; remaining kinds take none
_REQUIRED_ATTRS = {
    "conv": ("out_channels", "in_channels", "kernel", "stride", "padding"),
    "maxpool": ("kernel", "stride", "padding"),
    "avgpool": ("kernel", "stride", "padding"),
    "batchnorm": ("channels",),
    "linear": ("in_features", "out_features"),
}

_WEIGHT_ROLES = {
    "conv": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
    "linear": ("weight", "bias"),
}


@dataclass
class NodeSpec:
    id: str
    op_kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    weight_keys: dict[str, str] = field(default_factory=dict)


@dataclass
class ModelGraph:
    """Validated DAG of layer nodes with cached output shapes per node."""

    name: str
    input_shape: tuple[int, int, int]
    nodes: list[NodeSpec]
    cut_points: dict[str, str]
    output_id: str
    shapes: dict[str, tuple[int, ...]]

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"graph '{self.name}' has no node '{node_id}'")

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]


def _pair(value, node_id: str, key: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) for v in value)
    ):
        raise GraphError(f"node '{node_id}': attr '{key}' must be a pair of ints, got {value!r}")
    return (value[0], value[1])


def _propagate_shape(node: NodeSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of one node; raises GraphError naming the node."""
    k = node.op_kind
    try:
        if k == "relu":
            return in_shapes[0]
        if k == "flatten":
            return (int(np.prod(in_shapes[0], dtype=np.int64)),)
        if k == "conv":
            c, h, w = in_shapes[0]
            if c != node.attrs["in_channels"]:
                raise ShapeMismatchError(
                    f"expects {node.attrs['in_channels']} input channels, gets {c}"
                )
            kh, kw = _pair(node.attrs["kernel"], node.id, "kernel")
            sh, sw = _pair(node.attrs["stride"], node.id, "stride")
            ph, pw = _pair(node.attrs["padding"], node.id, "padding")
            ho = (h + 2 * ph - kh) // sh + 1
            wo = (w + 2 * pw - kw) // sw + 1
            if kh > h + 2 * ph or kw > w + 2 * pw or ho < 1 or wo < 1:
                raise ShapeMismatchError(
                    f"kernel {kh}x{kw} stride {sh}x{sw} padding {ph}x{pw} "
                    f"does not fit input {c}x{h}x{w}"
                )
            return (node.attrs["out_channels"], ho, wo)
        if k in ("maxpool", "avgpool"):
            c, h, w = in_shapes[0]
            kh, kw = _pair(node.attrs["kernel"], node.id, "kernel")
            sh, sw = _pair(node.attrs["stride"], node.id, "stride")
            ph, pw = _pair(node.attrs["padding"], node.id, "padding")
            if 2 * ph > kh or 2 * pw > kw:
                raise ShapeMismatchError(f"padding {ph}x{pw} exceeds half the kernel {kh}x{kw}")
            ho = (h + 2 * ph - kh) // sh + 1
            wo = (w + 2 * pw - kw) // sw + 1
            if ho < 1 or wo < 1:
                raise ShapeMismatchError(f"window does not fit input {c}x{h}x{w}")
            return (c, ho, wo)
        if k == "batchnorm":
            c = in_shapes[0][0]
            if c != node.attrs["channels"]:
                raise ShapeMismatchError(f"expects {node.attrs['channels']} channels, gets {c}")
            return in_shapes[0]
        if k == "concat":
            if not in_shapes:
                raise ShapeMismatchError("needs at least one input")
            spatial = {s[1:] for s in in_shapes}
            if len(spatial) > 1 or any(len(s) != 3 for s in in_shapes):
                raise ShapeMismatchError(f"inputs do not share spatial extents: {in_shapes}")
            return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]
        if k == "linear":
            (n,) = in_shapes[0]
            if n != node.attrs["in_features"]:
                raise ShapeMismatchError(
                    f"expects {node.attrs['in_features']} input features, gets {n}"
                )
            return (node.attrs["out_features"],)
    except ShapeMismatchError as exc:
        raise GraphError(f"shape propagation failed at node '{node.id}' ({k}): {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise GraphError(f"shape propagation failed at node '{node.id}' ({k}): {exc}") from exc
    raise GraphError(f"node '{node.id}': unknown op_kind '{k}'")


def _validate_node(raw: dict, index: int) -> NodeSpec:
    if not isinstance(raw, dict):
        raise GraphError(f"nodes[{index}] is not an object")
    node_id = raw.get("id")
    if not isinstance(node_id, str) or not node_id:
        raise GraphError(f"nodes[{index}] is missing a string 'id'")
    kind = raw.get("op_kind")
    if kind not in OP_KINDS:
        raise GraphError(
            f"node '{node_id}': op_kind {kind!r} not one of {sorted(OP_KINDS)}"
        )
    inputs = raw.get("inputs", [])
    if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
        raise GraphError(f"node '{node_id}': 'inputs' must be a list of node ids")
    attrs = raw.get("attrs", {})
    if not isinstance(attrs, dict):
        raise GraphError(f"node '{node_id}': 'attrs' must be an object")
    for key in _REQUIRED_ATTRS.get(kind, ()):
        if key not in attrs:
            raise GraphError(f"node '{node_id}' ({kind}): missing required attr '{key}'")
    weight_keys = raw.get("weight_keys", {})
    if not isinstance(weight_keys, dict):
        raise GraphError(f"node '{node_id}': 'weight_keys' must be an object")
    roles = _WEIGHT_ROLES.get(kind, ())
    for role in weight_keys:
        if role not in roles:
            raise GraphError(
                f"node '{node_id}' ({kind}): unexpected weight role '{role}'"
            )
    if kind == "batchnorm":
        missing = [r for r in roles if r not in weight_keys]
        if missing:
            raise GraphError(f"node '{node_id}' (batchnorm): missing weight roles {missing}")
    elif kind in ("conv", "linear"):
        if "weight" not in weight_keys:
            raise GraphError(f"node '{node_id}' ({kind}): missing weight role 'weight'")
        if attrs.get("bias", True) != ("bias" in weight_keys):
            raise GraphError(
                f"node '{node_id}' ({kind}): bias attr and 'bias' weight key disagree"
            )
    # input arity
    if kind == "input":
        if inputs:
            raise GraphError(f"node '{node_id}': input node must not have inputs")
    elif kind == "concat":
        if not inputs:
            raise GraphError(f"node '{node_id}': concat needs at least one input")
    elif len(inputs) != 1:
        raise GraphError(f"node '{node_id}' ({kind}): expects exactly one input, got {inputs}")
    return NodeSpec(node_id, kind, list(inputs), dict(attrs), dict(weight_keys))


def parse_graph(description: bytes | str) -> ModelGraph:
    """Parse and validate a JSON graph description; propagates shapes."""
    if isinstance(description, bytes):
        description = description.decode("utf-8")
    try:
        doc = json.loads(description)
    except json.JSONDecodeError as exc:
        raise GraphError(
            f"graph description is not valid JSON (line {exc.lineno}, col {exc.colno}): "
            f"{exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise GraphError("graph description must be a JSON object")
    for key in ("name", "input_shape", "nodes", "cut_points"):
        if key not in doc:
            raise GraphError(f"graph description missing top-level field '{key}'")
    name = doc["name"]
    shape = doc["input_shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(v, int) and v >= 1 for v in shape)
    ):
        raise GraphError(f"input_shape must be three positive ints (C,H,W), got {shape!r}")
    input_shape = (shape[0], shape[1], shape[2])

    nodes = [_validate_node(raw, i) for i, raw in enumerate(doc["nodes"])]
    if not nodes:
        raise GraphError("graph has no nodes")
    seen: set[str] = set()
    input_nodes = []
    for node in nodes:
        if node.id in seen:
            raise GraphError(f"duplicate node id '{node.id}'")
        for ref in node.inputs:
            if ref not in seen:
                raise GraphError(
                    f"node '{node.id}' references '{ref}' which is not declared before it"
                )
        seen.add(node.id)
        if node.op_kind == "input":
            input_nodes.append(node.id)
    if len(input_nodes) != 1:
        raise GraphError(f"graph must have exactly one input node, found {input_nodes}")

    cut_points = doc["cut_points"]
    if not isinstance(cut_points, dict):
        raise GraphError("cut_points must be an object mapping label -> node id")
    for label, node_id in cut_points.items():
        if node_id not in seen:
            raise GraphError(f"cut_point '{label}' references unknown node '{node_id}'")

    output_id = doc.get("output", nodes[-1].id)
    if output_id not in seen:
        raise GraphError(f"output references unknown node '{output_id}'")

    shapes: dict[str, tuple[int, ...]] = {}
    for node in nodes:
        if node.op_kind == "input":
            shapes[node.id] = input_shape
        else:
            shapes[node.id] = _propagate_shape(node, [shapes[i] for i in node.inputs])

    return ModelGraph(
        name=str(name),
        input_shape=input_shape,
        nodes=nodes,
        cut_points=dict(cut_points),
        output_id=output_id,
        shapes=shapes,
    )


def load_graph(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return parse_graph(fh.read())


BUNDLED_GRAPHS = ("vgg19", "inception_v3", "smallnet")


def bundled_graph(name: str) -> ModelGraph:
    """Load one of the graph descriptions shipped with the package
    (``vgg19``, ``inception_v3``, ``smallnet``)."""
    ref = resources.files("cutprobe") / "graphs" / f"{name}.graph.json"
    try:
        data = ref.read_bytes()
    except FileNotFoundError:
        raise GraphError(f"no bundled graph named '{name}'") from None
    return parse_graph(data)


def ancestors(graph: ModelGraph, node_id: str) -> set[str]:
    """The node itself plus every transitive input."""
    by_id = {n.id: n for n in graph.nodes}
    if node_id not in by_id:
        raise GraphError(f"graph '{graph.name}' has no node '{node_id}'")
    keep: set[str] = set()
    stack = [node_id]
    while stack:
        current = stack.pop()
        if current in keep:
            continue
        keep.add(current)
        stack.extend(by_id[current].inputs)
    return keep


def truncate_at(graph: ModelGraph, cut_point: str) -> ModelGraph:
    """Graph restricted to the ancestor closure of a registered cut-point."""
    if cut_point not in graph.cut_points:
        raise GraphError(
            f"unknown cut-point '{cut_point}' for graph '{graph.name}'; "
            f"valid labels: {sorted(graph.cut_points)}"
        )
    cut_node = graph.cut_points[cut_point]
    keep = ancestors(graph, cut_node)
    nodes = [n for n in graph.nodes if n.id in keep]
    return ModelGraph(
        name=graph.name,
        input_shape=graph.input_shape,
        nodes=nodes,
        cut_points={l: nid for l, nid in graph.cut_points.items() if nid in keep},
        output_id=cut_node,
        shapes={nid: shape for nid, shape in graph.shapes.items() if nid in keep},
    )


def _node_param_counts(node: NodeSpec) -> tuple[int, int]:
    """(learned, non_learned) parameter counts from declared geometry."""
    a = node.attrs
    if node.op_kind == "conv":
        kh, kw = a["kernel"]
        learned = a["out_channels"] * a["in_channels"] * kh * kw
        if a.get("bias", True):
            learned += a["out_channels"]
        return learned, 0
    if node.op_kind == "batchnorm":
        # gamma/beta are trained; running statistics ship with checkpoints
        return 2 * a["channels"], 2 * a["channels"]
    if node.op_kind == "linear":
        learned = a["out_features"] * a["in_features"]
        if a.get("bias", True):
            learned += a["out_features"]
        return learned, 0
    return 0, 0


def param_counts(graph: ModelGraph) -> tuple[int, int]:
    """(learned, non_learned) totals over all nodes."""
    learned = 0
    non_learned = 0
    for node in graph.nodes:
        l, n = _node_param_counts(node)
        learned += l
        non_learned += n
    return learned, non_learned


def count_params(graph: ModelGraph) -> int:
    """Total learned parameters (kernels, biases, batchnorm scale/shift)."""
    return param_counts(graph)[0]


def _expected_weight_shapes(node: NodeSpec) -> dict[str, tuple[int, ...]]:
    a = node.attrs
    if node.op_kind == "conv":
        kh, kw = a["kernel"]
        shapes = {"weight": (a["out_channels"], a["in_channels"], kh, kw)}
        if a.get("bias", True):
            shapes["bias"] = (a["out_channels"],)
        return shapes
    if node.op_kind == "batchnorm":
        c = (a["channels"],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    if node.op_kind == "linear":
        shapes = {"weight": (a["out_features"], a["in_features"])}
        if a.get("bias", True):
            shapes["bias"] = (a["out_features"],)
        return shapes
    return {}


def load_weights(container: bytes, graph: ModelGraph) -> WeightStore:
    """Parse a weight container and validate it against the graph.

    Every weight key referenced by the graph must resolve to a tensor of
    the node's declared geometry.
    """
    store = parse_weights(container)
    validate_weights(store, graph)
    return store


def validate_weights(store: WeightStore, graph: ModelGraph) -> None:
    for node in graph.nodes:
        expected = _expected_weight_shapes(node)
        for role, shape in expected.items():
            key = node.weight_keys.get(role)
            if key is None:
                raise GraphError(
                    f"node '{node.id}' declares no weight key for role '{role}'"
                )
            if key not in store:
                raise GraphError(
                    f"weight container is missing tensor '{key}' "
                    f"(role '{role}' of node '{node.id}')"
                )
            found = tuple(store[key].shape)
            if found != shape:
                raise GraphError(
                    f"tensor '{key}' has shape {found}, node '{node.id}' expects {shape}"
                )


def generate_random_weights(graph: ModelGraph, seed: int) -> WeightStore:
    """Deterministic He-style random weights for every node of the graph.

    Used for desk-scale experiments where no pretrained checkpoint is
    involved: conv/linear weights are normal with std sqrt(2/fan_in),
    biases zero, batchnorm at identity with unit running variance.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    store = WeightStore()
    for node in graph.nodes:
        a = node.attrs
        if node.op_kind == "conv":
            kh, kw = a["kernel"]
            fan_in = a["in_channels"] * kh * kw
            shape = (a["out_channels"], a["in_channels"], kh, kw)
            store[node.weight_keys["weight"]] = rng.normal(
                0.0, math.sqrt(2.0 / fan_in), size=shape
            ).astype(np.float32)
            if a.get("bias", True):
                store[node.weight_keys["bias"]] = np.zeros(a["out_channels"], dtype=np.float32)
        elif node.op_kind == "linear":
            fan_in = a["in_features"]
            store[node.weight_keys["weight"]] = rng.normal(
                0.0, math.sqrt(1.0 / fan_in), size=(a["out_features"], fan_in)
            ).astype(np.float32)
            if a.get("bias", True):
                store[node.weight_keys["bias"]] = np.zeros(a["out_features"], dtype=np.float32)
        elif node.op_kind == "batchnorm":
            c = a["channels"]
            store[node.weight_keys["gamma"]] = np.ones(c, dtype=np.float32)
            store[node.weight_keys["beta"]] = np.zeros(c, dtype=np.float32)
            store[node.weight_keys["running_mean"]] = np.zeros(c, dtype=np.float32)
            store[node.weight_keys["running_var"]] = np.ones(c, dtype=np.float32)
    return store


def _run_node(node: NodeSpec, xs: list[np.ndarray], store: WeightStore) -> np.ndarray:
    a = node.attrs
    k = node.op_kind
    if k == "relu":
        return ops.relu(xs[0])
    if k == "conv":
        params = ops.ConvParams(
            weights=store[node.weight_keys["weight"]],
            bias=store[node.weight_keys["bias"]] if a.get("bias", True) else None,
            stride=tuple(a["stride"]),
            padding=tuple(a["padding"]),
        )
        return ops.conv2d(xs[0], params)
    if k == "maxpool":
        return ops.maxpool2d(xs[0], tuple(a["kernel"]), tuple(a["stride"]), tuple(a["padding"]))
    if k == "avgpool":
        return ops.avgpool2d(
            xs[0],
            tuple(a["kernel"]),
            tuple(a["stride"]),
            tuple(a["padding"]),
            include_pad=a.get("include_pad", False),
        )
    if k == "batchnorm":
        params = ops.BatchNormParams(
            gamma=store[node.weight_keys["gamma"]],
            beta=store[node.weight_keys["beta"]],
            running_mean=store[node.weight_keys["running_mean"]],
            running_var=store[node.weight_keys["running_var"]],
            epsilon=a.get("epsilon", 1e-3),
        )
        return ops.batchnorm_infer(xs[0], params)
    if k == "concat":
        return ops.concat_channels(xs)
    if k == "linear":
        bias = (
            store[node.weight_keys["bias"]]
            if a.get("bias", True)
            else np.zeros(a["out_features"], dtype=np.float32)
        )
        return ops.linear(xs[0], store[node.weight_keys["weight"]], bias)
    if k == "flatten":
        return ops.flatten(xs[0])
    raise GraphError(f"cannot execute op_kind '{k}'")


def forward(
    graph: ModelGraph,
    store: WeightStore,
    x: np.ndarray,
    outputs=None,
):
    """Evaluate the graph on one input tensor.

    With ``outputs=None`` returns the tensor at ``graph.output_id``;
    with a collection of node ids returns ``{node_id: tensor}`` for those
    ids, evaluating only their ancestor closure.
    """
    x = ops.as_tensor(x)
    if tuple(x.shape) != graph.input_shape:
        raise ShapeMismatchError(
            f"input shape {tuple(x.shape)} does not match graph input "
            f"{graph.input_shape}"
        )
    if outputs is None:
        wanted = {graph.output_id}
    else:
        wanted = set(outputs)
        for node_id in wanted:
            if node_id not in graph.shapes:
                raise GraphError(f"requested output '{node_id}' is not in the graph")
    needed = set()
    for node_id in wanted:
        needed |= ancestors(graph, node_id)

    values: dict[str, np.ndarray] = {}
    # remaining consumer count per node lets finished activations be freed
    consumers: dict[str, int] = {nid: 0 for nid in needed}
    for node in graph.nodes:
        if node.id in needed:
            for ref in node.inputs:
                consumers[ref] += 1
    for node_id in wanted:
        consumers[node_id] += 1

    result: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.id not in needed:
            continue
        if node.op_kind == "input":
            value = x
        else:
            value = _run_node(node, [values[i] for i in node.inputs], store)
        if tuple(value.shape) != graph.shapes[node.id]:
            raise GraphError(
                f"node '{node.id}' produced shape {tuple(value.shape)}, "
                f"propagation predicted {graph.shapes[node.id]}"
            )
        values[node.id] = value
        if node.id in wanted:
            result[node.id] = value
        for ref in node.inputs:
            consumers[ref] -= 1
            if consumers[ref] == 0:
                del values[ref]
    if outputs is None:
        return result[graph.output_id]
    return result
