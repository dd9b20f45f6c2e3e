"""Parameter name maps from torchvision checkpoints to toolkit containers.

Each map is an ordered list of (source name, toolkit name) pairs covering
exactly the tensors the bundled graph description requires. The map is
derived from the graph itself, so a graph edit that adds or drops a tensor
shows up here as a bijectivity failure instead of a silent export gap.
"""

from dataclasses import dataclass

from cutprobe import ModelGraph, bundled_graph

ARCHITECTURES = ("vgg19", "inception_v3")

# toolkit conv/linear node id -> torchvision module path
_VGG_SOURCE_MODULES = {
    "conv1_1": "features.0", "conv1_2": "features.2",
    "conv2_1": "features.5", "conv2_2": "features.7",
    "conv3_1": "features.10", "conv3_2": "features.12",
    "conv3_3": "features.14", "conv3_4": "features.16",
    "conv4_1": "features.19", "conv4_2": "features.21",
    "conv4_3": "features.23", "conv4_4": "features.25",
    "conv5_1": "features.28", "conv5_2": "features.30",
    "conv5_3": "features.32", "conv5_4": "features.34",
    "fc6": "classifier.0", "fc7": "classifier.3", "fc8": "classifier.6",
}

# batchnorm role -> torch parameter/buffer suffix
_BN_SUFFIX = {
    "gamma": "weight",
    "beta": "bias",
    "running_mean": "running_mean",
    "running_var": "running_var",
}

# cut-point label -> module holding the activation (the module's forward
# output IS the cut activation: torchvision BasicConv2d ends in relu, the
# Mixed blocks end in their concat, and the picked VGG indices are ReLUs)
VGG_CUT_MODULES = {
    "A_V": "features.8",
    "B_V": "features.17",
    "C_V": "features.26",
    "D_V": "features.35",
    "E_V": "classifier.1",
}
INCEPTION_CUT_MODULES = {
    "A_I": "Conv2d_4a_3x3",
    "B_I": "Mixed_5d",
    "C_I": "Mixed_6e",
    "D_I": "Mixed_7c",
}


class ExportError(Exception):
    """Raised when a checkpoint cannot be converted faithfully."""


@dataclass(frozen=True)
class ExportMap:
    """Ordered source-to-toolkit tensor name pairs for one architecture.

    Bijective over the graph's required tensors: every required toolkit
    name appears exactly once, and no source name is reused.
    """

    architecture: str
    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        sources = [s for s, _ in self.pairs]
        targets = [t for _, t in self.pairs]
        if len(set(sources)) != len(sources):
            raise ExportError(f"{self.architecture}: duplicate source names in export map")
        if len(set(targets)) != len(targets):
            raise ExportError(f"{self.architecture}: duplicate toolkit names in export map")


def required_keys(graph: ModelGraph) -> list[str]:
    """Toolkit tensor names the graph needs, in node order with a fixed
    per-node role order."""
    role_order = {"weight": 0, "bias": 1, "gamma": 0, "beta": 1,
                  "running_mean": 2, "running_var": 3}
    keys = []
    for node in graph.nodes:
        for role in sorted(node.weight_keys, key=lambda r: role_order[r]):
            keys.append((node, role, node.weight_keys[role]))
    return keys


def build_export_map(architecture: str) -> ExportMap:
    if architecture not in ARCHITECTURES:
        raise ExportError(
            f"unknown architecture '{architecture}'; expected one of {ARCHITECTURES}"
        )
    graph = bundled_graph(architecture)
    pairs = []
    for node, role, toolkit_name in required_keys(graph):
        if architecture == "vgg19":
            module = _VGG_SOURCE_MODULES.get(node.id)
            if module is None:
                raise ExportError(f"vgg19: no source module known for node '{node.id}'")
            source = f"{module}.{role}"
        else:
            if node.op_kind == "batchnorm":
                # toolkit key is '<module>.<role>'; swap the role suffix
                base = toolkit_name.rsplit(".", 1)[0]
                source = f"{base}.{_BN_SUFFIX[role]}"
            else:
                source = toolkit_name  # conv/linear names match the source
        pairs.append((source, toolkit_name))

    export_map = ExportMap(architecture, tuple(pairs))
    missing = set(k for _, _, k in required_keys(graph)) - set(t for _, t in pairs)
    if missing:
        raise ExportError(f"{architecture}: export map misses required tensors {sorted(missing)}")
    return export_map


def cut_modules(architecture: str) -> dict[str, str]:
    return VGG_CUT_MODULES if architecture == "vgg19" else INCEPTION_CUT_MODULES
