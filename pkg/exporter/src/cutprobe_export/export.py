"""Convert a torchvision checkpoint into a toolkit weight container plus a
reference-activation fixture.

The fixture holds one seeded uniform-noise input, the source model's
activation at every registered cut-point, and the final logits, so the
toolkit's inference engine can be cross-checked against the source
ecosystem without the checkpoint or any dataset image.
"""

from pathlib import Path

import numpy as np

from cutprobe import FeatureRecord, bundled_graph, cache_write, validate_weights, write_weights
from cutprobe.data import IMAGENET_MEAN, IMAGENET_STD
from cutprobe.errors import GraphError

from .maps import ExportError, build_export_map, cut_modules

FIXTURE_SEED = 0xF1C5


def _randomize(model, seed: int):
    """Seeded re-initialization with bounded activation scales.

    He-scaled conv/linear weights keep variance stable through ReLU, and
    batchnorm statistics are randomized but non-degenerate, so deep
    activations stay O(1)-O(100) and the fixture tolerance means the same
    thing it does for trained checkpoints. Trained nets are well-scaled by
    construction; default torch init is not (inference-mode batchnorm with
    untrained running stats lets magnitudes compound layer over layer).
    """
    import math

    import torch
    from torch import nn

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight.shape[1:].numel()
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-0.05, 0.05, generator=gen)
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.uniform_(0.5, 1.5, generator=gen)
                module.bias.uniform_(-0.3, 0.3, generator=gen)
                module.running_mean.normal_(0.0, 0.2, generator=gen)
                module.running_var.uniform_(0.5, 2.0, generator=gen)


def build_model(architecture: str, pretrained: bool, seed: int):
    """Construct the source model in eval mode on one thread.

    With pretrained=False the weights are torch-side random from ``seed``,
    which exercises the full export path hermetically: name mapping and
    kernel agreement do not depend on the particular weight values.
    """
    import torch
    import torchvision.models as tvm

    torch.set_num_threads(1)
    try:
        if architecture == "vgg19":
            weights = tvm.VGG19_Weights.IMAGENET1K_V1 if pretrained else None
            model = tvm.vgg19(weights=weights)
        else:
            weights = tvm.Inception_V3_Weights.IMAGENET1K_V1 if pretrained else None
            # transform_input rescales channels inside the model; the graph
            # expects plain normalized input, so force it off either way
            model = tvm.inception_v3(
                weights=weights, transform_input=False, init_weights=False
            )
    except Exception as exc:  # download failure, no cache, bad env
        raise ExportError(
            f"cannot retrieve {architecture} checkpoint: {exc}"
        ) from exc
    if not pretrained:
        _randomize(model, seed)
    model.eval()
    return model


def collect_tensors(state: dict, architecture: str) -> dict[str, np.ndarray]:
    """Apply the export map to a source state dict.

    Returns toolkit-named float32 arrays in map order. Raises ExportError
    for a source parameter the map needs but the state dict lacks.
    """
    export_map = build_export_map(architecture)
    out: dict[str, np.ndarray] = {}
    for source, toolkit_name in export_map.pairs:
        if source not in state:
            raise ExportError(
                f"{architecture}: unmapped parameter: checkpoint has no '{source}' "
                f"(needed for '{toolkit_name}')"
            )
        tensor = state[source]
        out[toolkit_name] = np.ascontiguousarray(
            tensor.detach().cpu().numpy().astype(np.float32)
        )
    return out


def _noise_input(input_shape) -> np.ndarray:
    """Deterministic uniform-noise image, ImageNet-normalized."""
    c, h, w = input_shape
    rng = np.random.default_rng(np.random.SeedSequence(FIXTURE_SEED))
    pixels = rng.uniform(0.0, 1.0, (c, h, w)).astype(np.float32)
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(IMAGENET_STD, dtype=np.float32)[:, None, None]
    return ((pixels - mean) / std).astype(np.float32)


def capture_fixture(model, architecture: str, input_shape) -> list[FeatureRecord]:
    """Run the noise input through the source model, recording the
    activation at every registered cut-point plus the logits."""
    import torch

    x = _noise_input(input_shape)
    captured: dict[str, np.ndarray] = {}
    hooks = []
    for label, module_path in cut_modules(architecture).items():
        module = model.get_submodule(module_path)

        def hook(mod, args, output, label=label):
            captured[label] = output.detach().squeeze(0).numpy().astype(np.float32)

        hooks.append(module.register_forward_hook(hook))
    try:
        with torch.no_grad():
            logits = model(torch.from_numpy(x).unsqueeze(0))
    finally:
        for h in hooks:
            h.remove()

    records = [
        FeatureRecord(
            image_id="input", subject_id="fixture", label=0,
            cut_point="fixture", vector=x.reshape(-1),
        )
    ]
    for label in cut_modules(architecture):
        if label not in captured:
            raise ExportError(f"{architecture}: cut-point '{label}' produced no activation")
        records.append(
            FeatureRecord(
                image_id=label, subject_id="fixture", label=0,
                cut_point="fixture", vector=captured[label].reshape(-1),
            )
        )
    records.append(
        FeatureRecord(
            image_id="logits", subject_id="fixture", label=0,
            cut_point="fixture", vector=logits.detach().squeeze(0).numpy().astype(np.float32),
        )
    )
    return records


def export_weights(
    architecture: str,
    out_dir,
    pretrained: bool = True,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write <arch>.cpwt and <arch>.fixture.cpfc into ``out_dir``.

    The container is validated against the bundled graph before writing;
    a source/graph shape disagreement aborts the export.
    """
    graph = bundled_graph(architecture)  # validates the architecture name
    model = build_model(architecture, pretrained, seed)
    state = {name: t for name, t in model.state_dict().items()}
    tensors = collect_tensors(state, architecture)

    from cutprobe import WeightStore

    store = WeightStore(tensors)
    try:
        validate_weights(store, graph)
    except GraphError as exc:
        raise ExportError(f"{architecture}: shape mismatch against graph: {exc}") from exc

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    container_path = out_dir / f"{architecture}.cpwt"
    fixture_path = out_dir / f"{architecture}.fixture.cpfc"

    write_weights(container_path, tensors)
    records = capture_fixture(model, architecture, graph.input_shape)
    cache_write(fixture_path, architecture, "fixture", records)
    return container_path, fixture_path
