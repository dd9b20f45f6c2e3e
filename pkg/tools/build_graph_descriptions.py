#!/usr/bin/env python3
"""Regenerate the bundled graph description files.

Run from the repository root:

    python tools/build_graph_descriptions.py

Writes vgg19.graph.json, inception_v3.graph.json, and smallnet.graph.json
into src/cutprobe/graphs/. The layer geometry follows the standard
published architectures; node and weight-key names mirror the module
names used by mainstream checkpoint releases so converters stay mechanical.
"""

from __future__ import annotations

import json
from pathlib import Path

OUT_DIR = Path(__file__).resolve().parent.parent / "src" / "cutprobe" / "graphs"


class Builder:
    def __init__(self, name, input_shape):
        self.doc = {
            "name": name,
            "input_shape": list(input_shape),
            "nodes": [{"id": "input", "op_kind": "input"}],
            "cut_points": {},
        }

    def add(self, node_id, op_kind, inputs, attrs=None, weight_keys=None):
        node = {"id": node_id, "op_kind": op_kind, "inputs": inputs}
        if attrs:
            node["attrs"] = attrs
        if weight_keys:
            node["weight_keys"] = weight_keys
        self.doc["nodes"].append(node)
        return node_id

    def conv(self, node_id, src, cin, cout, kernel, stride=(1, 1), padding=(0, 0), bias=True):
        attrs = {
            "out_channels": cout,
            "in_channels": cin,
            "kernel": list(kernel),
            "stride": list(stride),
            "padding": list(padding),
            "bias": bias,
        }
        keys = {"weight": f"{node_id}.weight"}
        if bias:
            keys["bias"] = f"{node_id}.bias"
        return self.add(node_id, "conv", [src], attrs, keys)

    def maxpool(self, node_id, src, kernel, stride, padding=(0, 0)):
        return self.add(
            node_id,
            "maxpool",
            [src],
            {"kernel": list(kernel), "stride": list(stride), "padding": list(padding)},
        )

    def avgpool(self, node_id, src, kernel, stride, padding=(0, 0), include_pad=False):
        attrs = {"kernel": list(kernel), "stride": list(stride), "padding": list(padding)}
        if include_pad:
            attrs["include_pad"] = True
        return self.add(node_id, "avgpool", [src], attrs)

    def relu(self, node_id, src):
        return self.add(node_id, "relu", [src])

    def batchnorm(self, node_id, src, channels, epsilon=0.001):
        return self.add(
            node_id,
            "batchnorm",
            [src],
            {"channels": channels, "epsilon": epsilon},
            {
                "gamma": f"{node_id}.gamma",
                "beta": f"{node_id}.beta",
                "running_mean": f"{node_id}.running_mean",
                "running_var": f"{node_id}.running_var",
            },
        )

    def concat(self, node_id, srcs):
        return self.add(node_id, "concat", list(srcs))

    def linear(self, node_id, src, nin, nout):
        return self.add(
            node_id,
            "linear",
            [src],
            {"in_features": nin, "out_features": nout, "bias": True},
            {"weight": f"{node_id}.weight", "bias": f"{node_id}.bias"},
        )

    def flatten(self, node_id, src):
        return self.add(node_id, "flatten", [src])

    def finish(self, cut_points, output):
        self.doc["cut_points"] = cut_points
        self.doc["output"] = output
        return self.doc


def build_vgg19():
    b = Builder("vgg19", (3, 224, 224))
    blocks = [(1, 2, 64), (2, 2, 128), (3, 4, 256), (4, 4, 512), (5, 4, 512)]
    prev, cin = "input", 3
    for block, n_convs, cout in blocks:
        for i in range(1, n_convs + 1):
            cid = f"conv{block}_{i}"
            b.conv(cid, prev, cin, cout, (3, 3), (1, 1), (1, 1))
            prev = b.relu(f"{cid}.relu", cid)
            cin = cout
        prev = b.maxpool(f"pool{block}", prev, (2, 2), (2, 2))
    prev = b.flatten("flatten", prev)
    b.linear("fc6", prev, 512 * 7 * 7, 4096)
    prev = b.relu("fc6.relu", "fc6")
    b.linear("fc7", prev, 4096, 4096)
    prev = b.relu("fc7.relu", "fc7")
    prev = b.linear("fc8", prev, 4096, 1000)
    cuts = {
        "A_V": "conv2_2.relu",
        "B_V": "conv3_4.relu",
        "C_V": "conv4_4.relu",
        "D_V": "conv5_4.relu",
        "E_V": "fc6.relu",
    }
    return b.finish(cuts, "fc8")


def basic_conv(b, name, src, cin, cout, kernel, stride=(1, 1), padding=(0, 0)):
    """conv (no bias) + batchnorm + relu, the Inception-v3 building block."""
    b.conv(f"{name}.conv", src, cin, cout, kernel, stride, padding, bias=False)
    b.batchnorm(f"{name}.bn", f"{name}.conv", cout)
    return b.relu(f"{name}.relu", f"{name}.bn")


def inception_a(b, name, src, cin, pool_features):
    b1 = basic_conv(b, f"{name}.branch1x1", src, cin, 64, (1, 1))
    b5 = basic_conv(b, f"{name}.branch5x5_1", src, cin, 48, (1, 1))
    b5 = basic_conv(b, f"{name}.branch5x5_2", b5, 48, 64, (5, 5), padding=(2, 2))
    d = basic_conv(b, f"{name}.branch3x3dbl_1", src, cin, 64, (1, 1))
    d = basic_conv(b, f"{name}.branch3x3dbl_2", d, 64, 96, (3, 3), padding=(1, 1))
    d = basic_conv(b, f"{name}.branch3x3dbl_3", d, 96, 96, (3, 3), padding=(1, 1))
    p = b.avgpool(f"{name}.pool", src, (3, 3), (1, 1), (1, 1), include_pad=True)
    p = basic_conv(b, f"{name}.branch_pool", p, cin, pool_features, (1, 1))
    return b.concat(f"{name}.concat", [b1, b5, d, p]), 64 + 64 + 96 + pool_features


def inception_b(b, name, src, cin):
    b3 = basic_conv(b, f"{name}.branch3x3", src, cin, 384, (3, 3), stride=(2, 2))
    d = basic_conv(b, f"{name}.branch3x3dbl_1", src, cin, 64, (1, 1))
    d = basic_conv(b, f"{name}.branch3x3dbl_2", d, 64, 96, (3, 3), padding=(1, 1))
    d = basic_conv(b, f"{name}.branch3x3dbl_3", d, 96, 96, (3, 3), stride=(2, 2))
    p = b.maxpool(f"{name}.pool", src, (3, 3), (2, 2))
    return b.concat(f"{name}.concat", [b3, d, p]), 384 + 96 + cin


def inception_c(b, name, src, cin, c7):
    b1 = basic_conv(b, f"{name}.branch1x1", src, cin, 192, (1, 1))
    b7 = basic_conv(b, f"{name}.branch7x7_1", src, cin, c7, (1, 1))
    b7 = basic_conv(b, f"{name}.branch7x7_2", b7, c7, c7, (1, 7), padding=(0, 3))
    b7 = basic_conv(b, f"{name}.branch7x7_3", b7, c7, 192, (7, 1), padding=(3, 0))
    d = basic_conv(b, f"{name}.branch7x7dbl_1", src, cin, c7, (1, 1))
    d = basic_conv(b, f"{name}.branch7x7dbl_2", d, c7, c7, (7, 1), padding=(3, 0))
    d = basic_conv(b, f"{name}.branch7x7dbl_3", d, c7, c7, (1, 7), padding=(0, 3))
    d = basic_conv(b, f"{name}.branch7x7dbl_4", d, c7, c7, (7, 1), padding=(3, 0))
    d = basic_conv(b, f"{name}.branch7x7dbl_5", d, c7, 192, (1, 7), padding=(0, 3))
    p = b.avgpool(f"{name}.pool", src, (3, 3), (1, 1), (1, 1), include_pad=True)
    p = basic_conv(b, f"{name}.branch_pool", p, cin, 192, (1, 1))
    return b.concat(f"{name}.concat", [b1, b7, d, p]), 768


def inception_d(b, name, src, cin):
    b3 = basic_conv(b, f"{name}.branch3x3_1", src, cin, 192, (1, 1))
    b3 = basic_conv(b, f"{name}.branch3x3_2", b3, 192, 320, (3, 3), stride=(2, 2))
    b7 = basic_conv(b, f"{name}.branch7x7x3_1", src, cin, 192, (1, 1))
    b7 = basic_conv(b, f"{name}.branch7x7x3_2", b7, 192, 192, (1, 7), padding=(0, 3))
    b7 = basic_conv(b, f"{name}.branch7x7x3_3", b7, 192, 192, (7, 1), padding=(3, 0))
    b7 = basic_conv(b, f"{name}.branch7x7x3_4", b7, 192, 192, (3, 3), stride=(2, 2))
    p = b.maxpool(f"{name}.pool", src, (3, 3), (2, 2))
    return b.concat(f"{name}.concat", [b3, b7, p]), 320 + 192 + cin


def inception_e(b, name, src, cin):
    b1 = basic_conv(b, f"{name}.branch1x1", src, cin, 320, (1, 1))
    b3 = basic_conv(b, f"{name}.branch3x3_1", src, cin, 384, (1, 1))
    b3a = basic_conv(b, f"{name}.branch3x3_2a", b3, 384, 384, (1, 3), padding=(0, 1))
    b3b = basic_conv(b, f"{name}.branch3x3_2b", b3, 384, 384, (3, 1), padding=(1, 0))
    b3 = b.concat(f"{name}.branch3x3.concat", [b3a, b3b])
    d = basic_conv(b, f"{name}.branch3x3dbl_1", src, cin, 448, (1, 1))
    d = basic_conv(b, f"{name}.branch3x3dbl_2", d, 448, 384, (3, 3), padding=(1, 1))
    da = basic_conv(b, f"{name}.branch3x3dbl_3a", d, 384, 384, (1, 3), padding=(0, 1))
    db = basic_conv(b, f"{name}.branch3x3dbl_3b", d, 384, 384, (3, 1), padding=(1, 0))
    d = b.concat(f"{name}.branch3x3dbl.concat", [da, db])
    p = b.avgpool(f"{name}.pool", src, (3, 3), (1, 1), (1, 1), include_pad=True)
    p = basic_conv(b, f"{name}.branch_pool", p, cin, 192, (1, 1))
    return b.concat(f"{name}.concat", [b1, b3, d, p]), 320 + 768 + 768 + 192


def build_inception_v3():
    b = Builder("inception_v3", (3, 299, 299))
    x = basic_conv(b, "Conv2d_1a_3x3", "input", 3, 32, (3, 3), stride=(2, 2))
    x = basic_conv(b, "Conv2d_2a_3x3", x, 32, 32, (3, 3))
    x = basic_conv(b, "Conv2d_2b_3x3", x, 32, 64, (3, 3), padding=(1, 1))
    x = b.maxpool("maxpool1", x, (3, 3), (2, 2))
    x = basic_conv(b, "Conv2d_3b_1x1", x, 64, 80, (1, 1))
    x = basic_conv(b, "Conv2d_4a_3x3", x, 80, 192, (3, 3))
    a_i = x
    x = b.maxpool("maxpool2", x, (3, 3), (2, 2))
    x, c = inception_a(b, "Mixed_5b", x, 192, 32)
    x, c = inception_a(b, "Mixed_5c", x, c, 64)
    x, c = inception_a(b, "Mixed_5d", x, c, 64)
    b_i = x
    x, c = inception_b(b, "Mixed_6a", x, c)
    x, c = inception_c(b, "Mixed_6b", x, c, 128)
    x, c = inception_c(b, "Mixed_6c", x, c, 160)
    x, c = inception_c(b, "Mixed_6d", x, c, 160)
    x, c = inception_c(b, "Mixed_6e", x, c, 192)
    c_i = x
    x, c = inception_d(b, "Mixed_7a", x, c)
    x, c = inception_e(b, "Mixed_7b", x, c)
    x, c = inception_e(b, "Mixed_7c", x, c)
    d_i = x
    x = b.avgpool("avgpool", x, (8, 8), (1, 1))
    x = b.flatten("flatten", x)
    x = b.linear("fc", x, 2048, 1000)
    cuts = {"A_I": a_i, "B_I": b_i, "C_I": c_i, "D_I": d_i}
    return b.finish(cuts, "fc")


def build_smallnet():
    """Six-layer desk-scale net (three conv+pool stages) for 64x64 inputs."""
    b = Builder("smallnet", (3, 64, 64))
    prev, cin = "input", 3
    for i, cout in enumerate([8, 16, 32], start=1):
        cid = f"conv{i}"
        b.conv(cid, prev, cin, cout, (3, 3), (1, 1), (1, 1))
        r = b.relu(f"{cid}.relu", cid)
        prev = b.maxpool(f"pool{i}", r, (2, 2), (2, 2))
        cin = cout
    cuts = {"A_S": "conv1.relu", "B_S": "conv2.relu", "C_S": "conv3.relu"}
    return b.finish(cuts, "pool3")


def main():
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for doc in (build_vgg19(), build_inception_v3(), build_smallnet()):
        path = OUT_DIR / f"{doc['name']}.graph.json"
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        print(f"wrote {path} ({len(doc['nodes'])} nodes)")


if __name__ == "__main__":
    main()
