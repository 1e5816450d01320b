# SPDX-License-Identifier: Apache-2.0
"""Independent reference tracer.

Parses a .nnw file, runs the network with torch in float64 and writes an
.atrc trace (channel granularity, pre-activations included). The Rust test
suite compares its own traces against the files this script produces.

Usage: python3 tools/reference_trace.py MODEL.nnw IMAGES LABELS OUT.atrc
"""

import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


def read_nnw(data):
    if data[:4] != b"NNWT":
        raise ValueError("not an .nnw file")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != 1:
        raise ValueError(f"unsupported .nnw version {version}")
    header = json.loads(data[10 : 10 + hlen])
    pos = 10 + hlen
    params = []
    for layer in header["layers"]:
        if layer["kind"] == "dense":
            wshape = (layer["outputs"], layer["inputs"])
            bn = layer["outputs"]
        elif layer["kind"] == "conv2d":
            k = layer["kernel"]
            wshape = (layer["out_channels"], layer["in_channels"], k, k)
            bn = layer["out_channels"]
        else:
            params.append(None)
            continue
        wn = int(np.prod(wshape))
        w = np.frombuffer(data, dtype="<f4", count=wn, offset=pos).reshape(wshape)
        pos += 4 * wn
        b = np.frombuffer(data, dtype="<f4", count=bn, offset=pos)
        pos += 4 * bn
        params.append((torch.tensor(w, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)))
    if pos != len(data):
        raise ValueError("trailing bytes in .nnw")
    return header, params


def read_idx(path):
    data = Path(path).read_bytes()
    magic, count = struct.unpack(">II", data[:8])
    if magic == 0x803:
        rows, cols = struct.unpack(">II", data[8:16])
        return np.frombuffer(data[16:], dtype=np.uint8).reshape(count, rows, cols)
    return np.frombuffer(data[8:], dtype=np.uint8)


def neuron_values(t):
    # Feature maps collapse to one value per channel (spatial mean).
    return t.mean(dim=(1, 2)) if t.dim() == 3 else t


def trace_one(header, params, x):
    per_layer = []
    for layer, p in zip(header["layers"], params):
        kind = layer["kind"]
        if kind == "dense":
            z = p[0] @ x.reshape(-1) + p[1]
        elif kind == "conv2d":
            z = F.conv2d(x.unsqueeze(0), p[0], p[1], stride=layer["stride"]).squeeze(0)
        elif kind == "avgpool2d":
            z = F.avg_pool2d(x.unsqueeze(0), layer["kernel"], layer["stride"]).squeeze(0)
        elif kind == "maxpool2d":
            z = F.max_pool2d(x.unsqueeze(0), layer["kernel"], layer["stride"]).squeeze(0)
        elif kind in ("relu", "flatten"):
            z = x if kind == "relu" else x.reshape(-1)
        else:
            raise ValueError(f"unknown layer kind {kind}")
        post = torch.relu(z) if kind == "relu" or layer.get("activation") == "relu" else z
        per_layer.append([neuron_values(post), neuron_values(z)])
        x = post
    # A trainable layer without its own activation, directly followed by a
    # relu layer, reports the rectified value as post.
    for i, layer in enumerate(header["layers"][:-1]):
        if (
            layer["kind"] in ("dense", "conv2d")
            and layer.get("activation", "none") == "none"
            and header["layers"][i + 1]["kind"] == "relu"
        ):
            per_layer[i][0] = per_layer[i + 1][0]
    return per_layer


def main():
    model_path, images, labels, out = sys.argv[1:5]
    raw = Path(model_path).read_bytes()
    header, params = read_nnw(raw)
    imgs = read_idx(images)
    labs = read_idx(labels)
    records = []
    with torch.no_grad():
        for img in imgs:
            x = torch.tensor(img, dtype=torch.float64).unsqueeze(0) / 255.0
            records.append(trace_one(header, params, x))
    widths = [len(post) for post, _ in records[0]]
    head = json.dumps(
        {
            "fingerprint": hashlib.sha256(raw).hexdigest(),
            "layer_widths": widths,
            "record_count": len(records),
            "has_pre": True,
            "granularity": "channel",
        },
        separators=(",", ":"),
    ).encode()
    buf = bytearray(b"ATRC" + struct.pack("<HI", 1, len(head)) + head)
    for i, (rec, label) in enumerate(zip(records, labs)):
        buf += struct.pack("<Ii", i, int(label))
        for post, pre in rec:
            for v in (post, pre):
                buf += struct.pack("<I", len(v)) + v.numpy().astype("<f4").tobytes()
    Path(out).write_bytes(bytes(buf))


if __name__ == "__main__":
    main()
