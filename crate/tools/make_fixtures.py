# SPDX-License-Identifier: Apache-2.0
"""Builds the fixture models and MNIST fixture files.

Usage: python3 tools/make_fixtures.py MNIST_DIR [--out fixtures] [--epochs 2]

MNIST_DIR holds the four raw IDX files (see scripts/fetch_mnist.sh).
Writes:
  fixtures/models/lenet_{5,6}layer.nnw     trained 5- and 6-layer LeNet variants
  fixtures/models/lenet5_fixture.nnw       trained 7-layer LeNet-5
  fixtures/mnist/t10k-*.gz                 full test split
  fixtures/mnist/train6k-*.gz              first 6000 training images
  fixtures/mnist/mini-*                    first 16 test images, uncompressed
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

NNW_MAGIC = b"NNWT"


def read_idx(path):
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    magic, count = struct.unpack(">II", data[:8])
    if magic == 0x803:
        rows, cols = struct.unpack(">II", data[8:16])
        return np.frombuffer(data[16:], dtype=np.uint8).reshape(count, rows, cols)
    return np.frombuffer(data[8:], dtype=np.uint8)


def idx_images(pixels):
    n, r, c = pixels.shape
    return struct.pack(">IIII", 0x803, n, r, c) + pixels.tobytes()


def idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + labels.tobytes()


def write_gz(path, payload):
    # mtime=0 keeps the archives reproducible.
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(payload)


# Architectures as (kind, params) lists mirroring the .nnw header.
ARCHS = {
    "lenet_5layer": [
        ("conv2d", dict(in_channels=1, out_channels=4, kernel=5, stride=1, activation="relu")),
        ("avgpool2d", dict(kernel=2, stride=2)),
        ("conv2d", dict(in_channels=4, out_channels=12, kernel=5, stride=1, activation="relu")),
        ("avgpool2d", dict(kernel=2, stride=2)),
        ("dense", dict(inputs=192, outputs=10, activation="none")),
    ],
    "lenet_6layer": [
        ("conv2d", dict(in_channels=1, out_channels=4, kernel=5, stride=1, activation="relu")),
        ("avgpool2d", dict(kernel=2, stride=2)),
        ("conv2d", dict(in_channels=4, out_channels=16, kernel=5, stride=1, activation="relu")),
        ("avgpool2d", dict(kernel=2, stride=2)),
        ("dense", dict(inputs=256, outputs=120, activation="relu")),
        ("dense", dict(inputs=120, outputs=10, activation="none")),
    ],
    "lenet5_fixture": [
        ("conv2d", dict(in_channels=1, out_channels=6, kernel=5, stride=1, activation="relu")),
        ("avgpool2d", dict(kernel=2, stride=2)),
        ("conv2d", dict(in_channels=6, out_channels=16, kernel=5, stride=1, activation="relu")),
        ("avgpool2d", dict(kernel=2, stride=2)),
        ("dense", dict(inputs=256, outputs=120, activation="relu")),
        ("dense", dict(inputs=120, outputs=84, activation="relu")),
        ("dense", dict(inputs=84, outputs=10, activation="none")),
    ],
}


def build(arch):
    mods = []
    for kind, p in arch:
        if kind == "conv2d":
            mods.append(nn.Conv2d(p["in_channels"], p["out_channels"], p["kernel"], p["stride"]))
        elif kind == "avgpool2d":
            mods.append(nn.AvgPool2d(p["kernel"], p["stride"]))
        elif kind == "dense":
            if not any(isinstance(m, nn.Flatten) for m in mods):
                mods.append(nn.Flatten())
            mods.append(nn.Linear(p["inputs"], p["outputs"]))
        if p.get("activation") == "relu":
            mods.append(nn.ReLU())
    return nn.Sequential(*mods)


def encode_nnw(name, arch, net):
    layers = [dict(kind=kind, **p) for kind, p in arch]
    header = json.dumps(
        dict(name=name, input_shape=[1, 28, 28], layers=layers), separators=(",", ":")
    ).encode()
    out = bytearray(NNW_MAGIC + struct.pack("<HI", 1, len(header)) + header)
    for m in net:
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            out += m.weight.detach().numpy().astype("<f4").tobytes()
            out += m.bias.detach().numpy().astype("<f4").tobytes()
    return bytes(out)


def train(net, x, y, epochs, seed):
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=g)
        for i in range(0, len(x), 128):
            idx = perm[i : i + 128]
            opt.zero_grad()
            loss_fn(net(x[idx]), y[idx]).backward()
            opt.step()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("mnist_dir", type=Path)
    ap.add_argument("--out", type=Path, default=Path("fixtures"))
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=20)
    args = ap.parse_args()

    src = args.mnist_dir
    train_x = read_idx(src / "train-images-idx3-ubyte")
    train_y = read_idx(src / "train-labels-idx1-ubyte")
    test_x = read_idx(src / "t10k-images-idx3-ubyte")
    test_y = read_idx(src / "t10k-labels-idx1-ubyte")

    data = args.out / "mnist"
    data.mkdir(parents=True, exist_ok=True)
    write_gz(data / "t10k-images-idx3-ubyte.gz", idx_images(test_x))
    write_gz(data / "t10k-labels-idx1-ubyte.gz", idx_labels(test_y))
    write_gz(data / "train6k-images-idx3-ubyte.gz", idx_images(train_x[:6000]))
    write_gz(data / "train6k-labels-idx1-ubyte.gz", idx_labels(train_y[:6000]))
    (data / "mini-images-idx3-ubyte").write_bytes(idx_images(test_x[:16]))
    (data / "mini-labels-idx1-ubyte").write_bytes(idx_labels(test_y[:16]))

    torch.set_num_threads(max(1, torch.get_num_threads()))
    x = torch.tensor(train_x, dtype=torch.float32).unsqueeze(1) / 255.0
    y = torch.tensor(train_y, dtype=torch.long)
    tx = torch.tensor(test_x, dtype=torch.float32).unsqueeze(1) / 255.0
    ty = torch.tensor(test_y, dtype=torch.long)

    models = args.out / "models"
    models.mkdir(parents=True, exist_ok=True)
    for i, (name, arch) in enumerate(ARCHS.items()):
        torch.manual_seed(args.seed + i)
        net = build(arch)
        train(net, x, y, args.epochs, args.seed + i)
        with torch.no_grad():
            acc = (net(tx).argmax(1) == ty).float().mean().item()
        (models / f"{name}.nnw").write_bytes(encode_nnw(name, arch, net))
        print(f"{name}: test accuracy {acc:.4f}")


if __name__ == "__main__":
    main()
