#!/usr/bin/env python3
"""Offline generator for the bundled desk-scale workload.

Trains a small CNN on the scikit-learn 8x8 digits set, quantizes it to
8-bit weights (symmetric, per tensor) and 8-bit unsigned activations, and
writes the fixture files consumed by the Rust harness:

  fixtures/digits/net.json          network + weights (base64 little-endian)
  fixtures/digits/{train,test}-images.bin / -labels.bin
  fixtures/digits/reference-logits.json   integer logits for the first test images

Run from the repository root: python3 tools/gen_digits_fixture.py
"""
import base64
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.datasets import load_digits

OUT = os.path.join(os.path.dirname(__file__), "..", "fixtures", "digits")
SEED = 0
N_TEST = 500


def quant_input(pixels):
    # 0..16 gray levels -> 8-bit code, scale 1/255
    return np.floor(pixels.astype(np.float64) * 255.0 / 16.0 + 0.5).astype(np.uint8)


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.fc = nn.Linear(128, 10)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return self.fc(x.flatten(1))

    def activations(self, x):
        a1 = F.relu(self.conv1(x))
        a2 = F.relu(self.conv2(F.max_pool2d(a1, 2)))
        return a1, a2


def tensor_blob(arr, dtype):
    arr = np.ascontiguousarray(arr.astype(dtype))
    return {
        "dtype": {"i1": "i8", "i4": "i32"}[np.dtype(dtype).str[1:]],
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def write_images(path, imgs):
    n, h, w = imgs.shape
    with open(path, "wb") as f:
        f.write(b"HCIMIMG1")
        f.write(struct.pack("<IIII", n, 1, h, w))
        f.write(imgs.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(b"HCIMLBL1")
        f.write(struct.pack("<I", len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def conv_int(x, w, b, pad):
    # x: (C,H,W) int64, w: (O,C,k,k) int64
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((o, h, wd), dtype=np.int64)
    for y in range(h):
        for xx in range(wd):
            patch = xp[:, y:y + k, xx:xx + k].reshape(-1)
            out[:, y, xx] = w.reshape(o, -1) @ patch + b
    return out


def requant(acc, mult, bits=8):
    acc = np.maximum(acc, 0)
    q = np.floor(acc.astype(np.float64) * mult + 0.5)
    return np.clip(q, 0, 2 ** bits - 1).astype(np.int64)


def pool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def main():
    torch.manual_seed(SEED)
    rng = np.random.default_rng(SEED)
    digits = load_digits()
    perm = rng.permutation(len(digits.images))
    imgs = quant_input(digits.images[perm])
    labels = digits.target[perm].astype(np.int64)
    tr_x, te_x = imgs[:-N_TEST], imgs[-N_TEST:]
    tr_y, te_y = labels[:-N_TEST], labels[-N_TEST:]

    xt = torch.tensor(tr_x, dtype=torch.float32).unsqueeze(1) / 255.0
    yt = torch.tensor(tr_y)
    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for _epoch in range(40):
        order = torch.randperm(len(xt))
        for s in range(0, len(xt), 64):
            idx = order[s:s + 64]
            opt.zero_grad()
            loss = F.cross_entropy(net(xt[idx]), yt[idx])
            loss.backward()
            opt.step()

    with torch.no_grad():
        a1, a2 = net.activations(xt)
        s_in = 1.0 / 255.0
        s_a1 = float(torch.quantile(a1.flatten(), 0.9999)) / 255.0
        s_a2 = float(torch.quantile(a2.flatten(), 0.9999)) / 255.0

        def qw(layer):
            w = layer.weight.detach().numpy().astype(np.float64)
            s = float(np.abs(w).max()) / 127.0
            return np.clip(np.round(w / s), -127, 127).astype(np.int64), s

        w1, sw1 = qw(net.conv1)
        w2, sw2 = qw(net.conv2)
        w3, sw3 = qw(net.fc)
        b1 = np.round(net.conv1.bias.numpy() / (s_in * sw1)).astype(np.int64)
        b2 = np.round(net.conv2.bias.numpy() / (s_a1 * sw2)).astype(np.int64)
        b3 = np.round(net.fc.bias.numpy() / (s_a2 * sw3)).astype(np.int64)

    m1 = (s_in * sw1) / s_a1
    m2 = (s_a1 * sw2) / s_a2

    def int_forward(img):
        x = img.astype(np.int64).reshape(1, 8, 8)
        x = pool2(requant(conv_int(x, w1, b1, 1), m1))
        x = pool2(requant(conv_int(x, w2, b2, 1), m2))
        return w3 @ x.reshape(-1) + b3

    logits = np.stack([int_forward(im) for im in te_x])
    acc_int = float((logits.argmax(1) == te_y).mean())
    with torch.no_grad():
        acc_f = float((net(torch.tensor(te_x, dtype=torch.float32).unsqueeze(1) / 255.0)
                       .argmax(1).numpy() == te_y).mean())
    print(f"float test acc {acc_f:.4f}  int8 test acc {acc_int:.4f}")

    desc = {
        "format": "hcim-net",
        "version": 1,
        "input": {"channels": 1, "height": 8, "width": 8, "bits": 8, "scale": s_in},
        "layers": [
            {"type": "conv", "in_ch": 1, "out_ch": 16, "kernel": 3, "stride": 1, "pad": 1,
             "weight_scale": sw1, "weights": tensor_blob(w1, "<i1"), "bias": tensor_blob(b1, "<i4")},
            {"type": "relu"},
            {"type": "quantize", "bits": 8, "scale": s_a1},
            {"type": "pool", "size": 2},
            {"type": "conv", "in_ch": 16, "out_ch": 32, "kernel": 3, "stride": 1, "pad": 1,
             "weight_scale": sw2, "weights": tensor_blob(w2, "<i1"), "bias": tensor_blob(b2, "<i4")},
            {"type": "relu"},
            {"type": "quantize", "bits": 8, "scale": s_a2},
            {"type": "pool", "size": 2},
            {"type": "fc", "in": 128, "out": 10,
             "weight_scale": sw3, "weights": tensor_blob(w3, "<i1"), "bias": tensor_blob(b3, "<i4")},
        ],
    }
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "net.json"), "w") as f:
        json.dump(desc, f, indent=1)
        f.write("\n")
    write_images(os.path.join(OUT, "train-images.bin"), tr_x)
    write_labels(os.path.join(OUT, "train-labels.bin"), tr_y)
    write_images(os.path.join(OUT, "test-images.bin"), te_x)
    write_labels(os.path.join(OUT, "test-labels.bin"), te_y)
    with open(os.path.join(OUT, "reference-logits.json"), "w") as f:
        json.dump({"images": list(range(16)), "logits": logits[:16].tolist(),
                   "int8_test_accuracy": acc_int}, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
