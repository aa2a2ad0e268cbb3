"""Trains the toy digit MLP shipped in crates/core/fixtures.

Offline helper: the Rust crate only consumes the frozen outputs.

    python3 tools/train_toy_mlp.py [--hidden 512 512] [--clip 0.2] [--out crates/core/fixtures]

Writes toy_mlp.json / toy_mlp.bin (model) and digits_test.sgds (held-out set).
"""
import argparse
import hashlib
import json
import os
import struct

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split


def train(x, y, hidden, epochs, seed, weight_decay=0.0, clip=None):
    rng = np.random.default_rng(seed)
    sizes = [x.shape[1], *hidden, 10]
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_out, fan_in)).astype(np.float32)
        params.append([w, np.zeros(fan_out, np.float32)])
    m = [[np.zeros_like(p) for p in layer] for layer in params]
    v = [[np.zeros_like(p) for p in layer] for layer in params]
    lr, b1, b2, step = 1e-3, 0.9, 0.999, 0
    onehot = np.eye(10, dtype=np.float32)[y]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), 32):
            idx = order[start:start + 32]
            acts = [x[idx]]
            for i, (w, b) in enumerate(params):
                z = acts[-1] @ w.T + b
                acts.append(np.maximum(z, 0) if i < len(params) - 1 else z)
            logits = acts[-1]
            p = np.exp(logits - logits.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            grad = (p - onehot[idx]) / len(idx)
            step += 1
            for i in reversed(range(len(params))):
                w, b = params[i]
                gw, gb = grad.T @ acts[i] + weight_decay * w, grad.sum(0)
                if i > 0:
                    grad = (grad @ w) * (acts[i] > 0)
                for j, g in enumerate((gw, gb)):
                    m[i][j] = b1 * m[i][j] + (1 - b1) * g
                    v[i][j] = b2 * v[i][j] + (1 - b2) * g * g
                    mh = m[i][j] / (1 - b1 ** step)
                    vh = v[i][j] / (1 - b2 ** step)
                    params[i][j] = (params[i][j] - lr * mh / (np.sqrt(vh) + 1e-8)).astype(np.float32)
                if clip is not None:
                    np.clip(params[i][0], -clip, clip, out=params[i][0])
    return params


def predict(params, x):
    h = x
    for i, (w, b) in enumerate(params):
        h = h @ w.T + b
        if i < len(params) - 1:
            h = np.maximum(h, 0)
    return h.argmax(1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--hidden", type=int, nargs="+", default=[512, 512])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--weight-decay", type=float, default=0.0)
    ap.add_argument("--input-scale", type=float, default=1.0, help="multiplier applied to raw 0..16 pixel values")
    ap.add_argument("--clip", type=float, default=0.2, help="clip weights to [-clip, clip] after every step")
    ap.add_argument("--standardize", action="store_true", help="z-score features with training statistics")
    ap.add_argument("--out", default="crates/core/fixtures")
    args = ap.parse_args()

    digits = load_digits()
    x = (digits.data * args.input_scale).astype(np.float32)
    y = digits.target.astype(np.int64)
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=0.3, random_state=0, stratify=y)
    if args.standardize:
        mu, sd = xtr.mean(0), xtr.std(0) + 1e-3
        xtr, xte = ((xtr - mu) / sd).astype(np.float32), ((xte - mu) / sd).astype(np.float32)
    params = train(xtr, ytr, args.hidden, args.epochs, args.seed, args.weight_decay, args.clip)
    print("train acc", (predict(params, xtr) == ytr).mean(), "test acc", (predict(params, xte) == yte).mean())
    print("max |W| per layer", [float(np.abs(w).max()) for w, _ in params])

    os.makedirs(args.out, exist_ok=True)
    blob = b"".join(w.astype("<f4").tobytes() + b.astype("<f4").tobytes() for w, b in params)
    layers = [
        {
            "in_features": int(w.shape[1]),
            "out_features": int(w.shape[0]),
            "activation": "relu" if i < len(params) - 1 else "none",
            "bias": True,
        }
        for i, (w, _) in enumerate(params)
    ]
    manifest = {
        "format": "scaleguard-model",
        "version": 1,
        "dtype": "fp32",
        "weights": "toy_mlp.bin",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "layers": layers,
    }
    with open(os.path.join(args.out, "toy_mlp.bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(args.out, "toy_mlp.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    with open(os.path.join(args.out, "digits_test.sgds"), "wb") as f:
        f.write(b"SGDS" + struct.pack("<4I", 1, len(xte), xte.shape[1], 10))
        f.write(xte.astype("<f4").tobytes())
        f.write(yte.astype("<u4").tobytes())


if __name__ == "__main__":
    main()
