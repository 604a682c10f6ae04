"""Double-precision reference engine used as the verification oracle.

Implements the same architecture the secure path executes: edge-list
message passing (neighbor feature sums), linear layers, batch
normalization in its natural form, exact ReLU and sigmoid, sum-pooled
concatenation readout.
"""

import numpy as np

from .field import MODULUS


def mpl_reference(features: np.ndarray, src, dst, weights=None) -> np.ndarray:
    """out[i] = sum of features[j] over edges j -> i (optionally weighted)."""
    out = np.zeros_like(np.asarray(features, dtype=np.float64))
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    gathered = np.asarray(features, dtype=np.float64)[src]
    if weights is not None:
        gathered = gathered * np.asarray(weights, dtype=np.float64)[:, None]
    np.add.at(out, dst, gathered)
    return out


def mpl_field_oracle(encoded: np.ndarray, src, dst) -> np.ndarray:
    """Field-exact aggregation oracle, kept independent of the protocol
    path: accumulates in arbitrary-precision Python integers and reduces
    once at the end."""
    encoded = np.asarray(encoded, dtype=np.uint64)
    out = np.zeros(encoded.shape, dtype=object)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    np.add.at(out, dst, encoded.astype(object)[src])
    return (out % MODULUS).astype(np.uint64)


def sigmoid_exact(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def relu_exact(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def apply_layer_reference(x: np.ndarray, layer: dict, params: dict) -> np.ndarray:
    kind = layer["type"]
    if kind == "linear":
        name = layer["name"]
        return x @ params[f"{name}.weight"] + params[f"{name}.bias"]
    if kind == "batch_norm":
        name = layer["name"]
        gamma = params[f"{name}.gamma"]
        beta = params[f"{name}.beta"]
        mean = params[f"{name}.mean"]
        var = params[f"{name}.var"]
        return (x - mean) / np.sqrt(var + layer["eps"]) * gamma + beta
    if kind == "relu":
        return relu_exact(x)
    if kind == "sigmoid":
        return sigmoid_exact(x)
    raise ValueError(f"unknown layer type {kind!r}")


def run_reference(descriptor: dict, params: dict, features, src, dst, weights=None) -> np.ndarray:
    """Full forward pass; returns logits (1, C) for sum readout, else (N, C)."""
    x = np.asarray(features, dtype=np.float64)
    block_outputs = []
    for block in descriptor["blocks"]:
        x = mpl_reference(x, src, dst, weights)
        for layer in block["layers"]:
            x = apply_layer_reference(x, layer, params)
        block_outputs.append(x)
    feat = np.concatenate(block_outputs, axis=1) if block_outputs else x
    if descriptor.get("readout", "sum") == "sum":
        feat = feat.sum(axis=0, keepdims=True)
    for layer in descriptor["head"]["layers"]:
        feat = apply_layer_reference(feat, layer, params)
    return feat
