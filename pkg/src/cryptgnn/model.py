"""Model descriptor, parameter files, and the model-splitting tool.

The architecture descriptor is public JSON: an ordered list of blocks
(each one message-passing step followed by a feature-transformation
chain), a readout mode, and a head chain. Parameters are private.

Plain model file:  magic CGMP | descriptor JSON | float64 matrices.
Share file:        magic CGMS | party/parties/version | descriptor JSON
                   | field-encoded share matrices.

Batch-norm parameters are folded at split time into an affine pair
(scale, shift) that is numerically identical to the natural form, so
the online path runs one elementwise product and one addition.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .field import FixedPointCodec
from .prf import SeededPrf
from .sharing import split_additive

_PLAIN_MAGIC = b"CGMP"
_SHARE_MAGIC = b"CGMS"
_VERSION = 1


class ModelFormatError(ValueError):
    pass


def canonical_descriptor(descriptor: dict) -> bytes:
    return json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _chain_dims(descriptor: dict):
    """Validate the dimension chain; returns (block output dims, head input)."""
    dim = descriptor["input_dim"]
    block_dims = []
    for bi, block in enumerate(descriptor["blocks"]):
        for layer in block["layers"]:
            kind = layer["type"]
            if kind == "linear":
                if layer["in"] != dim:
                    raise ModelFormatError(
                        f"block {bi}: linear expects {layer['in']} features, chain has {dim}"
                    )
                dim = layer["out"]
            elif kind == "batch_norm":
                if layer["dim"] != dim:
                    raise ModelFormatError(f"block {bi}: batch_norm dim mismatch")
            elif kind not in ("relu", "sigmoid"):
                raise ModelFormatError(f"unknown layer type {kind!r}")
        block_dims.append(dim)
    head_in = sum(block_dims) if block_dims else dim
    hdim = head_in
    for layer in descriptor["head"]["layers"]:
        kind = layer["type"]
        if kind == "linear":
            if layer["in"] != hdim:
                raise ModelFormatError(f"head: linear expects {layer['in']}, chain has {hdim}")
            hdim = layer["out"]
        elif kind == "batch_norm":
            if layer["dim"] != hdim:
                raise ModelFormatError("head: batch_norm dim mismatch")
        elif kind not in ("relu", "sigmoid"):
            raise ModelFormatError(f"unknown layer type {kind!r}")
    if hdim != descriptor["classes"]:
        raise ModelFormatError(f"head produces {hdim} outputs, descriptor says {descriptor['classes']}")
    return block_dims, head_in


def iter_layers(descriptor: dict):
    for block in descriptor["blocks"]:
        for layer in block["layers"]:
            yield layer
    for layer in descriptor["head"]["layers"]:
        yield layer


def param_names(descriptor: dict) -> list:
    names = []
    for layer in iter_layers(descriptor):
        if layer["type"] == "linear":
            names += [f"{layer['name']}.weight", f"{layer['name']}.bias"]
        elif layer["type"] == "batch_norm":
            names += [
                f"{layer['name']}.gamma",
                f"{layer['name']}.beta",
                f"{layer['name']}.mean",
                f"{layer['name']}.var",
            ]
    return names


@dataclass
class PlainModel:
    descriptor: dict
    params: dict

    def validate(self):
        _chain_dims(self.descriptor)
        missing = [n for n in param_names(self.descriptor) if n not in self.params]
        if missing:
            raise ModelFormatError(f"missing parameters: {missing}")
        for layer in iter_layers(self.descriptor):
            if layer["type"] == "batch_norm":
                var = self.params[f"{layer['name']}.var"]
                if np.any(np.asarray(var) + layer["eps"] <= 0):
                    raise ModelFormatError(f"{layer['name']}: variance + eps must be positive")

    def version(self) -> bytes:
        h = hashlib.blake2b(canonical_descriptor(self.descriptor), digest_size=16)
        for name in param_names(self.descriptor):
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.digest()


@dataclass
class ModelBundle:
    """One party's share of the model: public descriptor, shared params."""

    descriptor: dict
    party: int
    parties: int
    version: bytes
    shares: dict = field(default_factory=dict)  # name -> uint64 array

    @property
    def fraction_bits(self) -> int:
        return self.descriptor["fraction_bits"]


def linear_layer_shapes(descriptor: dict) -> dict:
    """Matrix triple shapes (K, K') needed per linear layer name."""
    return {
        layer["name"]: (layer["in"], layer["out"])
        for layer in iter_layers(descriptor)
        if layer["type"] == "linear"
    }


def _folded_batch_norm(plain: PlainModel, layer: dict):
    name = layer["name"]
    gamma = np.asarray(plain.params[f"{name}.gamma"], dtype=np.float64)
    beta = np.asarray(plain.params[f"{name}.beta"], dtype=np.float64)
    mean = np.asarray(plain.params[f"{name}.mean"], dtype=np.float64)
    var = np.asarray(plain.params[f"{name}.var"], dtype=np.float64)
    scale = gamma / np.sqrt(var + layer["eps"])
    shift = beta - mean * scale
    return scale.reshape(1, -1), shift.reshape(1, -1)


def split_model(plain: PlainModel, parties: int, master_seed: bytes) -> list:
    """Encode parameters to fixed point and secret-share them."""
    plain.validate()
    codec = FixedPointCodec(plain.descriptor["fraction_bits"])
    prf = SeededPrf(master_seed, ("model-split",))
    version = plain.version()

    encoded = {}
    for layer in iter_layers(plain.descriptor):
        if layer["type"] == "linear":
            name = layer["name"]
            encoded[f"{name}.weight"] = codec.encode(np.atleast_2d(plain.params[f"{name}.weight"]))
            encoded[f"{name}.bias"] = codec.encode(np.atleast_2d(plain.params[f"{name}.bias"]))
        elif layer["type"] == "batch_norm":
            scale, shift = _folded_batch_norm(plain, layer)
            encoded[f"{layer['name']}.scale"] = codec.encode(scale)
            encoded[f"{layer['name']}.shift"] = codec.encode(shift)

    bundles = [
        ModelBundle(plain.descriptor, p, parties, version, {}) for p in range(parties)
    ]
    for name in sorted(encoded):
        shares = split_additive(encoded[name], parties, prf, "param", name)
        for p in range(parties):
            bundles[p].shares[name] = shares[p]
    return bundles


def _write_blob(parts, arr, dtype):
    arr = np.atleast_2d(np.asarray(arr))
    rows, cols = arr.shape
    parts.append(struct.pack("<II", rows, cols))
    parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_blob(buf, offset, dtype):
    rows, cols = struct.unpack_from("<II", buf, offset)
    offset += 8
    nbytes = rows * cols * np.dtype(dtype).itemsize
    arr = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=offset).reshape(rows, cols)
    return arr.copy(), offset + nbytes


def save_plain_model(path, plain: PlainModel):
    plain.validate()
    desc = canonical_descriptor(plain.descriptor)
    parts = [_PLAIN_MAGIC, struct.pack("<II", _VERSION, len(desc)), desc]
    for name in param_names(plain.descriptor):
        _write_blob(parts, plain.params[name], "<f8")
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_plain_model(path) -> PlainModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _PLAIN_MAGIC:
        raise ModelFormatError("not a plain model file")
    version, desc_len = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    offset = 12
    descriptor = json.loads(buf[offset : offset + desc_len].decode("utf-8"))
    offset += desc_len
    params = {}
    for name in param_names(descriptor):
        arr, offset = _read_blob(buf, offset, "<f8")
        params[name] = arr
    model = PlainModel(descriptor, params)
    model.validate()
    return model


def _share_names(descriptor: dict) -> list:
    names = []
    for layer in iter_layers(descriptor):
        if layer["type"] == "linear":
            names += [f"{layer['name']}.weight", f"{layer['name']}.bias"]
        elif layer["type"] == "batch_norm":
            names += [f"{layer['name']}.scale", f"{layer['name']}.shift"]
    return names


def save_model_bundle(path, bundle: ModelBundle):
    desc = canonical_descriptor(bundle.descriptor)
    parts = [
        _SHARE_MAGIC,
        struct.pack("<IHH16sI", _VERSION, bundle.party, bundle.parties, bundle.version, len(desc)),
        desc,
    ]
    for name in _share_names(bundle.descriptor):
        _write_blob(parts, bundle.shares[name], "<u8")
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _SHARE_MAGIC:
        raise ModelFormatError("not a model share file")
    version, party, parties, model_version, desc_len = struct.unpack_from("<IHH16sI", buf, 4)
    if version != _VERSION:
        raise ModelFormatError(f"unsupported share version {version}")
    offset = 4 + struct.calcsize("<IHH16sI")
    descriptor = json.loads(buf[offset : offset + desc_len].decode("utf-8"))
    offset += desc_len
    shares = {}
    for name in _share_names(descriptor):
        arr, offset = _read_blob(buf, offset, "<u8")
        shares[name] = arr
    return ModelBundle(descriptor, party, parties, model_version, shares)


def random_plain_model(descriptor: dict, seed: bytes, weight_scale: float = 0.5) -> PlainModel:
    """Randomly initialized parameters for benchmarks and tests."""
    prf = SeededPrf(seed, ("model-init",))
    params = {}
    for layer in iter_layers(descriptor):
        if layer["type"] == "linear":
            name = layer["name"]
            fan_in = layer["in"]
            w = prf.field_matrix((fan_in, layer["out"]), "w", name).astype(np.float64)
            w = (w / float(2**61)) * 2.0 - 1.0
            params[f"{name}.weight"] = w * (weight_scale / np.sqrt(fan_in))
            b = prf.field_matrix((1, layer["out"]), "b", name).astype(np.float64)
            params[f"{name}.bias"] = ((b / float(2**61)) * 2.0 - 1.0) * 0.1
        elif layer["type"] == "batch_norm":
            name = layer["name"]
            dim = layer["dim"]
            g = prf.field_matrix((1, dim), "g", name).astype(np.float64) / float(2**61)
            params[f"{name}.gamma"] = 0.5 + g
            beta = prf.field_matrix((1, dim), "beta", name).astype(np.float64) / float(2**61)
            params[f"{name}.beta"] = (beta - 0.5) * 0.2
            mean = prf.field_matrix((1, dim), "mean", name).astype(np.float64) / float(2**61)
            params[f"{name}.mean"] = (mean - 0.5) * 0.5
            var = prf.field_matrix((1, dim), "var", name).astype(np.float64) / float(2**61)
            params[f"{name}.var"] = 0.5 + var
    return PlainModel(descriptor, params)


def gin_descriptor(
    input_dim: int,
    hidden_dim: int,
    classes: int,
    fraction_bits: int = 16,
    blocks: int = 3,
    activation: str = "relu",
    readout: str = "sum",
    batch_norm: bool = True,
    eps: float = 1e-5,
) -> dict:
    """Stacked message-passing blocks with MLP transforms, concatenated
    block outputs, and a two-layer head."""
    desc_blocks = []
    dim = input_dim
    for b in range(blocks):
        layers = [{"type": "linear", "in": dim, "out": hidden_dim, "name": f"b{b}_lin"}]
        if batch_norm:
            layers.append({"type": "batch_norm", "dim": hidden_dim, "eps": eps, "name": f"b{b}_bn"})
        layers.append({"type": activation})
        desc_blocks.append({"layers": layers})
        dim = hidden_dim
    head_in = hidden_dim * blocks
    descriptor = {
        "fraction_bits": fraction_bits,
        "input_dim": input_dim,
        "classes": classes,
        "readout": readout,
        "blocks": desc_blocks,
        "head": {
            "layers": [
                {"type": "linear", "in": head_in, "out": hidden_dim, "name": "head_lin0"},
                {"type": "relu"},
                {"type": "linear", "in": hidden_dim, "out": classes, "name": "head_lin1"},
            ]
        },
    }
    _chain_dims(descriptor)
    return descriptor
