"""Secure feature-transformation layers and model execution.

Linear layers run the derived-triple matrix product; batch norm is a
folded affine (one elementwise product plus a shift); ReLU multiplies by
an exact secret sign bit; sigmoid clamps to a fixed interval and
evaluates an odd polynomial in the rescaled argument. The full model
interleaves message-passing blocks with these transforms, concatenates
block outputs, sum-pools for graph classification, and returns logit
shares (softmax stays with the data owner).
"""

from dataclasses import dataclass, field

import numpy as np

from .field import FixedPointCodec, add_mod, sub_mod, sum_mod
from .kernels import mul_mod
from .model import ModelBundle
from .mpl import batch_crypt_mpl
from .mul import (
    compare_positive,
    elem_mul,
    mat_mul,
    open_parameter_mask,
    rand_comb,
    truncate,
)
from .prf import SeededPrf
from .provider import PartyOffline
from .transport import Session

# Odd-polynomial sigmoid approximation: the argument is rescaled by
# 1/SIGMOID_CLAMP into [-1, 1] so all coefficients encode accurately at
# 16 fraction bits. Max approximation error 4.1e-3 on the clamped range;
# degree and interval are config constants.
SIGMOID_CLAMP = 8.0
SIGMOID_COEFFS = {  # power -> coefficient in the rescaled argument
    1: 2.41616833542276e-01 * 8.0,
    3: -1.48383099760479e-02 * 8.0**3,
    5: 6.69473607656291e-04 * 8.0**5,
    7: -1.68241766253586e-05 * 8.0**7,
    9: 2.12211286780814e-07 * 8.0**9,
    11: -1.04507161944829e-09 * 8.0**11,
}


@dataclass
class InferenceContext:
    """Per-request state for one party's layer execution."""

    session: Session
    offline: PartyOffline
    bundle: ModelBundle
    prf: SeededPrf  # party-private randomness (multiplicative masks)
    request_nonce: bytes
    v_cache: dict = field(default_factory=dict)
    used_derived: set = field(default_factory=set)

    @property
    def codec(self) -> FixedPointCodec:
        return FixedPointCodec(self.bundle.fraction_bits)

    @property
    def is_lead(self) -> bool:
        return self.session.ring.my_index == 0

    def public_share(self, value: float, shape) -> np.ndarray:
        """Share of a public constant: party 0 holds it, others hold zero."""
        enc = self.codec.encode_scalar(value)
        out = np.zeros(shape, dtype=np.uint64)
        if self.is_lead:
            out += np.uint64(enc)
        return out


def linear_layer(ctx: InferenceContext, x_share: np.ndarray, layer: dict) -> np.ndarray:
    name = layer["name"]
    triple = ctx.offline.matrix_triples[name]
    derived = rand_comb(triple, x_share.shape[0], ctx.request_nonce + name.encode())
    cache_key = (name, ctx.bundle.version)
    if cache_key not in ctx.v_cache:
        ctx.v_cache[cache_key] = open_parameter_mask(
            ctx.session, ctx.bundle.shares[f"{name}.weight"], triple
        )
    z = mat_mul(ctx.session, x_share, derived, ctx.v_cache[cache_key], ctx.used_derived)
    z = truncate(ctx.session, z, ctx.offline.trunc, ctx.bundle.fraction_bits)
    return add_mod(z, ctx.bundle.shares[f"{name}.bias"])


def batch_norm_layer(ctx: InferenceContext, x_share: np.ndarray, layer: dict) -> np.ndarray:
    name = layer["name"]
    scale = np.broadcast_to(ctx.bundle.shares[f"{name}.scale"], x_share.shape)
    z = elem_mul(ctx.session, x_share, scale, ctx.offline, ctx.prf, f"bn-{name}")
    z = truncate(ctx.session, z, ctx.offline.trunc, ctx.bundle.fraction_bits)
    return add_mod(z, ctx.bundle.shares[f"{name}.shift"])


def relu_layer(ctx: InferenceContext, x_share: np.ndarray) -> np.ndarray:
    """Exact: multiplies by the secret indicator bit, which carries no
    fixed-point scale, so no truncation error enters."""
    bit = compare_positive(ctx.session, x_share, ctx.offline.cmp)
    return elem_mul(ctx.session, bit, x_share, ctx.offline, ctx.prf, "relu")


def _clamp(ctx: InferenceContext, x_share: np.ndarray, bound: float) -> np.ndarray:
    hi = ctx.public_share(bound, x_share.shape)
    lo = ctx.public_share(-bound, x_share.shape)
    over = compare_positive(ctx.session, sub_mod(x_share, hi), ctx.offline.cmp)
    under = compare_positive(ctx.session, sub_mod(lo, x_share), ctx.offline.cmp)
    x = add_mod(x_share, elem_mul(ctx.session, over, sub_mod(hi, x_share), ctx.offline, ctx.prf, "clamp-hi"))
    return add_mod(x, elem_mul(ctx.session, under, sub_mod(lo, x), ctx.offline, ctx.prf, "clamp-lo"))


def sigmoid_layer(ctx: InferenceContext, x_share: np.ndarray) -> np.ndarray:
    codec = ctx.codec
    f = ctx.bundle.fraction_bits
    x = _clamp(ctx, x_share, SIGMOID_CLAMP)
    # u = x / clamp in [-1, 1]; public scalar product then rescale
    u = mul_mod(x, np.uint64(codec.encode_scalar(1.0 / SIGMOID_CLAMP)))
    u = truncate(ctx.session, u, ctx.offline.trunc, f)
    u2 = truncate(ctx.session, elem_mul(ctx.session, u, u, ctx.offline, ctx.prf, "sig-u2"), ctx.offline.trunc, f)
    powers = {1: u}
    prev = u
    for p in (3, 5, 7, 9, 11):
        prev = truncate(
            ctx.session,
            elem_mul(ctx.session, prev, u2, ctx.offline, ctx.prf, f"sig-u{p}"),
            ctx.offline.trunc,
            f,
        )
        powers[p] = prev
    acc = np.zeros_like(x_share)
    for p, coeff in SIGMOID_COEFFS.items():
        acc = add_mod(acc, mul_mod(powers[p], np.uint64(codec.encode_scalar(coeff))))
    acc = truncate(ctx.session, acc, ctx.offline.trunc, f)
    return add_mod(acc, ctx.public_share(0.5, acc.shape))


def apply_secure_layer(ctx: InferenceContext, x_share: np.ndarray, layer: dict) -> np.ndarray:
    kind = layer["type"]
    if kind == "linear":
        return linear_layer(ctx, x_share, layer)
    if kind == "batch_norm":
        return batch_norm_layer(ctx, x_share, layer)
    if kind == "relu":
        return relu_layer(ctx, x_share)
    if kind == "sigmoid":
        return sigmoid_layer(ctx, x_share)
    raise ValueError(f"unknown layer type {kind!r}")


def run_gin(
    session: Session,
    upload,
    bundle: ModelBundle,
    offline: PartyOffline,
    private_prf: SeededPrf,
    v_cache: dict = None,
) -> np.ndarray:
    """Execute the full model on one party's shares; returns logit shares.

    Message-passing noise and rotations derive from the client-issued
    seed so the uploaded noise-effect shares cancel them exactly.
    """
    ctx = InferenceContext(
        session=session,
        offline=offline,
        bundle=bundle,
        prf=private_prf,
        request_nonce=session.session_id,
        v_cache={} if v_cache is None else v_cache,
    )
    mpl_prf = SeededPrf(upload.seed)
    f = bundle.fraction_bits
    x = upload.x_share
    block_outputs = []
    for bi, block in enumerate(bundle.descriptor["blocks"]):
        x = batch_crypt_mpl(
            session,
            mpl_prf,
            bi,
            x,
            upload.edges,
            upload.noise_effect_shares[bi],
            weights_share=upload.weights_share,
            offline=offline,
            fraction_bits=f,
        )
        session.transcript.mark_phase("ftl")
        for layer in block["layers"]:
            x = apply_secure_layer(ctx, x, layer)
        block_outputs.append(x)
    feat = np.concatenate(block_outputs, axis=1) if block_outputs else x
    if bundle.descriptor.get("readout", "sum") == "sum":
        feat = sum_mod(feat, axis=0).reshape(1, -1)
    for layer in bundle.descriptor["head"]["layers"]:
        feat = apply_secure_layer(ctx, feat, layer)
    session.transcript.mark_phase("result")
    return feat


def offline_requirements(descriptor: dict, n_nodes: int, n_edges: int = 0, weighted: bool = False) -> dict:
    """Exact pool consumption of one inference request.

    Pools are per-element and single-use: an elementwise product burns
    three additive-multiplicative pairs per element, a truncation one
    pair, a comparison one bundle.
    """
    am = trunc = cmp = 0

    def chain(layers, rows, dim):
        nonlocal am, trunc, cmp
        for layer in layers:
            if layer["type"] == "linear":
                dim = layer["out"]
                trunc += rows * dim
            elif layer["type"] == "batch_norm":
                am += 3 * rows * dim
                trunc += rows * dim
            elif layer["type"] == "relu":
                cmp += rows * dim
                am += 3 * rows * dim
            elif layer["type"] == "sigmoid":
                e = rows * dim
                cmp += 2 * e
                am += 3 * (2 + 6) * e  # two clamp products, six power products
                trunc += 8 * e  # rescale, six powers, final sum
        return dim

    dim = descriptor["input_dim"]
    block_dims = []
    for block in descriptor["blocks"]:
        if weighted:
            am += 3 * n_edges * dim
            trunc += n_nodes * dim
        dim = chain(block["layers"], n_nodes, dim)
        block_dims.append(dim)
    head_rows = 1 if descriptor.get("readout", "sum") == "sum" else n_nodes
    chain(descriptor["head"]["layers"], head_rows, sum(block_dims) if block_dims else dim)
    return {"am_pairs": am, "trunc_pairs": trunc, "cmp_bundles": cmp}
