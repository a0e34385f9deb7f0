"""Encoder/decoder pair with reparameterized sampling and a latent space
split into an auxiliary-aligned block and a residual reconstruction block."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import LayerSpec, ParamStore, activation, apply_layers, conv, conv_t, dense
from .tensor import (Tensor, ShapeError, as_tensor, clamp, concat, exp, multiply,
                     add, reshape, slice_axis)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class ArchitectureDescriptor:
    variant: str                    # "mlp" or "conv"
    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    d_z: int
    d_aux: int
    image_shape: tuple              # (C, H, W)

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        if not 0 <= self.d_aux <= self.d_z:
            raise ValueError(f"d_aux={self.d_aux} outside [0, d_z={self.d_z}]")
        enc_out = nn.chain_shapes(self.encoder, self.image_shape)[-1]
        if int(np.prod(enc_out)) != 2 * self.d_z:
            raise ShapeError(f"encoder must end with 2*d_z={2 * self.d_z} units, "
                             f"got shape {enc_out}")
        dec_out = nn.chain_shapes(self.decoder, (self.d_z,))[-1]
        if int(np.prod(dec_out)) != int(np.prod(self.image_shape)):
            raise ShapeError(f"decoder output {dec_out} does not match image "
                             f"shape {self.image_shape}")
        last = self.decoder[-1]
        if last.kind != "activation" or last.activation != "sigmoid":
            raise ValueError("decoder must end with a sigmoid activation")

    def to_text(self) -> str:
        def enc(spec):
            return {k: getattr(spec, k) for k in
                    ("kind", "in_size", "out_size", "kernel", "stride",
                     "padding", "activation")}
        return json.dumps({
            "variant": self.variant,
            "encoder": [enc(s) for s in self.encoder],
            "decoder": [enc(s) for s in self.decoder],
            "d_z": self.d_z,
            "d_aux": self.d_aux,
            "image_shape": list(self.image_shape),
        })

    @staticmethod
    def from_text(text: str) -> "ArchitectureDescriptor":
        raw = json.loads(text)
        return ArchitectureDescriptor(
            variant=raw["variant"],
            encoder=[LayerSpec(**s) for s in raw["encoder"]],
            decoder=[LayerSpec(**s) for s in raw["decoder"]],
            d_z=raw["d_z"],
            d_aux=raw["d_aux"],
            image_shape=tuple(raw["image_shape"]),
        )


def mlp_architecture(image_shape: tuple, d_z: int, d_aux: int,
                     hidden: Sequence[int] = (512, 256)) -> ArchitectureDescriptor:
    """Fully-connected variant; trains in minutes on CPU at desk scale."""
    n_pix = int(np.prod(image_shape))
    encoder, cur = [], n_pix
    for h in hidden:
        encoder += [dense(cur, h), activation("relu")]
        cur = h
    encoder.append(dense(cur, 2 * d_z))
    decoder, cur = [], d_z
    for h in reversed(hidden):
        decoder += [dense(cur, h), activation("relu")]
        cur = h
    decoder += [dense(cur, n_pix), activation("sigmoid")]
    return ArchitectureDescriptor("mlp", encoder, decoder, d_z, d_aux, image_shape)


def conv_architecture(d_z: int = 10, d_aux: int = 5,
                      image_shape: tuple = (1, 33, 33)) -> ArchitectureDescriptor:
    """Convolutional variant for 33x33 single-channel stamps.

    The transposed-convolution chain needs a 32-channel 1x1 spatial start,
    so the decoder prepends a dense map from the latent vector to 32 units
    (reinterpreted as 32x1x1 by apply_layers).
    """
    c = image_shape[0]
    encoder = [
        conv(c, 32, 4, stride=2, padding=1), activation("relu"),
        conv(32, 64, 4, stride=2, padding=1), activation("relu"),
        conv(64, 128, 4, stride=2, padding=1), activation("relu"),
        conv(128, 256, 4, stride=2, padding=1), activation("relu"),
        dense(256 * 2 * 2, 256), activation("relu"),
        dense(256, 2 * d_z),
    ]
    decoder = [
        dense(d_z, 32),
        conv_t(32, 128, 4, stride=2, padding=1), activation("relu"),
        conv_t(128, 64, 4, stride=2, padding=1), activation("relu"),
        conv_t(64, 32, 4, stride=2, padding=1), activation("relu"),
        conv_t(32, c, 5, stride=4, padding=0), activation("sigmoid"),
    ]
    return ArchitectureDescriptor("conv", encoder, decoder, d_z, d_aux, image_shape)


@dataclass
class PosteriorParams:
    mu: Tensor       # B x d_z
    logvar: Tensor   # B x d_z, clamped to [LOGVAR_MIN, LOGVAR_MAX]


def init_model_params(arch: ArchitectureDescriptor, seed: int,
                      dtype=np.float32) -> ParamStore:
    store = nn.init_params(arch.encoder, seed, arch.image_shape,
                           prefix="enc", dtype=dtype)
    nn.init_params(arch.decoder, seed + 1, (arch.d_z,),
                   prefix="dec", store=store, dtype=dtype)
    return store


def encode(arch: ArchitectureDescriptor, store: ParamStore, x) -> PosteriorParams:
    x = as_tensor(x)
    if x.shape[1:] != arch.image_shape:
        raise ShapeError(f"encode: input shape {x.shape} does not match image "
                         f"shape {arch.image_shape}")
    out = apply_layers(store, "enc", arch.encoder, x)
    if out.ndim > 2:
        out = reshape(out, (out.shape[0], -1))
    mu = slice_axis(out, 1, 0, arch.d_z)
    logvar = clamp(slice_axis(out, 1, arch.d_z, 2 * arch.d_z),
                   LOGVAR_MIN, LOGVAR_MAX)
    return PosteriorParams(mu, logvar)


def reparameterize(post: PosteriorParams, noise) -> Tensor:
    noise = as_tensor(noise)
    if noise.shape != post.mu.shape:
        raise ShapeError(f"reparameterize: noise shape {noise.shape} != "
                         f"posterior shape {post.mu.shape}")
    return add(post.mu, multiply(exp(multiply(post.logvar, 0.5)), noise))


def partition(z: Tensor, d: int):
    """Split latents into (aux, recon) blocks; concat of the outputs is z."""
    z = as_tensor(z)
    d_z = z.shape[1]
    if not 0 <= d <= d_z:
        raise ValueError(f"partition: d={d} outside [0, {d_z}]")
    return slice_axis(z, 1, 0, d), slice_axis(z, 1, d, d_z)


def decode(arch: ArchitectureDescriptor, store: ParamStore, z) -> Tensor:
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != arch.d_z:
        raise ShapeError(f"decode: latent shape {z.shape} does not match "
                         f"d_z={arch.d_z}")
    out = apply_layers(store, "dec", arch.decoder, z)
    return reshape(out, (z.shape[0],) + arch.image_shape)


def reconstruct(arch: ArchitectureDescriptor, store: ParamStore, x) -> Tensor:
    """Noise-free reconstruction: decode the posterior mean."""
    return decode(arch, store, encode(arch, store, x).mu)
