"""Patch tokenizer and pre-norm transformer encoder producing N x D patch features."""

from __future__ import annotations

import numpy as np

from .autodiff import LayerNorm, Linear, Module, NonFiniteError, Tensor, ops
from .autodiff.nn import _param


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C), patches in row-major grid order."""
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) images, got shape {images.shape}")
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {p}")
    grid = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, (h // p) * (w // p), p * p * c)


class PatchTokenizer(Module):
    def __init__(self, image_size: int, channels: int, patch_size: int, embed_dim: int,
                 rng: np.random.Generator, position_embedding: bool = True) -> None:
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} is not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.projection = Linear(patch_size * patch_size * channels, embed_dim, rng)
        self.position_embedding = (
            _param(rng.normal(0.0, 0.02, size=(self.num_patches, embed_dim))) if position_embedding else None
        )

    def __call__(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (self.image_size, self.image_size, self.channels):
            raise ValueError(
                f"image shape {images.shape[1:]} does not match configured "
                f"{(self.image_size, self.image_size, self.channels)}"
            )
        tokens = self.projection(Tensor(extract_patches(images, self.patch_size)))
        if self.position_embedding is not None:
            tokens = ops.add(tokens, self.position_embedding)
        return tokens


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator) -> None:
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        hidden = int(round(dim * mlp_ratio))
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def attention(self, x: Tensor) -> Tensor:
        dim = x.shape[-1]
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(x), self.heads)
        v = split_heads(self.v(x), self.heads)
        scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dim / self.heads))
        return self.out(merge_heads(ops.matmul(ops.softmax(scores, axis=-1), v)))

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attention(self.norm1(x)))
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.norm2(x)))))


class Backbone(Module):
    """b(x; Psi): tokenizer followed by ``depth`` encoder blocks."""

    def __init__(self, image_size: int, channels: int, patch_size: int, embed_dim: int, depth: int,
                 heads: int, mlp_ratio: float, rng: np.random.Generator, position_embedding: bool = True) -> None:
        self.embed_dim = embed_dim
        self.tokenizer = PatchTokenizer(image_size, channels, patch_size, embed_dim, rng, position_embedding)
        self.blocks = [EncoderBlock(embed_dim, heads, mlp_ratio, rng) for _ in range(depth)]

    @property
    def num_patches(self) -> int:
        return self.tokenizer.num_patches

    def tokenize(self, images: np.ndarray) -> Tensor:
        return self.tokenizer(images)

    def encode(self, tokens: Tensor) -> Tensor:
        x = tokens
        for i, block in enumerate(self.blocks):
            try:
                x = block(x)
            except NonFiniteError as exc:
                raise NonFiniteError(f"encoder block {i}: {exc}") from exc
        return x

    def __call__(self, images: np.ndarray) -> Tensor:
        return self.encode(self.tokenize(images))
