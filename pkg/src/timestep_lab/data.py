"""Synthetic desk-scale datasets."""

from __future__ import annotations

import numpy as np

from .diffusion import DataBatch

DATASET_KINDS = ("gauss_mix", "swiss_roll", "checkerboard", "tiny_images")


class DatasetError(ValueError):
    pass


def gauss_mix_centers(n_components=8, radius=2.0):
    if n_components == 1:
        return np.zeros((1, 2))
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _gauss_mix(n, rng, n_components=8, radius=2.0, std=0.1):
    centers = gauss_mix_centers(n_components, radius)
    labels = rng.integers(0, n_components, size=n)
    return centers[labels] + std * rng.standard_normal((n, 2))


def _swiss_roll(n, rng, noise=0.25):
    u = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
    x = np.stack([u * np.cos(u), u * np.sin(u)], axis=1)
    return x + noise * rng.standard_normal((n, 2))


def _checkerboard(n, rng):
    x1 = rng.random(n) * 4.0 - 2.0
    x2 = rng.random(n) - rng.integers(0, 2, size=n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return np.stack([x1, x2], axis=1) * 2.0


def _tiny_images(n, rng, side=4, noise=0.05):
    # one isotropic blob per image at a random sub-pixel position
    coords = np.arange(side, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy = rng.uniform(0, side - 1, size=n)[:, None, None]
    cx = rng.uniform(0, side - 1, size=n)[:, None, None]
    img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
    img = img + noise * rng.standard_normal(img.shape)
    return img.reshape(n, side * side)


def make_dataset(kind="gauss_mix", n=25600, seed=0, standardize=True, **params):
    """Draw ``n`` samples deterministically from ``seed``.

    With ``standardize`` every coordinate is shifted and scaled to zero mean
    and unit variance over the drawn set.
    """
    if n < 1:
        raise DatasetError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    try:
        gen = {"gauss_mix": _gauss_mix, "swiss_roll": _swiss_roll, "checkerboard": _checkerboard, "tiny_images": _tiny_images}[kind]
    except KeyError:
        raise DatasetError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}") from None
    x = gen(n, rng, **params)
    if standardize:
        x = (x - x.mean(axis=0)) / x.std(axis=0)
    return DataBatch(x)
