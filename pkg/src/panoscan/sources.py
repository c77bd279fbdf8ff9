"""Tile sources: where the frames of each scan window come from.

A source returns, for window ``t`` at base-resolution anchor ``(h, w)``,
the list of frames a decoder would emit for that block. Every random draw
is keyed by ``(seed, t, frame)`` so output does not depend on call order.
"""
from __future__ import annotations

import zlib

import numpy as np

from .enhance import bilinear_upscale
from .flow import FlowMatchingModel


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


class ProceduralSource:
    """Model-free frames from a deterministic field over global coordinates.

    ``pattern="gradient"`` is a global linear ramp across the canvas;
    ``pattern="texture"`` is a sum of seeded sinusoids. Each frame adds
    Gaussian ``jitter``; with probability ``outlier_prob`` a frame also gets
    a global brightness flicker.
    """

    def __init__(self, extent, pattern="texture", channels=3, frames=3, jitter=0.01,
                 outlier_prob=0.25, seed=0):
        self.extent = extent
        self.pattern = pattern
        self.channels = channels
        self.frames = frames
        self.jitter = jitter
        self.outlier_prob = outlier_prob
        self.seed = seed
        rng = _rng(seed, 0x7E47)
        n_waves = 6
        short = max(min(extent), 1)
        self._freq = rng.uniform(0.5, 4.0, size=(channels, n_waves, 2)) / short
        self._freq *= rng.choice([-1.0, 1.0], size=(channels, n_waves, 2))
        self._phase = rng.uniform(0, 2 * np.pi, size=(channels, n_waves))
        self._amp = rng.uniform(0.3, 1.0, size=(channels, n_waves))
        self._slope = np.linspace(0.6, 1.0, channels)

    def field(self, hh, ww) -> np.ndarray:
        """Noise-free value at global coordinates (arrays of equal shape) -> ``(..., C)``."""
        hh = np.asarray(hh, dtype=np.float64)
        ww = np.asarray(ww, dtype=np.float64)
        height, width = self.extent
        if self.pattern == "gradient":
            base = 0.5 * ww / max(width - 1, 1) + 0.25 * hh / max(height - 1, 1)
            return np.stack([0.1 + base * s for s in self._slope], axis=-1)
        out = []
        for c in range(self.channels):
            arg = (2 * np.pi * (hh[..., None] * self._freq[c, :, 0] + ww[..., None] * self._freq[c, :, 1])
                   + self._phase[c])
            wave = (self._amp[c] * np.sin(arg)).sum(axis=-1) / self._amp[c].sum()
            out.append(0.5 + 0.4 * wave)
        return np.stack(out, axis=-1)

    def clean_tile(self, anchor, shape) -> np.ndarray:
        hh, ww = np.meshgrid(np.arange(shape[0]) + anchor[0], np.arange(shape[1]) + anchor[1], indexing="ij")
        return self.field(hh, ww)

    def block(self, t, anchor, shape) -> list:
        clean = self.clean_tile(anchor, shape)
        frames = []
        for i in range(self.frames):
            rng = _rng(self.seed, t, i)
            frame = clean.copy()
            if self.jitter:
                frame += rng.normal(0.0, self.jitter, size=frame.shape)
            if rng.uniform() < self.outlier_prob:
                frame += rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.4)
            frames.append(frame)
        return frames


def prompt_embedding(prompt: str, dim: int) -> np.ndarray:
    """Fixed pseudo-embedding of a text prompt (a stand-in for a text encoder)."""
    return _rng(zlib.crc32(prompt.encode("utf-8"))).normal(size=dim)


class FlowSource:
    """Frames sampled from the toy flow-matching model.

    The model is trained on token-grid crops of a procedural texture. Each
    frame is one sample whose tokens sit at the window's global coordinates,
    decoded to pixels by bilinear upsampling of the token grid.
    """

    def __init__(self, extent, window, rope, grid=(4, 4), hidden_dim=32, iterations=300,
                 learning_rate=3e-3, batch_size=32, sample_steps=16, channels=3, frames=3,
                 prompt="", seed=0, n_train=512):
        self.extent = extent
        self.window = window
        self.grid = grid
        self.frames = frames
        self.seed = seed
        self.cell = window[1] // grid[1]
        texture = ProceduralSource(extent, "texture", channels, frames=1, jitter=0.0,
                                   outlier_prob=0.0, seed=seed)
        rng = _rng(seed, 0xF10)
        self.model = FlowMatchingModel(
            grid=grid, model_dim=rope.head_dim, hidden_dim=hidden_dim, cond_dim=8,
            rope_base=rope.base, rope_axis_split=rope.axis_split, learning_rate=learning_rate,
            batch_size=batch_size, n_iter=iterations, sample_steps=sample_steps, seed=seed)
        data = []
        for _ in range(n_train):
            h = rng.integers(0, max(extent[0] - window[0], 0) + 1)
            w = rng.integers(0, max(extent[1] - window[1], 0) + 1)
            data.append(self._encode(texture.clean_tile((h, w), window)))
        data = np.stack(data)
        self.mean_ = data.mean()
        self.std_ = data.std() or 1.0
        cond = prompt_embedding(prompt, 8)
        self.model.fit((data - self.mean_) / self.std_, condition=cond)

    def _encode(self, tile):
        gh, gw = self.grid
        c = self.cell
        pooled = tile.reshape(gh, c, gw, c, -1).mean(axis=(1, 3))
        return pooled.reshape(gh * gw, -1)

    def block(self, t, anchor, shape) -> list:
        gh, gw = self.grid
        token_anchor = (anchor[0] // self.cell, anchor[1] // self.cell)
        noise = _rng(self.seed, t, 0xA11).standard_normal((self.frames, gh * gw, self.model.n_features_in_))
        latents = self.model.sample(noise=noise, t=t, anchor=token_anchor)
        frames = []
        for z in latents:
            pix = z.reshape(gh, gw, -1) * self.std_ + self.mean_
            frames.append(bilinear_upscale(pix, self.cell))
        return frames

    @property
    def loss_curve(self):
        return self.model.loss_curve_
