"""RTF enhancement variants built on a trained VAE."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .rtf import center, pack_rtf, uncenter, unpack_rtf
from .signal import SpectralFrames
from .vae import backward, decode, encode, forward


class Variant(str, enum.Enum):
    RAW = "raw"
    MEAN = "mean"
    DN = "dn"
    LS = "ls"
    FT = "ft"
    GT = "gt"
    FT_GT = "ft_gt"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None


VARIANTS = tuple(v.value for v in Variant)


@dataclass(frozen=True)
class ObservationSet:
    """STFT frames of both microphones; rows are frequency bins, columns frames."""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        a = self.x1.data if isinstance(self.x1, SpectralFrames) else np.asarray(self.x1, complex)
        b = self.x2.data if isinstance(self.x2, SpectralFrames) else np.asarray(self.x2, complex)
        if a.shape != b.shape or a.ndim != 2:
            raise ValueError(f"observation shapes differ: {a.shape} vs {b.shape}")
        object.__setattr__(self, "x1", a)
        object.__setattr__(self, "x2", b)

    @property
    def reference_energy(self):
        return float(np.sum(self.x1.real ** 2 + self.x1.imag ** 2))

    def statistics(self):
        """Per-bin sums ``sum|x1|^2`` and ``sum x2 conj(x1)`` over frames."""
        p11 = np.sum(self.x1.real ** 2 + self.x1.imag ** 2, axis=1)
        p12 = np.sum(self.x2 * np.conj(self.x1), axis=1)
        return p11, p12


@dataclass(frozen=True)
class EnhanceConfig:
    alpha: float = 2.0
    iterations: int = 20

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def denoise(params, h_est, mean_rtf):
    """Encode the centered estimate, decode the posterior mean, add the mean back."""
    enc, dec = params
    if enc is None or dec is None:
        raise ValueError("denoise needs trained encoder and decoder parameters")
    mu = encode(enc, center(h_est, mean_rtf)).mu
    return uncenter(decode(dec, mu), mean_rtf)


def gt_reconstruct(params, h_true, mean_rtf):
    """Pass a ground-truth RTF through the VAE; bounds what denoising can reach."""
    return denoise(params, h_true, mean_rtf)


def mean_baseline(dataset):
    return dataset.mean_rtf.copy()


def ls_cost(z, obs, dec, mean_rtf):
    """``sum_l || x1_l * h(z) - x2_l ||^2`` with ``h(z) = uncenter(decode(z))``."""
    h = unpack_rtf(uncenter(decode(dec, z), mean_rtf))
    r = obs.x1 * h[:, None] - obs.x2
    return float(np.sum(r.real ** 2 + r.imag ** 2))


def ls_gradient(z, obs, dec, mean_rtf, stats=None):
    """Cost and its gradient w.r.t. the latent vector ``z``.

    The residual gradient w.r.t. the packed RTF is ``2 [Re; Im](h P11 - P12)``;
    one reverse pass through the decoder maps it to ``z``.
    """
    p11, p12 = obs.statistics() if stats is None else stats
    z = np.atleast_2d(np.asarray(z, dtype=float))
    out, cache = forward(dec, z)
    h = unpack_rtf(uncenter(out[0], mean_rtf))
    g = h * p11 - p12
    _, g_z = backward(dec, cache, 2.0 * pack_rtf(g)[None, :])
    return ls_cost(z[0], obs, dec, mean_rtf), g_z[0]


def ls_enhance(params, h_est, obs, cfg=None, mean_rtf=None, trajectory=None):
    """Latent gradient descent on the LS cost, started from the DN solution.

    Each step is ``mu <- mu - alpha / sum_l ||x1_l||^2 * dJ/dz``. Pass a list as
    ``trajectory`` to collect the cost before every step and after the last.
    """
    cfg = cfg or EnhanceConfig()
    enc, dec = params
    energy = obs.reference_energy
    if energy == 0.0:
        raise ValueError("silent reference channel")
    mu = encode(enc, center(h_est, mean_rtf)).mu.copy()
    stats = obs.statistics()
    step = cfg.alpha / energy
    for _ in range(cfg.iterations if cfg.alpha > 0 else 0):
        cost, grad = ls_gradient(mu, obs, dec, mean_rtf, stats)
        if trajectory is not None:
            trajectory.append(cost)
        mu = mu - step * grad
    if trajectory is not None:
        trajectory.append(ls_cost(mu, obs, dec, mean_rtf))
    return uncenter(decode(dec, mu), mean_rtf)
