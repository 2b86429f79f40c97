"""Noise schedule, denoiser contract, analytic oracles and the remote-prior client."""
from .base import (ConstantDenoiser, Denoiser, EmbeddingCondition, GaussianMixture,
                   GaussianMixtureDenoiser, IdentityCodec, ViewCondition, gm_denoise,
                   gm_posterior_mean, relative_transform)
from .oracle import MultiviewOracleDenoiser, ToySphere, ring_views
from .remote import PriorServer, RemotePrior, echo_server, remote_denoise, serve_denoiser
from .schedule import NoiseSchedule, sigma

__all__ = [
    "ConstantDenoiser", "Denoiser", "EmbeddingCondition", "GaussianMixture",
    "GaussianMixtureDenoiser", "IdentityCodec", "ViewCondition", "gm_denoise",
    "gm_posterior_mean", "relative_transform", "MultiviewOracleDenoiser", "ToySphere",
    "ring_views", "PriorServer", "RemotePrior", "echo_server", "remote_denoise",
    "serve_denoiser", "NoiseSchedule", "sigma",
]
