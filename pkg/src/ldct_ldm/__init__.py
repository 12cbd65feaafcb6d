"""Latent diffusion denoising for low-dose CT.

Modules: :mod:`schedule` (cosine schedule, DDPM/DDIM steps), :mod:`autoencoder`,
:mod:`latent_diffusion` (conditional denoiser, training, samplers),
:mod:`metrics`, :mod:`data` (synthetic phantoms, containers) and
:mod:`pipeline` / :mod:`cli` (orchestration).
"""

__version__ = "0.1.0"
