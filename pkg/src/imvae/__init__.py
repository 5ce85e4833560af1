"""IM-VAE: cross-domain sequential recommendation with pseudo-sequences and
mutual-information regularised variational latents."""

__version__ = "0.1.0"
