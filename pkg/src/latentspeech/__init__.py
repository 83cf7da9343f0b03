"""Non-autoregressive text-to-speech with two-scale latent prosody sampling."""

__version__ = "0.1.0"
