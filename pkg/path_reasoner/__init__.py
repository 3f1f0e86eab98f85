"""Multi-hop question answering over a knowledge base with latent reasoning paths."""

__version__ = "0.1.0"
