"""Stdio bridge server exposing a latent-diffusion stack over a JSON-header +
binary-payload wire protocol."""

from .server import serve
from .stacks import SyntheticStack

__version__ = "0.1.0"
