"""Local embedding service speaking the standard embeddings HTTP contract."""

__version__ = "0.1.0"

from .app import ServerConfig, create_app
from .encoder import HashMlpEncoder, load_encoder

__all__ = ["HashMlpEncoder", "ServerConfig", "create_app", "load_encoder", "__version__"]
