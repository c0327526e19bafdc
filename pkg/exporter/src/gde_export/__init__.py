"""Offline embedding exporter writing the GDE1 interchange format."""

from .backends import BackendError, HashedProjectionBackend, SentenceTransformerBackend, resolve_backend
from .exporter import ExportJob, export_image_embeddings, export_text_embeddings, read_caption_file, write_gde1

__version__ = "0.1.0"
