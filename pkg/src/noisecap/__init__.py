"""Noise-injected text-only training of caption decoders, with a fully
controlled synthetic joint-embedding testbed and real-embedding ingestion."""

from .config import RunConfig
from .decoding import DecodeConfig, caption_image
from .encoders import (
    EmbeddingStore,
    EncoderConfig,
    GapConfig,
    ImageEncoder,
    TextEncoder,
    load_embedding_store,
    save_embedding_store,
)
from .experiments import (
    build_context,
    compute_modality_offset,
    image_captioning_eval,
    noise_sweep,
    text_reconstruction_eval,
)
from .metrics import MetricsReport, compute_metrics
from .model import DecoderModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    NoiseConfig,
    TrainConfig,
    estimate_epsilon,
    inject_noise,
    supervised_paired_train,
    train_text_only,
)
from .world import Caption, Corpus, Grammar, Scene, attributes_of, generate_corpus

__version__ = "0.1.0"
