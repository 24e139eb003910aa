"""Few-shot abnormal trace classification for microservice systems.

Two stages: an attention-based autoencoder fuses each trace's span and log
features into a fixed-size latent vector, and a first-order meta-learned
transformer-encoder classifier adapts to novel fault categories from a
handful of labeled examples, within one system or across systems.
"""

__version__ = "0.1.0"

from .traces import (  # noqa: F401
    FaultCategory,
    LogRecord,
    SpanRecord,
    Trace,
    TraceCorpus,
    corpus_stats,
    load_corpus,
    save_corpus,
)
