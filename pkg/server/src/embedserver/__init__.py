"""HTTP inference service for text embedding and Yes/No scoring.

Speaks a four-endpoint wire contract (POST /embed, /score, /tokenize,
GET /health) over JSON/UTF-8. Models are deterministic hash-based stand-ins
that honor the full contract — registry, tokenization, truncation, pooling,
variant-set aggregation, batching — without any model weights.
"""

__version__ = "0.1.0"
