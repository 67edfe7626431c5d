"""faceforge: face photo -> game-character facial parameters, end to end.

Trains an imitator of a procedural face engine, fits a per-group whitening
prior over facial parameters, and trains an attention-gated translator that
maps face embeddings to parameters in a single forward pass.
"""

__version__ = "0.1.0"
