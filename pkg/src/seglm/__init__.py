"""Character-level language modelling with learned segment pooling."""

__version__ = "0.1.0"

__all__ = [
    "backend",
    "boundary",
    "cli",
    "corpus",
    "evaluation",
    "hourglass",
    "numerics",
    "pooling",
    "trainer",
    "unigram",
]
