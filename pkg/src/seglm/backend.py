"""Kernel backend selection and counter-based random streams.

Two interchangeable kernel modules exist: a plain numpy reference
implementation and a numba-compiled one. ``SEGLM_BACKEND`` picks which
one the model uses (``numba`` when available, else ``numpy``). Matrix
multiplies are *not* part of the kernel set; both backends share
``np.matmul`` so BLAS does the heavy lifting either way.

Random numbers that must be reproducible per training step (dropout
masks, boundary noise) come from a counter-based generator keyed by
``(master seed, step, substream)``. The generator is implemented
identically in both kernel modules, so a run is bitwise reproducible
under either backend.
"""

import os

from .errors import ConfigError

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

_MASK64 = (1 << 64) - 1

# substream tags for the per-step random streams; offsets keep layers apart
STREAM_EMBED_DROP = 1
STREAM_ATTN_DROP = 100
STREAM_RESID_DROP = 200
STREAM_FF_DROP = 300
STREAM_BOUNDARY_NOISE = 500


def splitmix64(x: int) -> int:
    """One round of splitmix64; a cheap bijective scrambler on 64 bits."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, step: int, substream: int) -> int:
    """Derive the 64-bit key for one (seed, step, substream) random stream.

    Keys are forced odd: the counter generator multiplies by the key, and
    an even key would discard low bits of the counter.
    """
    k = splitmix64(seed & _MASK64)
    k = splitmix64(k ^ splitmix64((step << 20) ^ substream))
    return k | 1


def select_backend(name: str | None = None) -> str:
    name = name or os.environ.get("SEGLM_BACKEND", "")
    if not name:
        name = "numba" if HAS_NUMBA else "numpy"
    if name not in ("numpy", "numba"):
        raise ConfigError(f"unknown backend {name!r}, expected 'numpy' or 'numba'")
    if name == "numba" and not HAS_NUMBA:
        raise ConfigError("backend 'numba' requested but numba is not importable")
    return name


BACKEND = select_backend()

if BACKEND == "numba":
    from . import kernels_numba as K  # noqa: N812
else:
    from . import kernels_numpy as K  # noqa: N812


def kernels(name: str):
    """Return a kernel module by name, regardless of the active backend."""
    if name == "numpy":
        from . import kernels_numpy

        return kernels_numpy
    if name == "numba":
        if not HAS_NUMBA:
            raise ConfigError("numba is not importable")
        from . import kernels_numba

        return kernels_numba
    raise ConfigError(f"unknown backend {name!r}")
