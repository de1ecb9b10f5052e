"""Lightweight ghost-module CNN + NetVLAD place recognition toolkit.

Submodules:
    tensor      autograd core (conv, batchnorm, activations, grad_check)
    ghostnet    ghost modules, SE blocks, bottlenecks, the staged backbone
    netvlad     trainable VLAD aggregation, k-means init, PCA whitening
    training    triplet mining, hinge loss, SGD with momentum
    retrieval   descriptor index, Recall@N, synthetic geotagged dataset
    costmodel   analytical MACs/FLOPs/parameter accounting
    images      PPM P6 I/O and bilinear resizing
    checkpoint  named-array binary container
    cli         command-line front end

Top-level attributes are loaded lazily so that ``import ghostvlad``
stays cheap and thread-count environment variables set by the CLI take
effect before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "ghostnet",
    "netvlad",
    "training",
    "retrieval",
    "costmodel",
    "images",
    "checkpoint",
    "figures",
    "verification",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        module = import_module(f"{__name__}.{name}")
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
