from ..sim import ConfigError
from .cg import CGKernel
from .stencil import StencilKernel

KERNELS = {"cg": CGKernel, "stencil": StencilKernel}


def make_kernel(name: str, n_procs: int, **params):
    try:
        cls = KERNELS[name]
    except KeyError:
        raise ConfigError(f"unknown kernel {name!r}") from None
    return cls(n_procs, **params)


__all__ = ["CGKernel", "StencilKernel", "KERNELS", "make_kernel"]
