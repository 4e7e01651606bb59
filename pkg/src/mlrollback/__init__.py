"""Message-logging local rollback for iterative kernels, on a deterministic virtual runtime."""
from .harness import Metrics, RunConfig, run, sweep, verify
from .sim import FailureSpec, World

__all__ = ["FailureSpec", "Metrics", "RunConfig", "World", "run", "sweep", "verify"]
__version__ = "0.1.0"
