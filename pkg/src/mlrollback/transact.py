"""Iterations as abortable transactions via shadow buffers.

Everything a kernel does before its last communication call must be
idempotent, so mutations go to ``shadow`` and reach ``committed`` only in
:meth:`TxnState.commit`.
"""
from __future__ import annotations

import numpy as np


class TransactionError(RuntimeError):
    pass


class TxnState:
    """Committed kernel data plus the shadow copy of its protected subset.

    ``protected`` names the entries copied on :meth:`begin`. Pass
    ``protected=None`` to protect everything. With ``enabled=False`` the
    shadow aliases the committed dict, which gives a non-transactional
    iteration (used to demonstrate what breaks without shadow buffers).
    """

    def __init__(self, committed: dict[str, np.ndarray], protected=None, *, enabled: bool = True):
        self.committed = committed
        self.protected = tuple(committed) if protected is None else tuple(protected)
        self.enabled = enabled
        self.shadow: dict[str, np.ndarray] | None = None
        self.iter_open = False
        self.current_iter = 0

    def begin(self) -> None:
        if self.iter_open:
            raise TransactionError("begin_iteration on an open transaction")
        if self.enabled:
            self.shadow = {k: np.array(self.committed[k], copy=True) for k in self.protected}
        else:
            self.shadow = self.committed
        self.iter_open = True

    def commit(self) -> None:
        if not self.iter_open:
            raise TransactionError("commit_iteration without begin_iteration")
        if self.enabled:
            self.committed.update(self.shadow)
        self.shadow = None
        self.iter_open = False
        self.current_iter += 1

    def abort(self) -> None:
        if not self.iter_open:
            raise TransactionError("abort_iteration without begin_iteration")
        self.shadow = None
        self.iter_open = False

    def shadow_nbytes(self) -> int:
        """Bytes duplicated by one :meth:`begin`."""
        return sum(np.asarray(self.committed[k]).nbytes for k in self.protected)


def begin_iteration(txn: TxnState) -> None:
    txn.begin()


def commit_iteration(txn: TxnState) -> None:
    txn.commit()


def abort_iteration(txn: TxnState) -> None:
    txn.abort()
