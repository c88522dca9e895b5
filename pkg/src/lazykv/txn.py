"""Protocol-agnostic transaction lifecycle and the client-facing buffers.

A TxnContext carries the five per-transaction sets:

  rset   what was read concretely (key and, for optimistic engines, the
         version observed)
  wset   buffered writes: key -> value expression
  frset  futures handed out for delayed reads (handle -> key)
  fwset  buffered writes whose *key* is itself an expression
  cset   conditions asserted via is-true, with the result reported

Buffered effects are invisible to every other transaction until commit.
read_future / write / write_future_key are purely local: they exchange no
messages with storage.

Writes keep a per-call sequence number; at commit the last write to a
resolved key wins regardless of whether it came through write() or
write_future_key().  Retry policy lives with the caller: commit reports the
abort and the caller decides whether to run the transaction again (engines
accept a stamp so a retry can keep its wound-wait age).
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

from .futexpr import Expr, FutureHandle

ACTIVE = "active"
COMMITTED = "committed"
ABORTED = "aborted"


class TxnInactive(RuntimeError):
    """Operation on a committed or aborted transaction."""


class TxnContext:
    __slots__ = ("txn_id", "stamp", "wounded", "status", "rset", "wset",
                 "frset", "fwset", "cset", "engine", "_next_handle", "_next_seq",
                 "wseq", "fwseq", "eager_values")

    def __init__(self, txn_id: int, stamp: int, engine=None):
        self.txn_id = txn_id
        self.stamp = stamp          # wound-wait age, smaller = older
        self.wounded = False        # one-way flag set by lock managers
        self.status = ACTIVE
        self.rset: Dict[str, int] = {}              # key -> version (0 = keys only)
        self.wset: Dict[str, Expr] = {}             # key -> value expression
        self.frset: Dict[FutureHandle, str] = {}    # handle -> key
        self.fwset: List[Tuple[Expr, Expr]] = []    # (key expr, value expr)
        self.cset: List[Tuple[Expr, bool]] = []     # (condition, reported result)
        self.engine = engine
        self._next_handle = 1
        self._next_seq = 1
        self.wseq: Dict[str, int] = {}              # key -> seq of last write()
        self.fwseq: List[int] = []                  # seq per fwset entry
        self.eager_values: Dict[FutureHandle, object] = {}  # future-key resolution cache

    # -- plumbing used by futexpr.read_future ------------------------------

    def require_active(self) -> None:
        if self.status != ACTIVE:
            raise TxnInactive("transaction %d is %s" % (self.txn_id, self.status))

    def buffered_write(self, key: str) -> Optional[Expr]:
        return self.wset.get(key)

    def new_future(self, key: str) -> FutureHandle:
        h = FutureHandle(self._next_handle, key)
        self._next_handle += 1
        self.frset[h] = key
        return h

    def _seq(self) -> int:
        s = self._next_seq
        self._next_seq += 1
        return s

    # -- client operations -------------------------------------------------

    def write(self, key: str, v: Expr) -> None:
        """Buffer a value expression for key; last writer within the
        transaction wins.  Purely local."""
        self.require_active()
        if not isinstance(v, Expr):
            raise TypeError("write takes an Expr; wrap constants with const()")
        self.wset[key] = v
        self.wseq[key] = self._seq()

    def write_future_key(self, k: Expr, v: Expr) -> None:
        """Buffer a write whose key is an expression, resolved at commit."""
        self.require_active()
        if not isinstance(k, Expr) or not isinstance(v, Expr):
            raise TypeError("write_future_key takes Expr key and value")
        self.fwset.append((k, v))
        self.fwseq.append(self._seq())

    def abort(self) -> None:
        """Abort and release protocol resources; idempotent."""
        if self.status == ABORTED:
            return
        if self.status == COMMITTED:
            raise TxnInactive("transaction %d already committed" % self.txn_id)
        self.status = ABORTED
        if self.engine is not None:
            self.engine.on_abort(self)
