"""Per-key lock manager: read/write modes, condition locks, wound-wait.

Lock modes per key:
  R      plain shared read
  W      plain exclusive write
  R(p)   read-condition: a predicate over the key's value plus the result
         the owner observed; held instead of a read lock after is-true
  W(v)   write-value: exclusive write that names the concrete value v the
         owner will install, so it can coexist with condition holders whose
         predicates v preserves

Compatibility (requested row vs held column; value cells decided by
evaluating the installed predicate against the pending/candidate value):

               R      W      R(p)     W(v) sat   W(v) unsat
    R          ok     -      ok       -          -
    W          -      -      -        -          -
    R(p)       ok     -      ok       ok         -
    W(v) sat   -      -      ok       -          -
    W(v) unsat -      -      -        -          -

Design rules:
  - One mutex guards the whole manager; blocking happens outside it on a
    per-request Event.
  - Wait queue per key is FIFO; the grant walk stops at the first
    incompatible waiter so writers cannot starve behind a reader stream.
  - Upgrades (requester already holds the key) bypass the queue: they are
    evaluated against held state only and park at the queue front.  Without
    this, read-then-write transactions would deadlock behind their own
    blocked followers.
  - Read-modify-write commits acquire W(v) with a value *function* instead
    of a concrete value (acquire_write_fn).  The manager calls it under its
    mutex at every grant attempt, so the candidate value always reflects
    the current committed state and no plain-R-then-upgrade step is needed.
    Two committers of the same key then serialize FIFO instead of
    deadlocking on their read locks.  A function that cannot produce a
    value yet returns UNRESOLVABLE, which satisfies no condition.
  - Wound-wait (optional per manager): an older requester wounds younger
    conflicting holders and then waits; a younger requester just waits.
    Wounds are one-way flags on the owner object, checked at every
    acquisition; a parked victim in this manager is cancelled immediately,
    and every parked request re-checks its owner's flag every few ms so
    wounds delivered through another manager (other partitions) also land.
  - Whenever a new holder is installed while an older waiter stays parked
    against it (possible via the upgrade bypass and FIFO grants), the new
    holder is wounded.  Queue positions are wait-for edges as well: a
    stalled entry stalls everything conflicting behind it, so parking also
    wounds younger conflicting entries ahead in the queue and wounds the
    requester itself when an older conflicting entry sits behind it (the
    upgrade front-insertion creates exactly that shape).  Together these
    keep the waits-for relation, holder edges and queue edges alike, free
    of older-waits-on-unwounded-younger pairs, which is what makes it
    acyclic.
  - With wound-wait off the manager is a plain FIFO blocking latch table
    (the optimistic engines' commit latches; they order acquisitions by key
    and must never abort anyone).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .futexpr import Expr, FutureHandle, ResolutionError, Value, keys, resolve

GRANTED = "granted"
WOUNDED = "wounded"
PENDING = "pending"


class _Unresolvable:
    def __repr__(self):
        return "UNRESOLVABLE"


#: Candidate write value that cannot be computed yet (missing input or a
#: resolution failure).  Never satisfies a condition, never matches a
#: read-condition probe; the owner sorts out the failure after the grant.
UNRESOLVABLE = _Unresolvable()


class Wounded(Exception):
    """The requester was aborted by an older transaction."""


class WouldBlock(Exception):
    """Non-blocking probe: the request is not immediately grantable."""


class LockTimeout(Exception):
    """Blocking acquisition gave up at its deadline."""


class LockUsageError(RuntimeError):
    """API misuse: condition without a read lock, multi-key condition, ..."""


class StampClock:
    """Allocates the totally ordered wound-wait stamps.  Share one clock
    across every engine of a deployment so age comparisons are global."""

    def __init__(self):
        self._mutex = threading.Lock()
        self._next = 1

    def next(self) -> int:
        with self._mutex:
            s = self._next
            self._next += 1
            return s


class LockOwner:
    """Minimal lock-holder identity: a stamp (smaller = older) and the
    wound flag.  Transaction contexts satisfy this shape."""

    __slots__ = ("stamp", "wounded")

    def __init__(self, stamp: int):
        self.stamp = stamp
        self.wounded = False

    def __repr__(self):
        return "owner(stamp=%d%s)" % (self.stamp, ", wounded" if self.wounded else "")


@dataclass
class ConditionEntry:
    """A predicate over one key plus the result its owner observed."""

    cond: Expr
    expected: bool
    owner: object  # anything with .stamp / .wounded
    handle: FutureHandle


class _Request:
    __slots__ = ("owner", "mode", "value", "value_fn", "cond", "expected",
                 "handle", "upgrade", "event", "outcome", "key_name")

    def __init__(self, owner, mode, value=None, value_fn=None, cond=None,
                 expected=None, handle=None, upgrade=False):
        self.owner = owner
        self.mode = mode  # "r" | "w" | "wv" | "rc"
        self.value = value
        self.value_fn = value_fn  # recomputes value at each grant attempt
        self.cond = cond
        self.expected = expected
        self.handle = handle
        self.upgrade = upgrade
        self.event = threading.Event()
        self.outcome = PENDING
        self.key_name = ""


class _KeyState:
    __slots__ = ("readers", "writer", "writer_mode", "writer_value", "conditions", "queue")

    def __init__(self):
        self.readers: Dict[int, object] = {}  # stamp -> owner
        self.writer: Optional[object] = None
        self.writer_mode: Optional[str] = None  # "w" | "wv"
        self.writer_value: Optional[Value] = None
        self.conditions: List[ConditionEntry] = []
        self.queue: List[_Request] = []

    def idle(self) -> bool:
        return (not self.readers and self.writer is None
                and not self.conditions and not self.queue)


def _single_handle(cond: Expr) -> FutureHandle:
    hs = keys(cond)
    if len(hs) != 1:
        raise LockUsageError(
            "condition locks take exactly one future, got %d" % len(hs))
    return next(iter(hs))


# Mode pairs that can stall one another in the wait queue, judged statically
# (value-dependent cells count as conflicting: wounding on a stale candidate
# value is conservative, missing a wound could leave a cycle).
_MODE_CONFLICT = {
    "r": ("w", "wv"),
    "w": ("r", "w", "wv", "rc"),
    "wv": ("r", "w", "wv", "rc"),
    "rc": ("w", "wv"),
}


def _entry_satisfied(entry: ConditionEntry, value: Value) -> bool:
    # An unevaluable predicate (type mismatch against the candidate value)
    # cannot be preserved, so it counts as violated.
    if value is UNRESOLVABLE:
        return False
    try:
        return resolve(entry.cond, {entry.handle: value}) == entry.expected
    except ResolutionError:
        return False


class LockManager:
    def __init__(self, wound_wait: bool = True, poll_interval: float = 0.005):
        self._mutex = threading.Lock()
        self._keys: Dict[str, _KeyState] = {}
        self._held: Dict[int, Set[str]] = {}  # stamp -> keys with any hold
        self._parked: Dict[int, _Request] = {}  # stamp -> its parked request
        self._wound_wait = wound_wait
        self._poll = poll_interval

    # -- public API --------------------------------------------------------

    def acquire_read(self, txn, key: str, blocking: bool = True,
                     timeout: Optional[float] = None) -> None:
        self._acquire(txn, key, _Request(txn, "r"), blocking, timeout)

    def acquire_write(self, txn, key: str, blocking: bool = True,
                      timeout: Optional[float] = None) -> None:
        self._acquire(txn, key, _Request(txn, "w"), blocking, timeout)

    def acquire_write_value(self, txn, key: str, value: Value,
                            blocking: bool = True,
                            timeout: Optional[float] = None) -> None:
        self._acquire(txn, key, _Request(txn, "wv", value=value), blocking, timeout)

    def acquire_write_fn(self, txn, key: str, value_fn,
                         blocking: bool = True,
                         timeout: Optional[float] = None) -> None:
        """Write-value lock whose candidate value is value_fn(), re-run under
        the manager mutex at every grant attempt.  For read-modify-write
        commits: the function typically reads the key's current committed
        value and computes the replacement, which stays valid from grant to
        install because the grant excludes every other writer.

        value_fn must not raise and must not touch this manager; it returns
        a plain value or UNRESOLVABLE."""
        req = _Request(txn, "wv", value=UNRESOLVABLE, value_fn=value_fn)
        self._acquire(txn, key, req, blocking, timeout)

    def update_write_value(self, txn, key: str, value: Value) -> None:
        """Replace the pending value of a held write-value lock after late
        inputs resolved.  Conditions that the new value no longer preserves
        are wounded away (younger) or win against this txn (older)."""
        with self._mutex:
            st = self._keys.get(key)
            if st is None or st.writer is not txn:
                raise LockUsageError(
                    "update_write_value(%r) without the write lock" % key)
            if st.writer_mode != "wv":
                return  # plain exclusive hold subsumes any value
            st.writer_value = value
            losers = [e for e in st.conditions
                      if e.owner is not txn and not _entry_satisfied(e, value)]
            for e in losers:
                if e.owner.stamp > txn.stamp:
                    self._wound(e.owner)
                else:
                    raise Wounded(txn.stamp)
            self._wound_younger_holder_vs_waiters(st, txn)
            self._grant_walk(st)

    def acquire_read_condition(self, txn, key: str, cond: Expr, expected: bool,
                               blocking: bool = True,
                               timeout: Optional[float] = None) -> None:
        h = _single_handle(cond)
        req = _Request(txn, "rc", cond=cond, expected=expected, handle=h)
        self._acquire(txn, key, req, blocking, timeout)

    def add_condition(self, txn, key: str, cond: Expr, expected: bool) -> None:
        """Install a condition under a held plain read lock (the is-true
        critical section); the caller downgrades via release_read after."""
        h = _single_handle(cond)
        with self._mutex:
            self._check_wounded(txn)
            st = self._state(key)
            if txn.stamp not in st.readers:
                raise LockUsageError(
                    "add_condition(%r) without a held read lock" % key)
            for e in st.conditions:
                if e.owner is txn and e.cond == cond:
                    e.expected = expected  # idempotent per (txn, cond)
                    return
            st.conditions.append(ConditionEntry(cond, expected, txn, h))
            self._note_held(txn, key)
            self._wound_younger_holder_vs_waiters(st, txn)

    def rem_condition(self, txn, key: str, cond: Expr) -> None:
        """Remove this txn's entry; absent entry is a no-op.  Never checks
        the wound flag: abort paths must always get through."""
        with self._mutex:
            st = self._keys.get(key)
            if st is None:
                return
            before = len(st.conditions)
            st.conditions = [e for e in st.conditions
                             if not (e.owner is txn and e.cond == cond)]
            if len(st.conditions) != before:
                self._forget_if_free(txn, key, st)
                self._grant_walk(st)
            self._gc(key, st)

    def release_read(self, txn, key: str) -> None:
        """Drop only the plain read lock (the downgrade after
        add_condition); conditions stay installed."""
        with self._mutex:
            st = self._keys.get(key)
            if st is None or txn.stamp not in st.readers:
                return
            del st.readers[txn.stamp]
            self._forget_if_free(txn, key, st)
            self._grant_walk(st)
            self._gc(key, st)

    def release_all(self, txn) -> None:
        """Drop every mode and condition held by txn; idempotent."""
        with self._mutex:
            for key in list(self._held.get(txn.stamp, ())):
                st = self._keys.get(key)
                if st is None:
                    continue
                st.readers.pop(txn.stamp, None)
                if st.writer is txn:
                    st.writer = None
                    st.writer_mode = None
                    st.writer_value = None
                st.conditions = [e for e in st.conditions if e.owner is not txn]
                self._grant_walk(st)
                self._gc(key, st)
            self._held.pop(txn.stamp, None)

    def held_keys(self, txn) -> Set[str]:
        with self._mutex:
            return set(self._held.get(txn.stamp, ()))

    def dump_key(self, key: str) -> str:
        """Human-readable lock state, for the diagnostic flag."""
        with self._mutex:
            st = self._keys.get(key)
            if st is None or st.idle():
                return "%s: unlocked" % key
            lines = ["%s:" % key]
            if st.readers:
                lines.append("  readers: %s" % sorted(st.readers))
            if st.writer is not None:
                if st.writer_mode == "w":
                    lines.append("  writer: stamp %d (exclusive)" % st.writer.stamp)
                else:
                    lines.append("  writer: stamp %d (value %r pending)"
                                 % (st.writer.stamp, st.writer_value))
            for e in st.conditions:
                lines.append("  condition: stamp %d expects %s = %s"
                             % (e.owner.stamp, e.cond, e.expected))
            for r in st.queue:
                lines.append("  waiting: stamp %d for %s%s"
                             % (r.owner.stamp, r.mode,
                                " (upgrade)" if r.upgrade else ""))
            return "\n".join(lines)

    # -- internals ---------------------------------------------------------

    def _state(self, key: str) -> _KeyState:
        st = self._keys.get(key)
        if st is None:
            st = self._keys[key] = _KeyState()
        return st

    def _gc(self, key: str, st: _KeyState) -> None:
        if st.idle():
            self._keys.pop(key, None)

    def _note_held(self, txn, key: str) -> None:
        self._held.setdefault(txn.stamp, set()).add(key)

    def _forget_if_free(self, txn, key: str, st: _KeyState) -> None:
        if (txn.stamp not in st.readers and st.writer is not txn
                and not any(e.owner is txn for e in st.conditions)):
            held = self._held.get(txn.stamp)
            if held is not None:
                held.discard(key)
                if not held:
                    del self._held[txn.stamp]

    def _check_wounded(self, txn) -> None:
        if self._wound_wait and getattr(txn, "wounded", False):
            raise Wounded(txn.stamp)

    def _refresh(self, req: _Request) -> None:
        """Recompute a function-valued candidate so compatibility is judged
        against the value the owner would install right now."""
        if req.value_fn is not None:
            req.value = req.value_fn()

    def _compatible(self, st: _KeyState, req: _Request) -> bool:
        other_readers = [o for s, o in st.readers.items() if o is not req.owner]
        writer = st.writer if st.writer is not req.owner else None
        other_conds = [e for e in st.conditions if e.owner is not req.owner]
        m = req.mode
        if m == "r":
            return writer is None
        if m == "w":
            return not other_readers and writer is None and not other_conds
        if m == "wv":
            return (not other_readers and writer is None
                    and all(_entry_satisfied(e, req.value) for e in other_conds))
        if m == "rc":
            if writer is None:
                return True
            if st.writer_mode == "w" or st.writer_value is UNRESOLVABLE:
                return False
            try:
                got = resolve(req.cond, {req.handle: st.writer_value})
            except ResolutionError:
                return False
            return got == req.expected
        raise AssertionError(m)

    def _blockers(self, st: _KeyState, req: _Request) -> List[object]:
        """The holders whose presence makes req incompatible."""
        out = []
        writer = st.writer if st.writer is not req.owner else None
        m = req.mode
        if m in ("w", "wv"):
            out.extend(o for s, o in st.readers.items() if o is not req.owner)
        if writer is not None and (
                m in ("r", "w", "wv")
                or (m == "rc" and not self._compatible(st, req))):
            out.append(writer)
        if m == "w":
            out.extend(e.owner for e in st.conditions if e.owner is not req.owner)
        elif m == "wv":
            out.extend(e.owner for e in st.conditions
                       if e.owner is not req.owner
                       and not _entry_satisfied(e, req.value))
        return out

    def _conflicts_with_new_holder(self, req: _Request, holder, st: _KeyState) -> bool:
        """Would the new holder's hold alone block req?"""
        if holder is req.owner:
            return False
        self._refresh(req)
        if st.writer is holder:
            if st.writer_mode == "w":
                return True
            if req.mode in ("r", "w", "wv"):
                return True
            if st.writer_value is UNRESOLVABLE:
                return True
            try:  # rc vs pending value
                return resolve(req.cond, {req.handle: st.writer_value}) != req.expected
            except ResolutionError:
                return True
        if holder.stamp in st.readers and st.readers[holder.stamp] is holder:
            if req.mode in ("w", "wv"):
                return True
        for e in st.conditions:
            if e.owner is holder:
                if req.mode == "w":
                    return True
                if req.mode == "wv" and not _entry_satisfied(e, req.value):
                    return True
        return False

    def _install(self, st: _KeyState, req: _Request, key: str) -> bool:
        """Apply a granted request to the key state.  Returns True when the
        grant added holdership (rather than being a reentrant no-op)."""
        txn = req.owner
        if req.mode == "r":
            if st.writer is txn or txn.stamp in st.readers:
                return False  # reentrant; writer subsumes read
            st.readers[txn.stamp] = txn
        elif req.mode in ("w", "wv"):
            st.readers.pop(txn.stamp, None)  # upgrade consumes the read hold
            already = st.writer is txn
            st.writer = txn
            if req.mode == "w":
                st.writer_mode, st.writer_value = "w", None
            elif st.writer_mode != "w":
                st.writer_mode, st.writer_value = "wv", req.value
            if already:
                self._note_held(txn, key)
                return False
        elif req.mode == "rc":
            for e in st.conditions:
                if e.owner is txn and e.cond == req.cond:
                    e.expected = req.expected
                    return False
            st.conditions.append(
                ConditionEntry(req.cond, req.expected, txn, req.handle))
        self._note_held(txn, key)
        return True

    def _wound(self, victim) -> None:
        victim.wounded = True
        parked = self._parked.get(victim.stamp)
        if parked is not None and parked.owner is victim:
            self._unpark(parked)
            parked.outcome = WOUNDED
            parked.event.set()

    def _unpark(self, req: _Request) -> None:
        self._parked.pop(req.owner.stamp, None)
        st = self._keys.get(req.key_name)
        if st is not None and req in st.queue:
            st.queue.remove(req)

    def _wound_younger_blockers(self, st: _KeyState, req: _Request) -> None:
        if not self._wound_wait:
            return
        self._refresh(req)
        for blocker in self._blockers(st, req):
            if blocker.stamp > req.owner.stamp:
                self._wound(blocker)

    def _wound_queue_conflicts(self, st: _KeyState, req: _Request) -> None:
        """A parked entry stalls every conflicting entry behind it (the
        grant walk is FIFO), so queue positions are wait-for edges.  Wound
        younger conflicting entries ahead of req, and req itself when an
        older conflicting entry is behind it; otherwise a barrier edge
        could close a cycle no holder edge exposes."""
        if not self._wound_wait:
            return
        me = st.queue.index(req)
        victims = []
        wound_me = False
        for i, e in enumerate(st.queue):
            if e is req or e.owner is req.owner:
                continue
            if (i < me and e.owner.stamp > req.owner.stamp
                    and e.mode in _MODE_CONFLICT[req.mode]):
                victims.append(e.owner)
            elif (i > me and e.owner.stamp < req.owner.stamp
                    and req.mode in _MODE_CONFLICT[e.mode]):
                wound_me = True
        for v in victims:  # after the scan: wounding unparks, mutating the queue
            self._wound(v)
        if wound_me:
            self._wound(req.owner)

    def _wound_younger_holder_vs_waiters(self, st: _KeyState, holder) -> None:
        """New holder installed; wound it if an older parked waiter on this
        key conflicts with the new hold."""
        if not self._wound_wait:
            return
        for waiter in st.queue:
            if (waiter.owner.stamp < holder.stamp
                    and self._conflicts_with_new_holder(waiter, holder, st)):
                self._wound(holder)
                return

    def _grant_walk(self, st: _KeyState) -> None:
        """Grant queued requests front-to-back, stopping at the first
        incompatible one (FIFO fairness barrier)."""
        while st.queue:
            req = st.queue[0]
            if req.owner.wounded and self._wound_wait:
                st.queue.pop(0)
                self._parked.pop(req.owner.stamp, None)
                req.outcome = WOUNDED
                req.event.set()
                continue
            self._refresh(req)
            if not self._compatible(st, req):
                return
            st.queue.pop(0)
            self._parked.pop(req.owner.stamp, None)
            added = self._install(st, req, req.key_name)
            req.outcome = GRANTED
            req.event.set()
            if added:
                self._wound_younger_holder_vs_waiters(st, req.owner)

    def _acquire(self, txn, key: str, req: _Request, blocking: bool,
                 timeout: Optional[float]) -> None:
        req.key_name = key
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._mutex:
            self._check_wounded(txn)
            st = self._state(key)
            holds_here = (txn.stamp in st.readers or st.writer is txn
                          or any(e.owner is txn for e in st.conditions))
            req.upgrade = holds_here
            self._refresh(req)
            if (holds_here or not st.queue) and self._compatible(st, req):
                if self._install(st, req, key):
                    self._wound_younger_holder_vs_waiters(st, txn)
                return
            if not blocking:
                raise WouldBlock(key)
            if txn.stamp in self._parked:
                raise LockUsageError(
                    "owner %d already has a parked request" % txn.stamp)
            if req.upgrade:
                pos = 0
                while pos < len(st.queue) and st.queue[pos].upgrade:
                    pos += 1
                st.queue.insert(pos, req)
            else:
                st.queue.append(req)
            self._parked[txn.stamp] = req
            self._wound_younger_blockers(st, req)
            self._wound_queue_conflicts(st, req)
            # the wounds may have freed the key already
            self._grant_walk(st)
            if req.outcome == GRANTED:
                return
            if req.outcome == WOUNDED:
                raise Wounded(txn.stamp)

        while True:
            remaining = self._poll
            if deadline is not None:
                remaining = min(remaining, max(0.0, deadline - time.monotonic()))
            req.event.wait(remaining)
            with self._mutex:
                if req.outcome == GRANTED:
                    return
                if req.outcome == WOUNDED:
                    raise Wounded(txn.stamp)
                if self._wound_wait and getattr(txn, "wounded", False):
                    # wound delivered through another manager
                    self._unpark(req)
                    req.outcome = WOUNDED
                    raise Wounded(txn.stamp)
                if deadline is not None and time.monotonic() >= deadline:
                    self._unpark(req)
                    st = self._keys.get(key)
                    if st is not None:
                        self._grant_walk(st)
                        self._gc(key, st)
                    raise LockTimeout(key)
