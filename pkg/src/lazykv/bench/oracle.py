"""Serial-equivalence oracle for small concurrent histories.

Transactions are written in a tiny replayable step language over numbered
value slots:

  ReadStep(key, slot)                  read key into slot
  WriteStep(key, expr)                 write expr-over-slots to key
  GuardedWriteStep(key, cond, a, b)    ask whether cond-over-slots holds,
                                       then write a if it did, b otherwise

The same program runs two ways.  Live, against a real engine under threads:
classic protocols read slots eagerly and branch client-side; lazy protocols
bind slots to futures, route the guard through is-true, and learn their
slot values only from the resolved reads the commit returns.  Serially,
against a plain dict.  A history passes when some permutation of its
committed transactions, replayed serially from the initial state, yields
the observed final state and every transaction's observed slot values and
guard answers.  Permutations are pruned by commit-point precedence: a
transaction that committed before another began must come first.
"""

from __future__ import annotations

import itertools
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .. import futexpr
from ..futexpr import Expr, FutureHandle, ResolutionError, Value
from ..locks import Wounded
from ..store import NotFound
from ..tpl import UnsupportedCondition
from .runner import ProtocolApi, make_engine

Slot = int


@dataclass(frozen=True)
class ReadStep:
    key: str
    slot: Slot


@dataclass(frozen=True)
class WriteStep:
    key: str
    expr: Expr


@dataclass(frozen=True)
class GuardedWriteStep:
    key: str
    cond: Expr
    if_true: Expr
    if_false: Expr


Program = Tuple[object, ...]


def slot_handle(slot: Slot) -> FutureHandle:
    # program handles live in their own namespace: engine handles always
    # carry a real key name
    return FutureHandle(slot, "")


def slot_read(slot: Slot) -> Expr:
    return futexpr.read(slot_handle(slot))


@dataclass
class CommittedTxn:
    txn_id: int
    program: Program
    begin_seq: int
    commit_seq: int
    obs_reads: Dict[Slot, Value]
    obs_conds: Tuple[bool, ...]


@dataclass
class ScheduleLog:
    committed: List[CommittedTxn] = field(default_factory=list)
    final_state: Dict[str, Value] = field(default_factory=dict)


# -- live execution --------------------------------------------------------

def _subst(e: Expr, env: Dict[FutureHandle, Expr]) -> Expr:
    """Replace slot reads with the expressions the slots are bound to."""
    if e.kind == "read":
        return env[e.handle]
    if e.kind == "const":
        return e
    return futexpr.compose(e.kind, tuple(_subst(c, env) for c in e.children))


def _slots_of(prog: Program) -> List[Slot]:
    return [s.slot for s in prog if isinstance(s, ReadStep)]


def _execute_txn(api: ProtocolApi, ctx, prog: Program, jitter) -> Tuple[
        Dict[FutureHandle, Expr], Dict[Slot, Value], List[bool]]:
    """Run prog's steps on a live engine.  Returns the slot environment,
    eagerly observed reads (classic only), and guard answers."""
    env: Dict[FutureHandle, Expr] = {}
    obs_reads: Dict[Slot, Value] = {}
    obs_conds: List[bool] = []
    for step in prog:
        jitter()
        if isinstance(step, ReadStep):
            if api.classic:
                v = api.read(ctx, step.key)
                env[slot_handle(step.slot)] = futexpr.const(v)
                obs_reads[step.slot] = v
            else:
                env[slot_handle(step.slot)] = api.read_future(ctx, step.key)
        elif isinstance(step, WriteStep):
            e = _subst(step.expr, env)
            if api.classic:
                api.write_value(ctx, step.key, futexpr.resolve(e, {}))
            else:
                api.write_expr(ctx, step.key, e)
        else:
            cond = _subst(step.cond, env)
            if api.classic:
                r = bool(futexpr.resolve(cond, {}))
            else:
                r = api.is_true(ctx, cond)
            obs_conds.append(r)
            branch = _subst(step.if_true if r else step.if_false, env)
            if api.classic:
                api.write_value(ctx, step.key, futexpr.resolve(branch, {}))
            else:
                api.write_expr(ctx, step.key, branch)
    return env, obs_reads, obs_conds


def run_schedule(protocol: str, programs: Sequence[Program],
                 initial: Dict[str, Value], seed: int = 0,
                 engine=None) -> ScheduleLog:
    """Execute the programs concurrently, one thread each, and log what
    committed.  Pass a prebuilt engine to test a tampered protocol."""
    if engine is None:
        engine = make_engine(protocol)
    api = ProtocolApi(engine, protocol)
    for key, value in initial.items():
        api.load(key, value)

    seq = itertools.count()
    log = ScheduleLog()
    log_mutex = threading.Lock()
    barrier = threading.Barrier(len(programs))

    def worker(tid: int, prog: Program) -> None:
        rng = random.Random(seed * 7919 + tid)

        def jitter() -> None:
            time.sleep(rng.random() * 0.0015)

        barrier.wait()
        jitter()
        ctx = api.begin()
        begin_seq = next(seq)
        try:
            env, obs_reads, obs_conds = _execute_txn(api, ctx, prog, jitter)
            out = api.commit(ctx)
        except (Wounded, NotFound, UnsupportedCondition, ResolutionError):
            ctx.abort()
            return
        if not out.committed:
            return
        commit_seq = next(seq)
        if not api.classic:
            # lazy reads surface only now, in the commit's resolved values
            obs_reads = {s: futexpr.resolve(env[slot_handle(s)], out.rvalues)
                         for s in _slots_of(prog)}
        with log_mutex:
            log.committed.append(CommittedTxn(
                tid, prog, begin_seq, commit_seq,
                obs_reads, tuple(obs_conds)))

    threads = [threading.Thread(target=worker, args=(i, p), daemon=True)
               for i, p in enumerate(programs)]
    for t in threads:
        t.start()
    deadline = time.monotonic() + 30.0
    for t in threads:
        t.join(max(0.1, deadline - time.monotonic()))
    if any(t.is_alive() for t in threads):
        raise RuntimeError("schedule wedged; protocol %s" % protocol)
    log.final_state = api.values()
    return log


# -- serial replay and the search ------------------------------------------

def _replay_matches(t: CommittedTxn, state: Dict[str, Value]) -> bool:
    """Replay t serially on state (mutating it); False on any divergence
    from what t observed live."""
    rv: Dict[FutureHandle, Value] = {}
    cond_i = 0
    pending: Dict[str, Value] = {}

    def current(key: str) -> Optional[Value]:
        return pending.get(key, state.get(key))

    try:
        for step in t.program:
            if isinstance(step, ReadStep):
                v = current(step.key)
                if v is None or v != t.obs_reads.get(step.slot):
                    return False
                rv[slot_handle(step.slot)] = v
            elif isinstance(step, WriteStep):
                pending[step.key] = futexpr.resolve(step.expr, rv)
            else:
                r = bool(futexpr.resolve(step.cond, rv))
                if r != t.obs_conds[cond_i]:
                    return False
                cond_i += 1
                branch = step.if_true if r else step.if_false
                pending[step.key] = futexpr.resolve(branch, rv)
    except ResolutionError:
        return False
    state.update(pending)
    return True


def check_serial_equivalence(log: ScheduleLog,
                             initial_state: Dict[str, Value]) -> bool:
    """True iff some precedence-respecting permutation of the committed
    transactions replays from initial_state to the observed final state,
    reproducing every transaction's observations along the way."""
    txns = sorted(log.committed, key=lambda t: t.commit_seq)
    if len(txns) > 8:
        raise ValueError(
            "exhaustive search capped at 8 committed transactions, got %d"
            % len(txns))
    by_id = {t.txn_id: t for t in txns}
    final = dict(log.final_state)
    seen = set()

    def dfs(remaining: frozenset, state: Dict[str, Value]) -> bool:
        if not remaining:
            return state == final
        memo_key = (remaining, tuple(sorted(state.items())))
        if memo_key in seen:
            return False
        seen.add(memo_key)
        for tid in remaining:
            t = by_id[tid]
            # strictness: anything that committed before t began goes first
            if any(by_id[o].commit_seq < t.begin_seq
                   for o in remaining if o != tid):
                continue
            nxt = dict(state)
            if _replay_matches(t, nxt) and dfs(remaining - {tid}, nxt):
                return True
        return False

    return dfs(frozenset(by_id), dict(initial_state))


# -- random schedule generation --------------------------------------------

def _random_int_expr(rng: random.Random, slots: List[Slot], depth: int = 2) -> Expr:
    if depth == 0 or rng.random() < 0.45:
        if slots and rng.random() < 0.6:
            return slot_read(rng.choice(slots))
        return futexpr.const(rng.randint(0, 9))
    op = futexpr.add if rng.random() < 0.5 else futexpr.sub
    return op(_random_int_expr(rng, slots, depth - 1),
              _random_int_expr(rng, slots, depth - 1))


def random_program(rng: random.Random, keys: Sequence[str]) -> Program:
    steps: List[object] = []
    slots: List[Slot] = []
    for _ in range(rng.randint(2, 4)):
        roll = rng.random()
        if roll < 0.45 or not slots:
            slot = len(slots)
            steps.append(ReadStep(rng.choice(keys), slot))
            slots.append(slot)
        elif roll < 0.8:
            steps.append(WriteStep(rng.choice(keys),
                                   _random_int_expr(rng, slots)))
        else:
            cmp_op = rng.choice([futexpr.ge, futexpr.gt, futexpr.le, futexpr.eq])
            cond = cmp_op(slot_read(rng.choice(slots)),
                          futexpr.const(rng.randint(0, 15)))
            steps.append(GuardedWriteStep(
                rng.choice(keys), cond,
                _random_int_expr(rng, slots), _random_int_expr(rng, slots)))
    return tuple(steps)


def random_schedule(rng: random.Random) -> Tuple[List[Program], Dict[str, Value]]:
    keys = ["k%d" % i for i in range(rng.randint(2, 4))]
    initial = {k: rng.randint(0, 15) for k in keys}
    programs = [random_program(rng, keys) for _ in range(rng.randint(3, 6))]
    return programs, initial
