"""
Reserving stock with a lazy transaction
=======================================

A client wants ten units of an item.  The classic way is to read the
stock level, check it client-side, and write back the decrement; between
the read and the commit the value can go stale.  The lazy way never
looks at the value at all: the transaction asks the store to promise
that "stock >= 10" holds, writes an expression that subtracts ten from
whatever the value turns out to be, and lets the commit evaluate
everything against the freshest data.

Run with: python3 demos/reserve_stock.py
"""

import threading
import time

import lazykv
from lazykv import const, ge, sub

# -- the happy path -------------------------------------------------------

store = lazykv.Store()
store.put("stock", 42, 1)

engine = lazykv.OccEngine(store)
txn = engine.begin()

# a future: no message goes to storage, we just name the unread value
f = lazykv.read_future("stock", txn)

# one round trip: the server answers the predicate, not the value
ok = engine.lsd_is_true(txn, ge(f, const(10)))
print("is stock >= 10?", ok)

# the write is an expression over the future; nothing is computed yet
txn.write("stock", sub(f, const(10)))

out = engine.lsd_commit(txn)
print("committed:", out.committed)
print("stock resolved to", out.rvalues[f.handle], "inside the commit")
print("store now holds", store.get("stock"))
print()

# -- an optimistic race ---------------------------------------------------
# A second client drains the stock to 5 after our guard was answered but
# before we commit.  The optimistic engine re-checks the promise at
# commit time and aborts us rather than oversell.

store = lazykv.Store()
store.put("stock", 42, 1)
engine = lazykv.OccEngine(store)

txn = engine.begin()
f = lazykv.read_future("stock", txn)
print("guard answered:", engine.lsd_is_true(txn, ge(f, const(10))))

racer = engine.begin()
racer.write("stock", const(5))
engine.lsd_commit(racer)
print("meanwhile somebody set stock to", store.get("stock")[0])

txn.write("stock", sub(f, const(10)))
out = engine.lsd_commit(txn)
print("our commit:", out.committed, "reason:", out.reason)
print()

# -- the same race under locking ------------------------------------------
# The locking engine installs the promise as a condition lock.  The
# racing write of 5 would violate it, so the racer parks until we are
# done; our decrement lands first and nobody oversells.

store = lazykv.Store()
store.put("stock", 42, 1)
engine = lazykv.TplEngine(store)

txn = engine.begin()
f = lazykv.read_future("stock", txn)
print("guard answered:", engine.lsd_is_true(txn, ge(f, const(10))))
txn.write("stock", sub(f, const(10)))

racer = engine.begin()
racer.write("stock", const(5))
done = []
t = threading.Thread(
    target=lambda: done.append(engine.lsd_commit(racer).committed))
t.start()
time.sleep(0.05)
print("racer finished while we hold the condition?", bool(done))

out = engine.lsd_commit(txn)
t.join()
print("our commit:", out.committed,
      "; racer committed after us:", done[0])
print("version history ended at", store.get("stock"))
