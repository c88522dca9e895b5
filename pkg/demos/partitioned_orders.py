"""
Future-keyed writes across partitions
=====================================

An order row is written at a key that does not exist yet: the key is
built from the order counter, and the counter is a future.  Two-phase
commit normally needs the key to know which partition must hold the
write lock, so an unresolved key costs an extra prepare round.  A
directory placement policy can dodge the round: if the key template's
prefix already decides the partition and the inputs live there too, the
write rides along in round one.

Run with: python3 demos/partitioned_orders.py
"""

import lazykv
from lazykv import add, concat, const, to_str

DIRECTORY = {"w1/": 0, "w2/": 1}


def place_order(cluster):
    """One order at warehouse 1 plus a stock decrement at warehouse 2."""
    ctx = cluster.begin()
    ctr = cluster.lsd_read_future_key(ctx, const("w1/next_oid"))
    remote = cluster.lsd_read_future_key(ctx, const("w2/stock"))
    row_key = concat(const("w1/order/"), to_str(ctr))
    ctx.write_future_key(row_key, const("five widgets"))
    ctx.write("w1/next_oid", add(ctr, const(1)))
    ctx.write("w2/stock", lazykv.sub(remote, const(5)))
    return cluster.lsd_commit(ctx)


def fresh(pm):
    cluster = lazykv.Cluster(pm, family="occ")
    cluster.load("w1/next_oid", 1)
    cluster.load("w2/stock", 100)
    return cluster


# with the directory, "w1/order/<anything>" is pinned to partition 0 and
# the counter it depends on lives there too: the unresolved key is safe
cluster = fresh(lazykv.DirectoryPartitionMap(2, DIRECTORY))
out = place_order(cluster)
print("directory placement: prepare rounds =", out.prepare_rounds,
      ", messages =", out.messages)
print("  order row:", cluster.values_dict()["w1/order/1"])

# hashed placement scatters keys, so nobody knows where the row belongs
# until the counter resolves; the coordinator buys a second round
cluster = fresh(lazykv.HashPartitionMap(2))
out = place_order(cluster)
print("hash placement:      prepare rounds =", out.prepare_rounds)

# and a transaction that stays on one partition skips 2PC entirely
cluster = fresh(lazykv.DirectoryPartitionMap(2, DIRECTORY))
ctx = cluster.begin()
ctr = cluster.lsd_read_future_key(ctx, const("w1/next_oid"))
ctx.write("w1/next_oid", add(ctr, const(1)))
out = cluster.lsd_commit(ctx)
print("single partition:    prepare rounds =", out.prepare_rounds,
      ", messages =", out.messages)
