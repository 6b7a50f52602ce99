"""Shared fixtures and brute-force helpers for the test suite."""

import random

import pytest

from edts.dts import DtsAttributes, Mempool, Priority, Transaction


def make_tx(rnd: random.Random, *, arrival=None, amount=None, a3=0.1031, size_bytes=500):
    amount = amount if amount is not None else rnd.lognormvariate(11.0, 1.2)
    return Transaction.create(
        amount=amount,
        fee=amount * a3,
        arrival_time=arrival if arrival is not None else rnd.randrange(10**9),
        size_bytes=size_bytes,
        entropy=rnd.getrandbits(63),
    )


def fill_mempool(rnd: random.Random, n: int, *, max_size=None, **kwargs) -> Mempool:
    mp = Mempool(max_size or max(n, 1))
    for i in range(n):
        mp.add(make_tx(rnd, arrival=i, **kwargs))
    return mp


def find_collision_tx(
    flt, target_txid: bytes, rnd: random.Random, *, max_tries=500_000, **tx_kwargs
):
    """Brute-force a real transaction indistinguishable from `target_txid`.

    Returns a Transaction whose txid maps to the same (bucket pair,
    fingerprint) in `flt`.  Feasible only at small fingerprint widths.
    """
    want = flt.bucket_and_fingerprint(target_txid)
    for _ in range(max_tries):
        tx = make_tx(rnd, **tx_kwargs)
        if tx.txid != target_txid and flt.bucket_and_fingerprint(tx.txid) == want:
            return tx
    raise AssertionError("no fingerprint collision found within the try budget")


@pytest.fixture
def rnd():
    return random.Random(0xED75)


@pytest.fixture
def default_attrs():
    return DtsAttributes(
        a1_mempool_size=75_032,
        a2_priority=Priority.TIME_BASED,
        a3_fee_percentage=0.1031,
        a4_designated_small_space=False,
        a7_max_leaf_space=36.0,
        a8_scale_mu=9.5,
        a9_shape_sigma=0.99,
    )
