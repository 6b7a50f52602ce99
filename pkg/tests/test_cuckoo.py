"""Membership filter: space bound, placement relations, FPR, serialization."""

import math
import random

import mpmath
import pytest

from edts.cuckoo import (
    CapacityExceededError,
    CuckooFilter,
    FilterParams,
    MalformedFilterError,
    buckets_for_capacity,
    fingerprint_bits,
    space_cost_bits,
    space_cost_bytes,
)

from conftest import find_collision_tx, make_tx


class TestSpaceCost:
    def test_published_operating_point(self):
        bits = space_cost_bits(1e-6, 0.955)
        assert bits == pytest.approx(24.012, abs=5e-4)
        assert space_cost_bytes(1e-6, 0.955) == pytest.approx(3.0015, abs=1e-3)

    def test_trivial_point(self):
        # log2(8) = 3, plus 3, divided by 1
        assert space_cost_bits(0.125, 1.0) == 6.0

    def test_matches_extended_precision(self):
        # Frozen from a 50-digit evaluation of (log2(1e12) + 3) / 0.955.
        expected = 44.88286611376790384758517
        assert space_cost_bits(1e-12, 0.955) == pytest.approx(expected, rel=1e-14)
        mpmath.mp.dps = 50
        oracle = (mpmath.log(mpmath.mpf(10) ** 12, 2) + 3) / mpmath.mpf("0.955")
        assert float(oracle) == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize(
        "eps,alpha",
        [(0.0, 0.5), (1.0, 0.5), (1e-3, 0.0), (1e-3, 1.5), (-1.0, 1.0)],
    )
    def test_domain_errors(self, eps, alpha):
        with pytest.raises(ValueError):
            space_cost_bits(eps, alpha)

    def test_fingerprint_width_examples(self):
        assert fingerprint_bits(1e-6) == 23
        assert fingerprint_bits(1e-2) == 10
        assert fingerprint_bits(0.125) == 6


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            FilterParams(epsilon=0.3)  # not a power of ten
        with pytest.raises(ValueError):
            FilterParams(alpha=0.95505)  # off the 1e-4 grid
        with pytest.raises(ValueError):
            FilterParams(bucket_slots=2)
        p = FilterParams(epsilon=1e-6, alpha=0.955, seed=7)
        assert p.epsilon_exponent == 6
        assert p.alpha_fixed_point == 9550
        assert p.fingerprint_bits == 23


class TestInsertContains:
    def test_membership_after_insert(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3), 100)
        item = rnd.randbytes(32)
        assert flt.insert(item)
        assert flt.contains(item)

    def test_delete_removes_membership(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3), 100)
        item = rnd.randbytes(32)
        flt.insert(item)
        assert flt.delete(item)
        assert not flt.contains(item)
        assert not flt.delete(item)

    def test_empty_filter_rejects_everything(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3), 100)
        assert not any(flt.contains(rnd.randbytes(32)) for _ in range(1000))

    def test_fill_to_capacity_many_seeds(self):
        # The load factor is the empirically sustainable fill for 4-slot
        # buckets; inserting exactly `capacity` items must always succeed.
        for seed in range(120):
            params = FilterParams(epsilon=1e-2, alpha=0.955, seed=seed)
            flt = CuckooFilter(params, 256)
            rnd = random.Random(seed * 31 + 5)
            assert all(flt.insert(rnd.randbytes(32)) for _ in range(flt.capacity))
            assert flt.occupied == flt.capacity

    def test_capacity_error_past_the_bound(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-2), 8)
        for _ in range(flt.capacity):
            assert flt.insert(rnd.randbytes(32))
        with pytest.raises(CapacityExceededError):
            flt.insert(rnd.randbytes(32))

    def test_no_false_negatives_random_sequences(self):
        for seed in range(20):
            rnd = random.Random(seed)
            flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-2, seed=seed), 500)
            items = [rnd.randbytes(32) for _ in range(rnd.randrange(1, 480))]
            for item in items:
                assert flt.insert(item)
            assert all(flt.contains(item) for item in items)

    def test_sizing_covers_requested_items(self):
        params = FilterParams(epsilon=1e-3, alpha=0.955)
        for items in (0, 1, 5, 100, 3911, 3912, 100_000):
            nb = buckets_for_capacity(params, items)
            assert nb & (nb - 1) == 0
            assert CuckooFilter(params, nb).capacity >= items


class TestFalsePositiveRate:
    @pytest.mark.parametrize("epsilon", [1e-2, 1e-3])
    def test_fpr_within_twice_target(self, epsilon):
        rnd = random.Random(99)
        params = FilterParams(epsilon=epsilon, alpha=0.955, seed=4)
        flt = CuckooFilter.for_capacity(params, 30_000)
        inserted = set()
        while len(inserted) < 30_000:
            inserted.add(rnd.randbytes(32))
        for item in inserted:
            assert flt.insert(item)
        probes = 1_000_000
        hits = 0
        randbytes = rnd.randbytes
        contains = flt.contains
        for _ in range(probes):
            probe = randbytes(32)
            if probe not in inserted and contains(probe):
                hits += 1
        assert hits / probes <= 2 * epsilon
        assert all(contains(item) for item in inserted)


class TestPlacement:
    def test_deterministic(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3, seed=11), 1000)
        item = rnd.randbytes(32)
        assert flt.bucket_and_fingerprint(item) == flt.bucket_and_fingerprint(item)

    def test_xor_relation_is_an_involution(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3, seed=11), 1000)
        for _ in range(200):
            (i1, i2), fp = flt.bucket_and_fingerprint(rnd.randbytes(32))
            assert flt._alt_index(i1, fp) == i2
            assert flt._alt_index(i2, fp) == i1

    def test_engineered_collision_shares_placement(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-2, seed=3), 100)
        target = make_tx(rnd)
        partner = find_collision_tx(flt, target.txid, rnd)
        assert flt.bucket_and_fingerprint(partner.txid) == flt.bucket_and_fingerprint(
            target.txid
        )
        flt.insert(target.txid)
        assert flt.contains(partner.txid)  # indistinguishable, by construction

    def test_fingerprint_never_zero(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-1, seed=5), 64)
        for _ in range(5000):
            _, fp = flt.bucket_and_fingerprint(rnd.randbytes(32))
            assert fp != 0

    def test_lookup_agrees_with_contains(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-2, seed=8), 200)
        members = [rnd.randbytes(32) for _ in range(150)]
        for m in members:
            flt.insert(m)
        for m in members:
            assert flt.lookup(m) == flt.bucket_and_fingerprint(m)
        for _ in range(2000):
            probe = rnd.randbytes(32)
            assert (flt.lookup(probe) is not None) == flt.contains(probe)


class TestSerialization:
    def _equivalent(self, a, b, probes, members):
        return all(a.contains(p) == b.contains(p) for p in probes) and all(
            b.contains(m) for m in members
        )

    def test_empty_roundtrip(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3, seed=2), 100)
        twin = CuckooFilter.deserialize(flt.serialize())
        probes = [rnd.randbytes(32) for _ in range(1000)]
        assert self._equivalent(flt, twin, probes, [])

    def test_loaded_roundtrip(self, rnd):
        params = FilterParams(epsilon=1e-6, alpha=0.955, seed=42)
        flt = CuckooFilter.for_capacity(params, 2100)
        members = [rnd.randbytes(32) for _ in range(2100)]
        for m in members:
            assert flt.insert(m)
        blob = flt.serialize()
        twin = CuckooFilter.deserialize(blob)
        assert twin.params == params
        assert twin.occupied == flt.occupied
        probes = [rnd.randbytes(32) for _ in range(10_000)]
        assert self._equivalent(flt, twin, probes, members)

    def test_serialization_is_deterministic(self):
        blobs = []
        for _ in range(2):
            rnd = random.Random(555)
            flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3, seed=9), 1000)
            for _ in range(900):
                flt.insert(rnd.randbytes(32))
            blobs.append(flt.serialize())
        assert blobs[0] == blobs[1]

    @pytest.mark.parametrize(
        "epsilon,alpha", [(1e-2, 0.955), (1e-3, 0.955), (1e-6, 0.955), (1e-3, 1.0), (1e-1, 1.0)]
    )
    def test_size_bound_and_header_overhead(self, epsilon, alpha):
        # Whole bits per stored fingerprint: the realized cost is the
        # per-item bound rounded up to an integer bit width.
        params = FilterParams(epsilon=epsilon, alpha=alpha, seed=1)
        flt = CuckooFilter.for_capacity(params, 5000)
        blob = flt.serialize()
        budget_bits = math.ceil(space_cost_bits(epsilon, alpha)) * flt.capacity
        assert CuckooFilter.HEADER_SIZE <= 64
        assert len(blob) <= math.ceil(budget_bits / 8) + CuckooFilter.HEADER_SIZE

    def test_truncated_blob_rejected(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3, seed=2), 500)
        for _ in range(100):
            flt.insert(rnd.randbytes(32))
        blob = flt.serialize()
        for cut in (0, 5, CuckooFilter.HEADER_SIZE, len(blob) - 1):
            with pytest.raises(MalformedFilterError):
                CuckooFilter.deserialize(blob[:cut])
        with pytest.raises(MalformedFilterError):
            CuckooFilter.deserialize(blob + b"\x00")
        with pytest.raises(MalformedFilterError):
            CuckooFilter.deserialize(b"\xff" + blob[1:])

    def test_corrupt_count_rejected(self, rnd):
        flt = CuckooFilter.for_capacity(FilterParams(epsilon=1e-3, seed=2), 500)
        for _ in range(100):
            flt.insert(rnd.randbytes(32))
        blob = bytearray(flt.serialize())
        blob[17] ^= 0xFF  # item-count field
        with pytest.raises(MalformedFilterError):
            CuckooFilter.deserialize(bytes(blob))
