"""Domain types, buckets and seeded task construction."""

import datetime as dt

import numpy as np
import pytest

from neurovol.core import (
    Buckets,
    Coordinate,
    DayRecord,
    OptionType,
    Quote,
    RawQuoteRecord,
    TaskSource,
    derive_seed,
    group_by_maturity,
    make_task,
)
from neurovol.errors import DomainError, InsufficientQuotes

from conftest import flat_day, random_quotes


def _day(n, seed=0, surface=None):
    return DayRecord(day_id=3, quotes=tuple(random_quotes(n, seed)), synthetic_surface=surface)


class TestDomainTypes:
    def test_coordinate_rejects_non_positive_tau(self):
        with pytest.raises(DomainError):
            Coordinate(0.0, 0.0)
        with pytest.raises(DomainError):
            Coordinate(float("nan"), 1.0)

    def test_quote_vol_bounds(self):
        with pytest.raises(DomainError):
            Quote.at(0.0, 1.0, 0.0)
        with pytest.raises(DomainError):
            Quote.at(0.0, 1.0, 5.0)
        assert Quote.at(0.1, 0.5, 0.2).k == 0.1

    def test_raw_record_derived_fields(self):
        record = RawQuoteRecord(
            date=dt.date(2020, 1, 1),
            expiry=dt.date(2020, 12, 31),
            strike=100.0,
            option_type=OptionType.parse("C"),
            bid=9.0,
            ask=11.0,
            forward=100.0,
            discount_factor=0.99,
        )
        assert record.mid == 10.0
        assert record.log_moneyness == 0.0
        assert record.tau == 365 / 365.0

    def test_raw_record_invariants(self):
        with pytest.raises(DomainError):
            RawQuoteRecord(dt.date(2020, 1, 2), dt.date(2020, 1, 1), 100.0, OptionType.CALL, 1.0, 2.0, 100.0, 1.0)
        with pytest.raises(DomainError):
            RawQuoteRecord(dt.date(2020, 1, 1), dt.date(2020, 2, 1), 100.0, OptionType.CALL, 2.0, 1.0, 100.0, 1.0)
        with pytest.raises(DomainError):
            OptionType.parse("straddle")

    def test_day_sorts_quotes_and_requires_quotes(self):
        day = _day(30)
        keys = [(q.tau, q.k) for q in day.quotes]
        assert keys == sorted(keys)
        with pytest.raises(InsufficientQuotes):
            DayRecord(day_id=0, quotes=())

    def test_forward_and_discount_interpolation(self):
        day = DayRecord(
            day_id=0,
            quotes=(Quote.at(0.0, 0.5, 0.2),),
            forward_curve={1.0: 102.0, 0.5: 101.0},
            discount_curve={0.5: 0.99, 1.0: 0.97},
        )
        assert day.forward(0.75) == pytest.approx(101.5)
        assert day.forward(3.0) == 102.0
        assert day.discount(0.75) == pytest.approx(0.98)
        assert DayRecord(day_id=1, quotes=(Quote.at(0.0, 0.5, 0.2),)).discount(1.0) == 1.0


class TestBuckets:
    def test_maturity_edges(self):
        assert Buckets.maturity(0.25) == "short"
        assert Buckets.maturity(0.2501) == "mid"
        assert Buckets.maturity(1.0) == "mid"
        assert Buckets.maturity(1.01) == "long"

    def test_moneyness_edges(self):
        assert Buckets.moneyness(0.05) == "atm"
        assert Buckets.moneyness(-0.2) == "ntm"
        assert Buckets.moneyness(0.21) == "ftm"


class TestMakeTask:
    def test_real_to_real_uses_all_remaining_quotes(self):
        day = _day(300)
        task = make_task(day, 100, source=TaskSource.REAL_TO_REAL, rng_seed=5)
        assert task.n_context == 100
        assert task.n_targets == 200
        context = {q.coord for q in task.context}
        assert not context & {q.coord for q in task.targets}
        assert context | {q.coord for q in task.targets} == {q.coord for q in day.quotes}

    def test_no_quotes_left_for_targets(self):
        with pytest.raises(InsufficientQuotes):
            make_task(_day(100), 100, n_target=1, source=TaskSource.REAL_TO_REAL)

    def test_context_larger_than_day(self):
        with pytest.raises(InsufficientQuotes):
            make_task(_day(10), 11)

    def test_deterministic_given_seed(self):
        day = _day(120)
        a = make_task(day, 40, rng_seed=9)
        b = make_task(day, 40, rng_seed=9)
        assert a == b
        assert make_task(day, 40, rng_seed=10) != a

    def test_contexts_are_nested_across_sizes(self):
        day = _day(150)
        small = make_task(day, 50, rng_seed=2)
        large = make_task(day, 100, rng_seed=2)
        assert small.context == large.context[:50]

    def test_synthetic_targets(self):
        surface = tuple(random_quotes(400, seed=1))
        day = _day(60, surface=surface)
        task = make_task(day, 30, source=TaskSource.REAL_TO_SYNTHETIC, rng_seed=0)
        assert task.n_targets == 256
        assert set(task.targets) <= set(surface)
        assert set(task.context) <= set(day.quotes)
        small = make_task(day, 30, n_target=10, source=TaskSource.REAL_TO_SYNTHETIC, rng_seed=0)
        assert small.n_targets == 10

    def test_synthetic_source_needs_surface(self):
        with pytest.raises(InsufficientQuotes):
            make_task(_day(60), 30, source=TaskSource.REAL_TO_SYNTHETIC)


class TestHelpers:
    def test_derive_seed_is_stable_and_key_sensitive(self):
        assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
        assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)

    def test_group_by_maturity(self):
        day = flat_day(n_per_slice=5, taus=(1.0, 0.25))
        slices = group_by_maturity(day.quotes)
        assert list(slices) == [0.25, 1.0]
        for quotes in slices.values():
            ks = [q.k for q in quotes]
            assert ks == sorted(ks)
            assert len(quotes) == 5
        np.testing.assert_allclose([q.vol for q in day.quotes], 0.2)
