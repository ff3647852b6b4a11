import numpy as np
import pytest
from hypothesis import given, strategies as st

from ebm_lifecycle.banks import (INITIAL, REJUVENATED, BankInvariantError, DataSource, DualBank,
                                 GeneratorSource, NoiseSource, PairedBank, PersistentBank, draw_batch,
                                 promote, rejuvenate, return_batch)
from ebm_lifecycle.generator import Generator
from ebm_lifecycle.metrics import lifetime_ks_test, lifetime_stats


def bank(n=10, d=2, seed=0):
    return PersistentBank.from_source(n, NoiseSource(d), np.random.default_rng(seed))


def gen_source(d=2):
    return GeneratorSource(Generator.affine(2.0 * np.eye(d), np.ones(d)))


def test_full_draw_is_permutation():
    b = bank(12)
    idx, states = draw_batch(b, 12, np.random.default_rng(1))
    assert sorted(idx.tolist()) == list(range(12))
    np.testing.assert_array_equal(states, b.states[idx])


def test_oversized_draw_rejected():
    with pytest.raises(ValueError):
        bank(5).draw(6, np.random.default_rng(0))


def test_paired_draw_alignment():
    pb = PairedBank.from_generator(20, gen_source(), np.random.default_rng(0))
    idx, (z, x) = pb.draw(7, np.random.default_rng(1))
    np.testing.assert_array_equal(z, pb.latents[idx])
    np.testing.assert_array_equal(x, pb.images[idx])
    np.testing.assert_allclose(x, 2 * z + 1)


def test_uniform_slot_frequency():
    b = bank(100, 1)
    rng = np.random.default_rng(5)
    counts = np.zeros(100)
    for _ in range(100000):
        counts[b.draw(1, rng)[0]] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.01) <= 0.003)


def test_return_round_trip_and_lifetimes():
    b = bank(10)
    before = b.states.copy()
    idx, states = b.draw(4, np.random.default_rng(2))
    return_batch(b, idx, states, steps_added=100)
    np.testing.assert_array_equal(b.states, before)
    assert b.lifetimes[idx].tolist() == [100] * 4
    assert b.lifetimes.sum() == 400
    return_batch(b, idx, states, steps_added=100)
    assert b.lifetimes[idx].tolist() == [200] * 4


def test_return_validates():
    b = bank(10)
    idx, states = b.draw(4, np.random.default_rng(2))
    with pytest.raises(ValueError):
        b.put_back(idx, states[:3])
    with pytest.raises(IndexError):
        b.put_back([10], states[:1])


def test_rejuvenate_p0_and_p1():
    b = bank(10)
    b.lifetimes[:] = 50
    before = b.states.copy()
    rng = np.random.default_rng(3)
    assert rejuvenate(b, np.arange(10), NoiseSource(2), 0.0, rng) == 0
    np.testing.assert_array_equal(b.states, before)
    assert rejuvenate(b, np.arange(5), NoiseSource(2), 1.0, rng) == 5
    assert b.lifetimes[:5].tolist() == [0] * 5 and b.lifetimes[5:].tolist() == [50] * 5
    assert np.all(b.provenance[:5] == REJUVENATED) and np.all(b.provenance[5:] == INITIAL)
    assert b.rejuvenation_lifetimes == [50] * 5
    with pytest.raises(ValueError):
        b.rejuvenate([0], NoiseSource(2), 1.5, rng)


def test_paired_rejuvenation_regenerates_pair():
    src = gen_source()
    pb = PairedBank.from_generator(8, src, np.random.default_rng(0))
    idx = np.arange(8)
    pb.put_back(idx, (pb.latents, pb.images + 5.0), steps_added=10)
    n = pb.rejuvenate(idx, src, 1.0, np.random.default_rng(1))
    assert n == 8
    np.testing.assert_allclose(pb.images, 2 * pb.latents + 1)
    assert pb.update_rounds.tolist() == [0] * 8
    np.testing.assert_array_equal(pb.origin_latents, pb.latents)


def test_paired_forced_rejuvenation():
    src = gen_source()
    pb = PairedBank.from_generator(6, src, np.random.default_rng(0))
    pb.put_back([0, 1], (pb.latents[:2], pb.images[:2]))
    pb.put_back([0], (pb.latents[:1], pb.images[:1]))
    # slot 0 has 2 rounds, slot 1 has 1; with p = 0 only slot 0 is forced at w = 2
    n = pb.rejuvenate(np.arange(6), src, 0.0, np.random.default_rng(1), max_rounds=2)
    assert n == 1
    assert pb.update_rounds.tolist() == [0, 1, 0, 0, 0, 0]


def test_promotion_none_below_threshold():
    rng = np.random.default_rng(0)
    dual = DualBank.from_source(8, 8, 5, NoiseSource(1), rng, steps_per_round=10)
    dual.counts[:] = 4
    before = dual.update.states.copy()
    assert promote(dual, np.arange(8), NoiseSource(1), rng) == 0
    np.testing.assert_array_equal(dual.update.states, before)


def test_single_promotion():
    rng = np.random.default_rng(0)
    dual = DualBank.from_source(8, 8, 5, NoiseSource(1), rng, steps_per_round=10)
    dual.counts[:] = 0
    dual.counts[3] = 5
    moving = dual.burn_in.states[3].copy()
    before = dual.update.states.copy()
    assert dual.promote(np.arange(8), NoiseSource(1), rng) == 1
    changed = np.flatnonzero(np.any(dual.update.states != before, axis=1))
    assert changed.size == 1
    np.testing.assert_array_equal(dual.update.states[changed[0]], moving)
    assert dual.counts[3] == 0 and dual.burn_in.lifetimes[3] == 0
    assert dual.burn_in.provenance[3] == REJUVENATED


def test_promotion_gate_enforced():
    rng = np.random.default_rng(0)
    dual = DualBank.from_source(4, 4, 3, NoiseSource(1), rng, steps_per_round=10)
    dual.burn_in.provenance[0] = REJUVENATED
    dual.burn_in.lifetimes[0] = 29
    dual.counts[:] = 0
    dual.counts[0] = 3
    with pytest.raises(BankInvariantError):
        dual.promote([0], NoiseSource(1), rng)


def test_promotion_rate_matches_renewal():
    rng = np.random.default_rng(1)
    n1, b, D = 200, 20, 10
    dual = DualBank.from_source(n1, 50, D, NoiseSource(1), rng, steps_per_round=1)
    total = 0
    rounds = 10000
    for _ in range(rounds):
        idx, x = dual.burn_in.draw(b, rng)
        dual.record_round(idx)
        dual.burn_in.put_back(idx, x, 1)
        total += dual.promote(idx, NoiseSource(1), rng)
    assert total / rounds == pytest.approx(b / D, rel=0.1)


def test_lifetime_law_small():
    rng = np.random.default_rng(2)
    b = bank(100, 1)
    for _ in range(400):
        idx, x = b.draw(50, rng)
        b.put_back(idx, x, steps_added=10)
        b.rejuvenate(idx, NoiseSource(1), 0.2, rng)
    st_ = lifetime_stats(b)
    assert st_.mean == pytest.approx(50, rel=0.1)
    assert lifetime_ks_test(b.rejuvenation_lifetimes, 0.2, 10).pvalue > 0.01


def test_data_source():
    from ebm_lifecycle.toydata import load_dataset
    src = DataSource(load_dataset("ring-4-2d"))
    assert src.draw(5, np.random.default_rng(0)).shape == (5, 2)


def test_state_dict_round_trip():
    rng = np.random.default_rng(0)
    dual = DualBank.from_source(6, 6, 2, NoiseSource(1), rng, steps_per_round=1)
    dual.burn_in.rejuvenation_lifetimes = [3, 4]
    dual.promotions = 7
    other = DualBank.from_source(6, 6, 2, NoiseSource(1), np.random.default_rng(9), steps_per_round=1)
    other.load_state_dict(dual.state_dict("d"), "d")
    assert other.promotions == 7 and other.burn_in.rejuvenation_lifetimes == [3, 4]
    np.testing.assert_array_equal(other.counts, dual.counts)
    np.testing.assert_array_equal(other.update.states, dual.update.states)


@given(ops=st.lists(st.tuples(st.sampled_from(["cycle", "rejuv", "force"]), st.integers(1, 6),
                              st.floats(0, 1)), max_size=25), seed=st.integers(0, 1000))
def test_pairing_and_capacity_invariants(ops, seed):
    """Every image descends from its own slot's latent: generated from it, then moved by Langevin-like
    shifts that are tracked exactly here."""
    src = gen_source(1)
    rng = np.random.default_rng(seed)
    pb = PairedBank.from_generator(6, src, rng)
    shift = np.zeros(6)
    for op, n, p in ops:
        idx, (z, x) = pb.draw(n, rng)
        if op == "cycle":
            pb.put_back(idx, (z, x + 0.5), steps_added=3)
            shift[idx] += 0.5
        else:
            hit_before = pb.update_rounds.copy()
            pb.put_back(idx, (z, x), steps_added=3)
            pb.rejuvenate(idx, src, p, rng, max_rounds=1 if op == "force" else 0)
            reset = pb.update_rounds == 0
            shift[reset] = 0.0
            if op == "force":
                assert np.all(pb.update_rounds[idx] == 0)
            del hit_before
        assert pb.capacity == 6 and pb.latents.shape == (6, 1)
        assert np.all(pb.lifetimes >= 0)
        np.testing.assert_allclose(pb.images[:, 0], 2 * pb.origin_latents[:, 0] + 1 + shift, atol=1e-12)
        np.testing.assert_array_equal(pb.latents, pb.origin_latents)
