import numpy as np

from mvmark.seeding import KNOWN_STREAMS, stream_rng, stream_seed


def test_stream_seed_is_deterministic():
    for name in KNOWN_STREAMS:
        assert stream_seed(42, name) == stream_seed(42, name)


def test_streams_are_distinct_per_name():
    seeds = {name: stream_seed(42, name) for name in KNOWN_STREAMS}
    assert len(set(seeds.values())) == len(KNOWN_STREAMS)


def test_streams_are_distinct_per_seed():
    assert stream_seed(0, "shuffle") != stream_seed(1, "shuffle")


def test_stream_rng_reproduces_draws():
    a = stream_rng(7, "select").integers(0, 1000, size=10)
    b = stream_rng(7, "select").integers(0, 1000, size=10)
    assert np.array_equal(a, b)


def test_stream_rng_independent_of_other_streams():
    # drawing from one stream must not perturb another
    first = stream_rng(7, "split").integers(0, 1000, size=5)
    stream_rng(7, "attack").integers(0, 1000, size=100)
    again = stream_rng(7, "split").integers(0, 1000, size=5)
    assert np.array_equal(first, again)


def test_large_seeds_are_reduced_not_rejected():
    assert stream_seed(2**40 + 3, "data") == stream_seed((2**40 + 3) & 0xFFFFFFFF, "data")
