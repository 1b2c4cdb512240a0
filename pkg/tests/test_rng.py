import numpy as np

from taskforge.rng import RngState, mix_key


def test_same_seed_same_sequence():
    a = RngState(42)
    b = RngState(42)
    assert np.array_equal(a.integers(0, 1000, 50), b.integers(0, 1000, 50))
    assert np.array_equal(a.normal(0, 1, 20), b.normal(0, 1, 20))


def test_children_reproducible_and_distinct():
    root = RngState(7)
    c1 = root.child("bundle", 3)
    c2 = RngState(7).child("bundle", 3)
    c3 = root.child("bundle", 4)
    assert c1.seed == c2.seed
    assert c1.seed != c3.seed
    assert np.array_equal(c1.integers(0, 100, 10), c2.integers(0, 100, 10))


def test_string_and_int_parts_do_not_collide():
    assert mix_key(0, "1") != mix_key(0, 1)
    assert mix_key(0, "ab") != mix_key(0, "a", "b")


def test_draw_counter_advances():
    r = RngState(0)
    assert r.draws == 0
    r.random()
    r.integers(0, 10)
    assert r.draws == 2


def test_choice_and_shuffle_deterministic():
    items = list(range(20))
    a = RngState(5).shuffled(items)
    b = RngState(5).shuffled(items)
    assert a == b
    assert sorted(a) == items
    picks = RngState(9).choice(items, size=5, replace=False)
    assert len(set(picks)) == 5
