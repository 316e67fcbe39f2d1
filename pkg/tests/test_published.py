"""Published dataset statistics.

The challenge files are not redistributable; point ``SSE_CHALLENGE_TRAIN``
and ``SSE_CHALLENGE_TEST`` at local copies to run the gated checks.
"""

import os

import pytest

from sse.data import build_vocab, length_distribution_report, load_sessions
from sse.synthetic import default_length_distribution

TRAIN = os.environ.get("SSE_CHALLENGE_TRAIN")
TEST = os.environ.get("SSE_CHALLENGE_TEST")
needs_train = pytest.mark.skipif(not TRAIN, reason="SSE_CHALLENGE_TRAIN not set")
needs_both = pytest.mark.skipif(not (TRAIN and TEST), reason="challenge train/test files not set")


def test_synthetic_default_follows_training_length_shares():
    dist = default_length_distribution()
    tail = sum(p for t, p in dist.items() if t > 10)
    shares = {3: 0.452, 4: 0.229, 5: 0.126, 10: 0.010}
    norm = 1.010  # the published column sums to 1.010 after rounding
    for t, p in shares.items():
        assert abs(dist[t] - p / norm) < 1e-12
    assert abs(tail - 0.028 / norm) < 1e-12
    assert max(dist) == 47


@pytest.fixture(scope="module")
def train_sessions():
    return load_sessions(TRAIN)[0]


@needs_train
def test_training_trip_count(train_sessions):
    assert len(train_sessions) == 217_686


@needs_train
def test_training_city_cardinality(train_sessions):
    assert build_vocab(train_sessions).n_cities == 39_901 + 1


@needs_train
def test_training_length_three_share(train_sessions):
    assert round(length_distribution_report(train_sessions).proportions[3], 3) == 0.452


@needs_both
def test_total_prefix_count(train_sessions):
    test_sessions = load_sessions(TEST)[0]
    report = length_distribution_report(list(train_sessions) + list(test_sessions))
    assert report.total_prefixes == 1_186_491
    assert len(test_sessions) == 70_662
