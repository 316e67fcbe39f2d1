"""Seeded synthetic trips with block-structured (geographic) city transitions."""

from __future__ import annotations

from datetime import date, timedelta
from typing import Mapping

import numpy as np

from .data import Booking, Session

# Share of trips per number of prediction steps in the challenge training
# data; the ">10" mass is spread geometrically over 11..47 (48 bookings is
# the longest observed trip).
_TRAIN_STEP_SHARES = {1: 0.001, 2: 0.003, 3: 0.452, 4: 0.229, 5: 0.126, 6: 0.074,
                      7: 0.044, 8: 0.027, 9: 0.016, 10: 0.010}
_TAIL_SHARE = 0.028
MAX_STEPS = 47


def default_length_distribution() -> dict[int, float]:
    dist = dict(_TRAIN_STEP_SHARES)
    tail = np.array([0.7 ** i for i in range(MAX_STEPS - 10)])
    tail *= _TAIL_SHARE / tail.sum()
    dist.update({11 + i: float(p) for i, p in enumerate(tail)})
    total = sum(dist.values())
    return {t: p / total for t, p in dist.items()}


def transition_matrix(n_cities: int, block_count: int, within_block: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic city transition matrix and the block of each city.

    ``within_block`` of each row's mass goes to the city's own block, split
    by a Dirichlet(1) draw; the rest is spread evenly over other blocks.
    """
    blocks = np.arange(n_cities) * block_count // n_cities
    P = np.zeros((n_cities, n_cities))
    for i in range(n_cities):
        same = np.flatnonzero(blocks == blocks[i])
        other = np.flatnonzero(blocks != blocks[i])
        inside = within_block if other.size else 1.0
        P[i, same] = inside * rng.dirichlet(np.ones(same.size))
        if other.size:
            P[i, other] = (1.0 - inside) / other.size
    return P, blocks


def generate_synthetic(n_sessions: int, n_cities: int, block_count: int,
                       length_distribution: Mapping[int, float] | None = None,
                       seed: int = 0, within_block: float = 0.85) -> list[Session]:
    """Generate trips from a first-order Markov chain over cities.

    ``length_distribution`` maps a number of prediction steps (bookings - 1)
    to its probability mass.  Hotel country is the city's block, so
    geography is visible to a model through the country feature.
    """
    if not n_cities >= block_count >= 1:
        raise ValueError("need n_cities >= block_count >= 1")
    if not 0.0 <= within_block <= 1.0:
        raise ValueError("within_block must be a probability")
    dist = dict(length_distribution or default_length_distribution())
    steps = np.array(sorted(dist), dtype=np.int64)
    mass = np.array([dist[t] for t in steps], dtype=float)
    if (mass < 0).any() or not np.isfinite(mass).all() or mass.sum() <= 0:
        raise ValueError("length distribution needs nonnegative, finite, nonzero mass")
    if (steps < 0).any():
        raise ValueError("step counts must be nonnegative")
    mass /= mass.sum()

    rng = np.random.default_rng(seed)
    P, blocks = transition_matrix(n_cities, block_count, within_block, rng)
    cum = np.cumsum(P, axis=1)
    start = rng.dirichlet(np.ones(n_cities))
    city_ids = [str(1000 + i) for i in range(n_cities)]
    countries = [f"C{b:02d}" for b in blocks]
    bookers = [f"B{i}" for i in range(6)]
    booker_p = np.array([0.4, 0.2, 0.15, 0.1, 0.1, 0.05])
    devices = ["desktop", "mobile", "tablet"]
    device_p = np.array([0.55, 0.4, 0.05])
    affiliates = [str(a) for a in range(100, 120)]
    stay_p = np.array([0.05, 0.35, 0.3, 0.15, 0.08, 0.04, 0.03])  # 1..7 nights
    gap_p = np.array([0.8, 0.1, 0.05, 0.03, 0.02])  # 0..4 days
    origin = date(2016, 1, 1)

    lengths = rng.choice(steps, size=n_sessions, p=mass) + 1
    longest = int(lengths.max()) if n_sessions else 0
    users = rng.integers(10**6, 10**7, size=n_sessions)
    booker_ix = rng.choice(len(bookers), size=n_sessions, p=booker_p)
    device_ix = rng.choice(len(devices), size=n_sessions, p=device_p)
    first_day = rng.integers(0, 730, size=n_sessions)
    stays = 1 + rng.choice(len(stay_p), size=(n_sessions, longest), p=stay_p)
    gaps = rng.choice(len(gap_p), size=(n_sessions, longest), p=gap_p)
    switch = rng.random((n_sessions, longest)) < 0.2
    affiliate_ix = rng.integers(len(affiliates), size=(n_sessions, longest))
    # Markov walk for all trips at once, one step at a time.
    cities = np.zeros((n_sessions, longest), dtype=np.int64)
    if n_sessions:
        cities[:, 0] = rng.choice(n_cities, size=n_sessions, p=start)
    draws = rng.random((n_sessions, longest))
    for t in range(1, longest):
        rows = cum[cities[:, t - 1]]
        nxt = (rows <= draws[:, t, None]).sum(axis=1)
        cities[:, t] = np.minimum(nxt, n_cities - 1)

    sessions = []
    for s in range(n_sessions):
        user = str(users[s])
        utrip = f"{user}_{s}"
        booker, device = bookers[booker_ix[s]], devices[device_ix[s]]
        affiliate = affiliates[affiliate_ix[s, 0]]
        day = origin + timedelta(days=int(first_day[s]))
        bookings = []
        for t in range(int(lengths[s])):
            if t and switch[s, t]:
                affiliate = affiliates[affiliate_ix[s, t]]
            checkout = day + timedelta(days=int(stays[s, t]))
            city = cities[s, t]
            bookings.append(Booking(user, day, checkout, city_ids[city], countries[city],
                                    booker, device, affiliate, utrip))
            day = checkout + timedelta(days=int(gaps[s, t]))
        sessions.append(Session(utrip, bookings))
    return sessions
