"""Sticky user-to-region routing.

Weighted rendezvous hashing: every (user, region) pair gets a stable uniform
draw ``u`` and the region with the highest ``-w / ln(u)`` wins. Region ``r``
therefore receives a ``w_r / sum(w)`` share of users, and evacuating a region
moves only that region's users.
"""

import numpy as np

from chaoslab.errors import AllRegionsDownError
from chaoslab.hashing import unit_array


def region_salt(routing_seed, region_id):
    return f"route:{routing_seed}:{region_id}"


def route_table(users, weights, evacuated, salts):
    """Region index for each user in ``users``.

    ``weights``, ``evacuated`` and ``salts`` are per-region sequences.
    """
    live = [i for i, (w, ev) in enumerate(zip(weights, evacuated)) if w > 0 and not ev]
    if not live:
        raise AllRegionsDownError("every region is evacuated or has zero routing weight")
    users = np.asarray(users)
    best = np.full(users.shape, -np.inf)
    choice = np.full(users.shape, live[0], dtype=np.int64)
    for i in live:
        score = float(weights[i]) / -np.log(unit_array(users, salts[i]))
        better = score > best
        best = np.where(better, score, best)
        choice = np.where(better, i, choice)
    return choice


def route_user(user, weights, evacuated, salts):
    return int(route_table(np.array([user]), weights, evacuated, salts)[0])
