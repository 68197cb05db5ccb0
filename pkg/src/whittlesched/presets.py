"""Shipped experiment presets.

Each preset is a complete config dict in the JSON config schema, so
``--preset name`` behaves exactly like ``--config file`` with the same
content.  Mixes:

* ``single-class``: one channel class (p=0.8, r=0.2), budget 0.75 — the
  single-class walkthrough configuration used across the docs and tests.
* ``two-class``: classes (0.9, 0.45) and (0.8, 0.3) with fractions
  0.45/0.55 and budget 0.6 — the two-class benchmark configuration.
* ``fig5``: classes (0.9, 0.1) and (0.7, 0.3); both have stationary belief
  0.5 (r = 1-p) but different memory, so their index curves cross.
* ``assumption-psi``: hitting-time sweep on the two-class mix
  (N in {1e4, 5e4, 1e5}, starts x and y, epsilon 0.005).
* ``throughput-gap``: throughput sweep on the two-class mix
  (N in {1e3, 1e4, 1e5}).

Start-state aliases: ``x`` = all users at OffAge(1) (observed OFF last slot),
``y`` = all users at the stationary belief, ``zeta`` = the relaxed-optimal
fixed point rounded to the 1/N lattice.
"""

from __future__ import annotations

import copy

_SINGLE_MIX = {
    "classes": [{"p": 0.8, "r": 0.2, "tau": 16}],
    "gamma": [1.0],
    "alpha": 0.75,
}

_TWO_MIX = {
    "classes": [{"p": 0.9, "r": 0.45, "tau": 16}, {"p": 0.8, "r": 0.3, "tau": 16}],
    "gamma": [0.45, 0.55],
    "alpha": 0.6,
}

_FIG5_MIX = {
    "classes": [{"p": 0.9, "r": 0.1, "tau": 16}, {"p": 0.7, "r": 0.3, "tau": 16}],
    "gamma": [0.5, 0.5],
    "alpha": 0.6,
}

PRESETS: dict[str, dict] = {
    "single-class": {
        "schema": 1,
        "mix": _SINGLE_MIX,
        "experiment": {
            "n_users": 10000,
            "horizon": 100000,
            "seeds": list(range(1, 11)),
            "policy": "whittle",
            "initial_state": "x",
            "engine": "pooled",
        },
    },
    "two-class": {
        "schema": 1,
        "mix": _TWO_MIX,
        "experiment": {
            "n_users": 10000,
            "horizon": 100000,
            "seeds": list(range(1, 11)),
            "policy": "whittle",
            "initial_state": "x",
            "engine": "pooled",
        },
    },
    "fig5": {
        "schema": 1,
        "mix": _FIG5_MIX,
    },
    "assumption-psi": {
        "schema": 1,
        "mix": _TWO_MIX,
        "experiment": {
            "kind": "hitting-time",
            "n_users": [10000, 50000, 100000],
            "starts": ["x", "y"],
            "epsilon": 0.005,
            "seeds": list(range(1, 31)),
            "max_slots": 100000,
            "engine": "pooled",
        },
    },
    "throughput-gap": {
        "schema": 1,
        "mix": _TWO_MIX,
        "experiment": {
            "kind": "throughput",
            "n_users": [1000, 10000, 100000],
            "horizon": 100000,
            "seeds": list(range(1, 11)),
            "policy": "whittle",
            "initial_state": "x",
            "engine": "pooled",
        },
    },
}


def get_preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[name])
