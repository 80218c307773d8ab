"""Bundled synthetic feeders and scenario presets.

Real utility feeder data is proprietary, so the package ships synthetic
analogs with the published experiment settings: a 56-bus chain-with-branches
feeder at a 12 kV / 1 MVA base, device capacity 0.2 p.u. each way, a +-5%
voltage band around nominal, opportunity-cost quadratics with price 10 over
apparent-power ratings drawn in [0.5, 1], and unit network-cost weight.
"""

from __future__ import annotations

import numpy as np

from .controller import CapacityLimits, CostModel
from .network import Line, RadialNetwork

VOLTAGE_BAND = (0.95**2, 1.05**2)
DEVICE_CAPACITY = 0.2


def single_bus(x=0.5, r=0.5, v0=1.0):
    """One device bus behind one line; X reduces to the scalar 2x."""
    return RadialNetwork(1, [Line(0, 1, r, x)], v0=v0)


def fig8():
    """Six-bus branching feeder used for the partially controlled example.

    With devices at buses {1, 3, 5, 6} and plain buses {2, 4}, the induced
    communication graph is {1-3, 1-5, 3-5, 5-6}: the 1-3, 1-5 and 3-5 paths
    pass only through bus 2, while bus 5 separates 6 from the rest.
    """
    lines = [
        Line(0, 1, 0.05, 0.10),
        Line(1, 2, 0.04, 0.08),
        Line(2, 3, 0.05, 0.09),
        Line(3, 4, 0.03, 0.07),
        Line(2, 5, 0.04, 0.09),
        Line(5, 6, 0.05, 0.08),
    ]
    return RadialNetwork(6, lines, v0=1.0)


FIG8_CONTROLLABLE = (1, 3, 5, 6)
FIG8_COMM_EDGES = frozenset({(1, 3), (1, 5), (3, 5), (5, 6)})


def feeder56(seed=56):
    """56-bus feeder: a 20-bus trunk with six 6-bus laterals.

    Impedances are drawn per line from a seeded generator at distribution
    scale (x around 0.01 p.u. per segment, fixed r/x ratio), which puts the
    diagonal of X near 0.5 p.u. at the feeder end.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    lines = []
    bus = 0
    trunk = [0]
    for _ in range(20):
        nxt = bus + 1
        x = rng.uniform(0.008, 0.016)
        lines.append(Line(trunk[-1], nxt, 0.8 * x, x))
        trunk.append(nxt)
        bus = nxt
    for root in (3, 6, 9, 12, 15, 18):
        anchor = root
        for _ in range(6):
            bus += 1
            x = rng.uniform(0.008, 0.016)
            lines.append(Line(anchor, bus, 0.8 * x, x))
            anchor = bus
    return RadialNetwork(56, lines, v0=1.0)


def sce_like_cost(n, seed=7, price=10.0):
    """Opportunity-cost quadratics: price over a seeded apparent-power rating."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    s_max = rng.uniform(0.5, 1.0, size=n)
    return CostModel(a=price / s_max, b=np.zeros(n))


def standard_limits(n, q_cap=DEVICE_CAPACITY, band=VOLTAGE_BAND):
    return CapacityLimits.from_scalars(n, -q_cap, q_cap, band[0], band[1])
