"""Small seeded networks and regions for tests, demos and the CLI ``--seed`` path."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .interval import InputBox
from .network import Dense, Network, Relu, forward


def random_network(
    rng: np.random.Generator,
    n_inputs: int = 2,
    hidden: Sequence[int] = (4,),
    n_outputs: int = 1,
    scale: float = 1.0,
) -> Network:
    """Dense ReLU network with weights and biases drawn from U[-scale, scale]."""
    sizes = [n_inputs, *hidden, n_outputs]
    layers: list = []
    for k in range(len(sizes) - 1):
        w = rng.uniform(-scale, scale, size=(sizes[k + 1], sizes[k]))
        b = rng.uniform(-scale, scale, size=sizes[k + 1])
        layers.append(Dense(w, b))
        if k < len(sizes) - 2:
            layers.append(Relu())
    return Network(n_inputs, layers)


def random_architecture(rng: np.random.Generator, max_relus: int = 16, max_inputs: int = 4,
                        max_outputs: int = 3) -> tuple[int, list[int], int]:
    """Input width, hidden widths (1-3 hidden layers) and output width."""
    n_in = int(rng.integers(1, max_inputs + 1))
    n_hidden_layers = int(rng.integers(1, 4))
    budget = max_relus
    hidden = []
    for k in range(n_hidden_layers):
        left = n_hidden_layers - k - 1
        width = int(rng.integers(1, max(1, min(6, budget - left)) + 1))
        hidden.append(width)
        budget -= width
    return n_in, hidden, int(rng.integers(1, max_outputs + 1))


def random_fixture(rng: np.random.Generator, max_relus: int = 16, n_outputs: Optional[int] = None):
    """A random network plus an L-inf box around a random center."""
    n_in, hidden, n_out = random_architecture(rng, max_relus)
    if n_outputs is not None:
        n_out = n_outputs
    net = random_network(rng, n_in, hidden, n_out)
    center = rng.uniform(-1, 1, size=n_in)
    eps = float(rng.uniform(0.05, 1.0))
    return net, InputBox(center - eps, center + eps)


def example_network() -> Network:
    """Two-input network with one straddling ReLU ``A = relu(2x - 3y)``.

    Over ``x in [0, 0.5], y in [0, 4/3]`` node A ranges over ``[-4, 1]`` while
    ``B = relu(4 - x - y)`` and ``C = relu(2x - y + 4)`` stay active. The output
    ``f = A - 2B - 2C + 19.5`` has exact range ``[3.5, 53/6]``. The relaxation of
    A alone only reaches a lower bound of 2.7, so proving ``f > 3.3`` takes one
    split on A.
    """
    return Network(2, [
        Dense([[2.0, -3.0], [-1.0, -1.0], [2.0, -1.0]], [0.0, 4.0, 4.0]),
        Relu(),
        Dense([[1.0, -2.0, -2.0]], [19.5]),
    ])


def example_box() -> InputBox:
    return InputBox([0.0, 0.0], [0.5, 4.0 / 3.0])


def cancellation_network() -> Network:
    """``f(x) = x - x`` routed through two always-active ReLUs on ``x in [0, 1]``."""
    return Network(1, [Dense([[1.0], [1.0]], [0.0, 0.0]), Relu(), Dense([[1.0, -1.0]], [0.0])])


def labelled_fixture(rng: np.random.Generator, max_relus: int = 12):
    """A random network, region and property with an oracle-derived label.

    Returns ``(net, region, prop, safe)``. Thresholds sit a margin away from
    the exact optimum so the label does not hinge on LP round-off.
    """
    from .oracle import exact_minimum
    from .properties import Classification, LInfRegion, LinearSafe

    n_in, hidden, n_out = random_architecture(rng, max_relus)
    net = random_network(rng, n_in, hidden, n_out)
    center = rng.uniform(-1, 1, size=n_in)
    region = LInfRegion(center, float(rng.uniform(0.05, 1.0)))
    box = region.as_box().encode().box
    if n_out > 1 and rng.random() < 0.5:
        label = int(np.argmax(forward(net, center)))
        margin = np.inf
        for o in range(n_out):
            if o != label:
                c = np.zeros(n_out)
                c[label], c[o] = 1.0, -1.0
                margin = min(margin, exact_minimum(net, box, c)[0])
        if abs(margin) < 1e-6:
            return labelled_fixture(rng, max_relus)
        return net, region, Classification(label), bool(margin > 0)
    k = int(rng.integers(n_out))
    e = np.zeros(n_out)
    e[k] = 1.0
    lo = exact_minimum(net, box, e)[0]
    hi = -exact_minimum(net, box, -e)[0]
    gap = 0.01 * max(hi - lo, 1e-3)
    safe = bool(rng.random() < 0.5)
    threshold = lo - gap if safe else lo + gap
    return net, region, LinearSafe(((e, ">", threshold),)), safe
