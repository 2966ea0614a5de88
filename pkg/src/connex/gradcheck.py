"""Finite-difference validation of analytic gradients.

``grad_check`` compares reverse-mode gradients of an arbitrary tensor
function against central differences. The error reported is
``max |analytic - numeric| / max(1, |numeric|)`` over the checked entries.

For ops with kinks (relu) the named samplers resample points that land
within ``10*h`` of the non-differentiable set, otherwise the central
difference itself straddles the kink.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_STEP = 1e-6


def _scalar_probe(fn, inputs, probe):
    out = fn(inputs)
    return ad.mean(ad.multiply(out, ad.constant(probe)))


def grad_check(
    fn: Callable[[Sequence[ad.Tensor]], ad.Tensor],
    points: Sequence[np.ndarray],
    h: float = DEFAULT_STEP,
    rng: np.random.Generator | None = None,
    max_entries_per_tensor: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a list of Tensors to a Tensor; it must be deterministic
    across calls (stateless, or seeded internally). The output is reduced
    to a scalar with a fixed random probe so a single backward pass covers
    every output entry. When ``max_entries_per_tensor`` is set, only that
    many randomly chosen coordinates per input are finite-differenced
    (used for composite blocks with thousands of parameters).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    points = [np.asarray(p, dtype=np.float64) for p in points]
    out_shape = fn([ad.constant(p) for p in points]).shape
    probe = rng.standard_normal(out_shape)

    leaves = [ad.parameter(p) for p in points]
    loss = _scalar_probe(fn, leaves, probe)
    loss.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def loss_at(values):
        return _scalar_probe(fn, [ad.constant(v) for v in values], probe).item()

    worst = 0.0
    for i, point in enumerate(points):
        flat_size = point.size
        if max_entries_per_tensor is None or flat_size <= max_entries_per_tensor:
            entries = np.arange(flat_size)
        else:
            entries = rng.choice(flat_size, size=max_entries_per_tensor, replace=False)
        for j in entries:
            bumped = [p.copy() for p in points]
            bumped[i].flat[j] += h
            up = loss_at(bumped)
            bumped[i].flat[j] -= 2 * h
            down = loss_at(bumped)
            numeric = (up - down) / (2.0 * h)
            err = abs(float(analytic[i].flat[j]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# named samplers for every differentiable operator
# ---------------------------------------------------------------------------


def _away_from_zero(x, margin):
    # Shift entries off the relu kink so the finite difference never straddles it.
    x = x.copy()
    small = np.abs(x) < margin
    x[small] += np.sign(x[small] + 0.5) * margin
    return x


def _op_table(h):
    margin = 10 * h

    def normal(rng, *shape):
        return rng.standard_normal(shape)

    return {
        "matmul": (
            lambda rng: [normal(rng, 3, 4), normal(rng, 4, 2)],
            lambda ts: ad.matmul(ts[0], ts[1]),
        ),
        "transpose": (lambda rng: [normal(rng, 3, 4)], lambda ts: ad.transpose(ts[0])),
        "add": (
            lambda rng: [normal(rng, 3, 4), normal(rng, 3, 4)],
            lambda ts: ad.add(ts[0], ts[1]),
        ),
        "add_rowvec": (
            lambda rng: [normal(rng, 3, 4), normal(rng, 4)],
            lambda ts: ad.add(ts[0], ts[1]),
        ),
        "subtract": (
            lambda rng: [normal(rng, 3, 4), normal(rng, 3, 4)],
            lambda ts: ad.subtract(ts[0], ts[1]),
        ),
        "multiply": (
            lambda rng: [normal(rng, 3, 4), normal(rng, 3, 4)],
            lambda ts: ad.multiply(ts[0], ts[1]),
        ),
        "multiply_rowvec": (
            lambda rng: [normal(rng, 3, 4), normal(rng, 4)],
            lambda ts: ad.multiply(ts[0], ts[1]),
        ),
        "concat": (
            lambda rng: [normal(rng, 2, 3), normal(rng, 2, 2), normal(rng, 2, 4)],
            lambda ts: ad.concat(ts, axis=1),
        ),
        "slice": (
            lambda rng: [normal(rng, 4, 5)],
            lambda ts: ad.slice_axis(ts[0], 1, 1, 4),
        ),
        "reshape": (
            lambda rng: [normal(rng, 4, 6)],
            lambda ts: ad.reshape(ts[0], (8, 3)),
        ),
        "mean_axis": (lambda rng: [normal(rng, 4, 5)], lambda ts: ad.mean(ts[0], axis=1)),
        "mean_all": (lambda rng: [normal(rng, 4, 5)], lambda ts: ad.mean(ts[0])),
        "relu": (
            lambda rng: [_away_from_zero(normal(rng, 3, 4), margin)],
            lambda ts: ad.relu(ts[0]),
        ),
        "sigmoid": (lambda rng: [normal(rng, 3, 4)], lambda ts: ad.sigmoid(ts[0])),
        "gelu": (lambda rng: [normal(rng, 3, 4)], lambda ts: ad.gelu(ts[0])),
        "softmax": (lambda rng: [normal(rng, 3, 4)], lambda ts: ad.softmax(ts[0])),
        "layernorm": (lambda rng: [normal(rng, 3, 8)], lambda ts: ad.layernorm(ts[0])),
        "dropout": (
            lambda rng: [normal(rng, 4, 5)],
            lambda ts: ad.dropout(ts[0], 0.3, np.random.default_rng(1234), train=True),
        ),
        "gather_rows": (
            lambda rng: [normal(rng, 5, 3)],
            lambda ts: ad.gather_rows(ts[0], np.array([0, 2, 2, 4, 1])),
        ),
        "scatter_sum": (
            lambda rng: [normal(rng, 6, 3)],
            lambda ts: ad.scatter_sum(ts[0], np.array([0, 2, 1, 2, 0, 3]), 5),
        ),
        "cross_entropy_logits": (
            lambda rng: [normal(rng, 4, 2)],
            lambda ts: ad.cross_entropy_logits(
                ts[0],
                np.array([[1.0, 0.0], [0.0, 1.0], [0.3, 0.7], [1.0, 0.0]]),
                valid=np.array([1.0, 1.0, 0.0, 1.0]),
            ),
        ),
        "binary_entropy_logits": (
            lambda rng: [normal(rng, 3, 4)],
            lambda ts: ad.binary_entropy_logits(ts[0]),
        ),
    }


CHECKED_OPERATORS = tuple(_op_table(DEFAULT_STEP).keys())


def grad_check_named(op_name: str, rng: np.random.Generator, h: float = DEFAULT_STEP) -> float:
    """Gradient-check one named operator at a random point."""
    table = _op_table(h)
    if op_name not in table:
        raise KeyError(f"no gradient-check sampler for operator {op_name!r}")
    sampler, builder = table[op_name]
    return grad_check(builder, sampler(rng), h=h, rng=rng)


def check_all_operators(
    rng: np.random.Generator, points_per_op: int = 20, h: float = DEFAULT_STEP
) -> dict[str, float]:
    """Worst relative error per operator over ``points_per_op`` random points."""
    table = _op_table(h)
    worst = {}
    for name, (sampler, builder) in table.items():
        errs = [grad_check(builder, sampler(rng), h=h, rng=rng) for _ in range(points_per_op)]
        worst[name] = max(errs)
    return worst
