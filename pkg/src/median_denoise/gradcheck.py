"""Finite-difference verification of the full network backward pass.

Used by both the ``grad-check`` CLI subcommand and the acceptance suite.
Everything runs in float64; central differences in float32 are noise.

The reported error is ``max |analytic - numeric| / max(1, max |numeric|)``
over every checked coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network
from .tensor import Tape

__all__ = ["GradCheckResult", "stability_gaps", "run_gradcheck",
           "find_stable_seed"]


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    median_gap: float
    relu_gap: float


def _forward_loss(model, x, target, mode="train"):
    tape = Tape()
    pred = network.forward(model, tape.constant(x), tape, mode=mode)
    loss = tape.mse_loss(pred, tape.constant(target))
    return tape, loss


def stability_gaps(model, x, target):
    """Worst-case tie margins along the forward pass.

    Returns ``(median_gap, relu_gap)``: the smallest value gap adjacent to
    any selected median, and the smallest |pre-activation| entering any relu.
    Finite differences are only trustworthy when both clear the step size by
    a wide margin.
    """
    tape, _ = _forward_loss(model, x, target)
    median_gap = np.inf
    relu_gap = np.inf
    for rec in tape.records:
        if rec.kind == "median":
            k = rec.ctx["k"]
            vals = np.sort(_window_values(rec.inputs[0].data, k), axis=-1)
            mid = k * k // 2
            lo, ct, hi = vals[..., mid - 1], vals[..., mid], vals[..., mid + 1]
            # exact ties are copies of one source value (pad zeros, or
            # duplicates propagated by an earlier median layer); copies move
            # together under any perturbation and cannot flip the selection.
            # Only small-but-nonzero gaps endanger finite differences.
            g1 = np.where(ct == lo, np.inf, ct - lo)
            g2 = np.where(hi == ct, np.inf, hi - ct)
            gaps = np.minimum(g1, g2)
            median_gap = min(median_gap, float(gaps.min()))
        elif rec.kind == "relu":
            relu_gap = min(relu_gap, float(np.abs(rec.ctx["x"]).min()))
    return median_gap, relu_gap


def _window_values(x, k):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.reshape(x.shape + (k * k,))


def run_gradcheck(blocks: int = 2, features: int = 4, in_channels: int = 3,
                  spatial: int = 8, seed: int = 0, step: float = 1e-6,
                  sample: int | None = None) -> GradCheckResult:
    """Compare tape gradients to central differences on a tiny network.

    Checks the input gradient and every parameter gradient; ``sample``
    limits the number of coordinates per tensor (None = all of them).
    """
    cfg = network.NetworkConfig(blocks=blocks, features=features,
                                in_channels=in_channels, seed=seed)
    model = network.build_network(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((1, in_channels, spatial, spatial))
    target = rng.random(x.shape)

    median_gap, relu_gap = stability_gaps(model, x, target)

    # analytic gradients via a leaf input so d(loss)/d(input) is retrievable;
    # batchnorm running stats do not affect the loss, so the repeated
    # forwards during FD are harmless
    model.zero_grads()
    tape = Tape()
    xv = tape.leaf(x)
    pred = network.forward(model, xv, tape, mode="train")
    loss = tape.mse_loss(pred, tape.constant(target))
    leaf_grads = tape.backward(loss)

    max_err = 0.0
    checked = 0

    def check(analytic: np.ndarray, array: np.ndarray):
        nonlocal max_err, checked
        flat = array.reshape(-1)
        aflat = analytic.reshape(-1)
        if sample is not None and flat.size > sample:
            sel = list(rng.choice(flat.size, size=sample, replace=False))
        else:
            sel = list(range(flat.size))
        numeric = np.zeros(len(sel))
        for j, i in enumerate(sel):
            orig = flat[i]
            flat[i] = orig + step
            _, lp = _forward_loss(model, x, target)
            flat[i] = orig - step
            _, lm = _forward_loss(model, x, target)
            flat[i] = orig
            numeric[j] = (float(lp.data) - float(lm.data)) / (2 * step)
        scale = max(1.0, float(np.abs(numeric).max()) if len(sel) else 1.0)
        err = float(np.abs(aflat[sel] - numeric).max()) / scale if sel else 0.0
        max_err = max(max_err, err)
        checked += len(sel)

    check(leaf_grads[xv.id], x)
    for name in sorted(model.params):
        p = model.params[name]
        check(p.grad, p.data)

    return GradCheckResult(max_rel_error=max_err, checked=checked,
                           median_gap=median_gap, relu_gap=relu_gap)


def find_stable_seed(blocks=2, features=4, in_channels=3, spatial=8,
                     min_median_gap=1e-3, min_relu_gap=1e-4,
                     start_seed=0, attempts=50) -> int:
    """First seed whose forward pass keeps all ties far from the FD step."""
    for seed in range(start_seed, start_seed + attempts):
        cfg = network.NetworkConfig(blocks=blocks, features=features,
                                    in_channels=in_channels, seed=seed)
        model = network.build_network(cfg, dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        x = rng.random((1, in_channels, spatial, spatial))
        target = rng.random(x.shape)
        mg, rg = stability_gaps(model, x, target)
        if mg > min_median_gap and rg > min_relu_gap:
            return seed
    raise RuntimeError(
        f"no seed in [{start_seed}, {start_seed + attempts}) gives gaps above "
        f"({min_median_gap}, {min_relu_gap})")
