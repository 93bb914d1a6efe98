"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DecisionLog, Tape, Tensor, backward, no_tape


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-6,
                   max_entries: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x``.

    Returns (flat indices probed, derivative estimates). When ``max_entries``
    is given, a random subset of entries is probed.
    """
    size = x.data.size
    idx = np.arange(size)
    if max_entries is not None and size > max_entries:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(size, max_entries, replace=False))
    flat = x.data.reshape(-1)
    est = np.empty(len(idx))
    with no_tape():
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            est[k] = (fp - fm) / (2 * h)
    return idx, est


def analytic_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss, inputs)
    return [t.grad.copy() for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor) taken over the whole array scale."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    ana = analytic_grads(f, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(inputs, ana):
        idx, est = numerical_grad(f, t, h=h, max_entries=max_entries, rng=rng)
        worst = max(worst, relative_error(g.reshape(-1)[idx], est))
    return worst


def _eval(f):
    with DecisionLog() as log:
        vals = [float(o.data) for o in f()]
    return vals, log.digest()


def check_many(f: Callable[[], Sequence[Tensor]], params: Sequence[Tensor], h: float = 1e-6,
               per_tensor: int = 1, seed: int = 0, shrink: int = 4, attempts: int = 20) -> list[float]:
    """Gradient check of several scalar outputs that share one forward pass.

    For each output, analytic gradients come from a separate backward sweep;
    finite differences probe ``per_tensor`` random entries of every tensor in
    ``params``. Errors are scaled by the largest analytic gradient magnitude
    of each tensor, so entries that are tiny relative to their tensor do not
    dominate. Returns the worst error per output.

    A stencil whose ReLU masks, max-pool winners or L1 signs differ from the
    unperturbed pass straddles a kink, where central differences do not
    estimate the derivative. Such a stencil is retried with h halved up to
    ``shrink`` times, then a different entry is drawn.
    """
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        outs = f()
    analytic = []
    for k, out in enumerate(outs):
        for p in params:
            p.grad = None
        sub = Tape()
        sub.records = tape.records[: _last_index(tape, out) + 1]
        backward(sub, out, params)
        analytic.append([p.grad.copy() for p in params])
    rng = np.random.default_rng(seed)
    worst = [0.0] * len(outs)
    with no_tape():
        _, base = _eval(f)
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            done = 0
            for i in rng.permutation(flat.size)[:attempts * per_tensor]:
                est = _stencil(f, flat, int(i), h, shrink, base)
                if est is None:
                    continue
                for k in range(len(outs)):
                    ana = analytic[k][pi]
                    scale = max(np.abs(ana).max(), abs(est[k]), 1e-8)
                    worst[k] = max(worst[k], abs(ana.reshape(-1)[i] - est[k]) / scale)
                done += 1
                if done == min(per_tensor, flat.size):
                    break
            else:
                raise RuntimeError(f"no kink-free stencil found for {p.name or pi}")
    return worst


def _stencil(f, flat, i, h, shrink, base):
    old = flat[i]
    try:
        for _ in range(shrink + 1):
            flat[i] = old + h
            fp, dp = _eval(f)
            flat[i] = old - h
            fm, dm = _eval(f)
            if dp == base and dm == base:
                return [(a - b) / (2 * h) for a, b in zip(fp, fm)]
            h /= 2
        return None
    finally:
        flat[i] = old


def _last_index(tape: Tape, out: Tensor) -> int:
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i].output is out:
            return i
    raise ValueError("output not produced on this tape")
