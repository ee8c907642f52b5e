"""Central finite differences against analytic gradients.

Parameters are perturbed in place, so ``loss_fn`` must read the same arrays
the analytic gradient was computed for. The relative-error denominator is
floored at ``FLOOR``: with h = 1e-5 and losses of order one, float64 round-off
alone puts about 1e-11 of absolute noise on each difference quotient, which
would dominate the ratio for coordinates whose true gradient is ~1e-8.
"""

H = 1e-5
FLOOR = 1e-6


def max_relative_error(loss_fn, params: dict, analytic: dict, h: float = H) -> float:
    worst = 0.0
    for key, arr in params.items():
        g = analytic[key]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            a = g.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), FLOOR)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
