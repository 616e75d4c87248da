"""Straight-line reference implementation of the X-T slice smoothness score.

Deliberately loop-based and independent of the engine's vectorized path:
explicit 3x3 Sobel with clamped (replicate) indexing, per-pixel folding,
per-row accumulation, textbook unwrap, second difference, population std.
"""

import cmath
import math


def slice_smoothness_reference(slice2d):
    T = len(slice2d)
    W = len(slice2d[0])

    def px(t, x):
        t = min(max(t, 0), T - 1)
        x = min(max(x, 0), W - 1)
        return float(slice2d[t][x])

    smooth = (1.0, 2.0, 1.0)
    phis = []
    prev_phi = 0.0
    any_valid = False
    for t in range(T):
        re_sum = 0.0
        im_sum = 0.0
        for x in range(W):
            gx = 0.0
            gt = 0.0
            for k in (-1, 0, 1):
                gx += smooth[k + 1] * (px(t + k, x + 1) - px(t + k, x - 1))
                gt += smooth[k + 1] * (px(t + 1, x + k) - px(t - 1, x + k))
            mag = math.hypot(gx, gt)
            if gx == 0.0 or mag < 1e-6:
                continue
            # fold the edge direction into the forward-time half plane
            if gx > 0:
                theta = math.atan2(-gt, gx)
            else:
                theta = math.atan2(gt, -gx)
            re_sum += mag * math.cos(theta)
            im_sum += mag * math.sin(theta)
        if re_sum != 0.0 or im_sum != 0.0:
            prev_phi = cmath.phase(complex(re_sum, im_sum))
            any_valid = True
        phis.append(prev_phi)
    if not any_valid:
        raise ValueError("degenerate slice: no usable edges")

    unwrapped = [phis[0]]
    for t in range(1, T):
        d = phis[t] - phis[t - 1]
        while d > math.pi:
            d -= 2 * math.pi
        while d <= -math.pi:
            d += 2 * math.pi
        unwrapped.append(unwrapped[-1] + d)

    seconds = [
        unwrapped[t + 1] - 2.0 * unwrapped[t] + unwrapped[t - 1]
        for t in range(1, T - 1)
    ]
    if T >= 5:
        # the first/last time rows have halved temporal Sobel support; drop
        # the second differences that touch them
        seconds = seconds[1:-1]
    mean = sum(seconds) / len(seconds)
    var = sum((s - mean) ** 2 for s in seconds) / len(seconds)
    roughness = math.sqrt(var)
    return roughness, math.exp(-roughness)
