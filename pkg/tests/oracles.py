"""Naive scalar-loop reference implementations of the five metrics."""

import math


def _elements(cube):
    c, h, w = cube.shape
    return [float(cube[b, i, j]) for b in range(c) for i in range(h) for j in range(w)]


def rmse1(truth, est):
    t, e = _elements(truth), _elements(est)
    return sum(math.sqrt((a - b) ** 2) for a, b in zip(t, e)) / len(t)


def rmse2(truth, est):
    t, e = _elements(truth), _elements(est)
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(t, e)) / len(t))


def rrmse1(truth, est):
    t, e = _elements(truth), _elements(est)
    return sum(math.sqrt((a - b) ** 2) / a for a, b in zip(t, e)) / len(t)


def rrmse2(truth, est):
    t, e = _elements(truth), _elements(est)
    mean = sum(t) / len(t)
    return math.sqrt(sum((a - b) ** 2 / mean**2 for a, b in zip(t, e)) / len(t))


def sam(truth, est):
    c, h, w = truth.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            dot = na = nb = 0.0
            for b in range(c):
                x, y = float(truth[b, i, j]), float(est[b, i, j])
                dot += x * y
                na += x * x
                nb += y * y
            cos = max(-1.0, min(1.0, dot / (math.sqrt(na) * math.sqrt(nb))))
            total += math.degrees(math.acos(cos))
    return total / (h * w)


ALL = {"rmse1": rmse1, "rmse2": rmse2, "rrmse1": rrmse1, "rrmse2": rrmse2, "sam": sam}
