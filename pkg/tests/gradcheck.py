"""Central finite-difference gradient checks in float64.

A ReLU or max-pool argmax that flips between the +eps and -eps evaluations
makes the finite difference meaningless, so such configurations are redrawn
instead of compared.
"""
import numpy as np

from fedavoid import nn

EPS = 1e-3
FLOOR = 1e-6  # denominators below this compare absolute error instead
LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool2d", "global_avg_pool", "residual_block", "softmax_xent")


class Kink(Exception):
    pass


def _signature(layers, cache):
    parts = []
    for ly, c in zip(layers, cache):
        if ly.kind == "relu":
            parts.append(c)
        elif ly.kind == "maxpool2d":
            parts.append(c[0])
        elif ly.kind == "residual_block":
            parts.extend([c[1], c[3]])
    return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


class Case:
    def __init__(self, layers, params, x, y):
        self.layers, self.params, self.x, self.y = layers, params, x, y

    def _loss(self, params, x, base_sig):
        logits, cache = nn.forward(self.layers, params, x)
        if _signature(self.layers, cache) != base_sig:
            raise Kink
        return nn.xent(logits, self.y)[0]

    def max_rel_error(self) -> float:
        _, grads, dx = nn.loss_and_grads(self.layers, self.params, self.x, self.y, with_input_grad=True)
        _, cache = nn.forward(self.layers, self.params, self.x)
        sig = _signature(self.layers, cache)
        worst = 0.0
        targets = [(self.params[k], grads[k], "p") for k in self.params] + [(self.x, dx, "x")]
        for arr, g, _ in targets:
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + EPS
                up = self._loss(self.params, self.x, sig)
                flat[j] = old - EPS
                down = self._loss(self.params, self.x, sig)
                flat[j] = old
                num = (up - down) / (2 * EPS)
                a = float(gflat[j])
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), FLOOR))
        return worst


def make_case(layers, input_shape, n, rng) -> Case:
    params = nn.init_params(layers, int(rng.integers(1 << 31)), dtype=np.float64)
    for k in params:
        if k[1].startswith("b"):
            params[k] = rng.normal(0, 0.1, size=params[k].shape)
    x = rng.normal(size=(n, *input_shape))
    y = rng.integers(0, 2, size=n)
    return Case(layers, params, x, y)


def random_layers(kind, rng):
    c = int(rng.integers(1, 4))
    h, w = int(rng.integers(4, 9)), int(rng.integers(4, 9))
    if kind == "conv2d":
        k = int(rng.integers(1, 5))
        s, p = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        co = int(rng.integers(1, 4))
        h, w = max(h, k), max(w, k)
        return [nn.conv2d(c, co, k, s, p), nn.global_avg_pool(), nn.dense(co, 2), nn.softmax_xent()], (c, h, w)
    if kind == "dense":
        f, u = c * h * w, int(rng.integers(1, 6))
        return [nn.dense(f, u), nn.dense(u, 2), nn.softmax_xent()], (c, h, w)
    if kind == "relu":
        co = int(rng.integers(1, 4))
        return [nn.conv2d(c, co, 3, 1, 1), nn.relu(), nn.global_avg_pool(), nn.dense(co, 2), nn.softmax_xent()], (c, h, w)
    if kind == "maxpool2d":
        k, co = int(rng.integers(2, 4)), int(rng.integers(1, 4))
        h, w = max(h, k), max(w, k)
        return [nn.conv2d(c, co, 1), nn.maxpool2d(k), nn.global_avg_pool(), nn.dense(co, 2), nn.softmax_xent()], (c, h, w)
    if kind == "global_avg_pool":
        return [nn.global_avg_pool(), nn.dense(c, 2), nn.softmax_xent()], (c, h, w)
    if kind == "residual_block":
        k = int(rng.choice([1, 3]))
        return [nn.residual_block(c, k), nn.global_avg_pool(), nn.dense(c, 2), nn.softmax_xent()], (c, h, w)
    if kind == "softmax_xent":
        return [nn.dense(c * h * w, 2), nn.softmax_xent()], (c, h, w)
    raise ValueError(kind)


def check_kind(kind, rng, max_draws=50) -> float:
    for _ in range(max_draws):
        layers, shape = random_layers(kind, rng)
        case = make_case(layers, shape, int(rng.integers(1, 4)), rng)
        try:
            return case.max_rel_error()
        except Kink:
            continue
    raise RuntimeError(f"{kind}: no kink-free configuration in {max_draws} draws")
