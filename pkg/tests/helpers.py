import numpy as np

from rbla.nn import RELU, SOFTMAX, DenseLayer, MlpModel, backward, forward, he_normal, loss_and_grad


def tiny_model(rng, dims, bias_scale=0.1):
    """Dense MLP over ``dims`` with He weights and small random biases."""
    layers = []
    n = len(dims) - 1
    for k, (m, o) in enumerate(zip(dims[:-1], dims[1:])):
        b = bias_scale * rng.child("bias", k).generator.standard_normal((1, o))
        layers.append(DenseLayer(he_normal(rng.child("w", k), m, o), b, SOFTMAX if k == n - 1 else RELU))
    return MlpModel(layers)


def loss_of(model, x, y):
    logits, _ = forward(model, x)
    return loss_and_grad(logits, y)[0]


def analytic_grads(model, x, y):
    logits, cache = forward(model, x)
    _, dl = loss_and_grad(logits, y)
    return backward(model, cache, dl)


def rel_error(a, n, floor=1e-8):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_check(model, x, y, h=1e-5):
    """Max relative error between backward() and central differences over every parameter."""
    grads = analytic_grads(model, x, y)
    worst = 0.0
    for layer, g in zip(model.layers, grads.layers):
        for name, p in layer.params().items():
            num = np.zeros_like(p)
            for idx in np.ndindex(*p.shape):
                orig = p[idx]
                p[idx] = orig + h
                up = loss_of(model, x, y)
                p[idx] = orig - h
                down = loss_of(model, x, y)
                p[idx] = orig
                num[idx] = (up - down) / (2 * h)
            worst = max(worst, float(rel_error(g[name], num).max()))
    return worst


def brute_aggregate(clients, rule):
    """Scalar-loop slice aggregation over ``(B, A, weight)`` triples of nested lists.

    ``rule="rbla"``: per slice, sum of w*v over the clients holding it divided
    by those clients' total weight. ``rule="zp"``: same numerator, divided by
    the total weight of all clients.
    """
    m, n = len(clients[0][0]), len(clients[0][1][0])
    r_max = max(len(A) for _, A, _ in clients)
    total = sum(w for _, _, w in clients)

    def combine(r, value_of):
        num = den = 0.0
        for B, A, w in clients:
            if r < len(A):
                num += w * value_of(B, A)
                den += w
        return num / (den if rule == "rbla" else total)

    B_out = [[combine(r, lambda B, A: B[i][r]) for r in range(r_max)] for i in range(m)]
    A_out = [[combine(r, lambda B, A: A[r][j]) for j in range(n)] for r in range(r_max)]
    return np.array(B_out), np.array(A_out)
