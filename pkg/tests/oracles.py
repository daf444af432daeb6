"""Reference computations that share no code with the autodiff engine."""
import numpy as np


def conv2d_loops(x, w):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    out = np.zeros((n, k, h - kh + 1, wd - kw + 1))
    for a in range(n):
        for b in range(k):
            for i in range(h - kh + 1):
                for j in range(wd - kw + 1):
                    out[a, b, i, j] = np.sum(x[a, :, i : i + kh, j : j + kw] * w[b])
    return out


def xent(logits, onehot):
    out = 0.0
    for z, y in zip(logits, onehot):
        m = max(z)
        lse = m + np.log(sum(np.exp(v - m) for v in z))
        out += -sum(yi * (zi - lse) for zi, yi in zip(z, y))
    return out / len(logits)


def _mlp_loss_and_grads(params, x, y):
    """One-hidden-layer ReLU MLP, mean softmax cross-entropy, manual backprop."""
    w0, b0, w1, b1 = params
    h_pre = x @ w0 + b0
    h = np.maximum(h_pre, 0)
    z = h @ w1 + b1
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    loss = -np.mean(np.sum(y * np.log(p), axis=1))
    dz = (p - y) / len(x)
    dw1 = h.T @ dz
    db1 = dz.sum(axis=0)
    dh = dz @ w1.T * (h_pre > 0)
    dw0 = x.T @ dh
    db0 = dh.sum(axis=0)
    return loss, [dw0, db0, dw1, db1]


def mlp_loss(params, x, y):
    return _mlp_loss_and_grads(params, x, y)[0]


def mlp_param_grads(params, x, y):
    return _mlp_loss_and_grads(params, x, y)[1]


def meta_loss(params0, x_tilde, y_tilde, x_real, y_real, S, eta, last_only=False):
    """Real-data loss summed over S plain SGD steps on the buffer (or the last one only)."""
    params = [p.copy() for p in params0]
    total = 0.0
    for s in range(1, S + 1):
        grads = mlp_param_grads(params, x_tilde, y_tilde)
        params = [p - eta * g for p, g in zip(params, grads)]
        if not last_only or s == S:
            total += mlp_loss(params, x_real, y_real)
    return total
