"""The 20-parameter reference net and a numpy-only finite-difference oracle.

dense(3, 3) -> relu -> dense(3, 2): 9 + 3 + 6 + 2 = 20 parameters.
"""

import numpy as np

from adaptq import autodiff as ad
from adaptq.net import Net, mlp

SHAPES = [(3, 3), (3, 2), (3,), (2,)]  # w0, w1, b0, b1


def tiny_net(seed=0):
    net = Net(mlp((3, 3, 2), seed))
    rng = np.random.default_rng(seed + 100)
    for b in net.biases:
        b.data = rng.normal(0, 0.1, b.shape)
    return net


def tiny_data(seed=0, n=64):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = (x @ np.array([1.0, -1.0, 0.5]) + 0.3 * rng.normal(size=n) > 0).astype(np.int64)
    return x, y


def flatten(net):
    return np.concatenate([t.data.ravel() for t in net.weights + net.biases])


def _split(theta):
    out, k = [], 0
    for s in SHAPES:
        n = int(np.prod(s))
        out.append(theta[k : k + n].reshape(s))
        k += n
    return out


def numpy_loss(theta, x, y):
    w0, w1, b0, b1 = _split(np.asarray(theta, dtype=np.float64))
    h = np.maximum(x @ w0 + b0, 0.0)
    z = h @ w1 + b1
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def fd_hessian(theta, x, y, h=1e-4):
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    H = np.empty((n, n))
    e = np.eye(n) * h
    f = lambda t: numpy_loss(t, x, y)
    for i in range(n):
        for j in range(i, n):
            H[i, j] = H[j, i] = (
                f(theta + e[i] + e[j]) - f(theta + e[i] - e[j]) - f(theta - e[i] + e[j]) + f(theta - e[i] - e[j])
            ) / (4 * h * h)
    return H


def tensor_loss(net, x, y):
    """Loss of ``net`` as a function of one flat 20-vector tensor."""
    index, k = [], 0
    for s in SHAPES:
        n = int(np.prod(s))
        index.append((np.arange(k, k + n), s))
        k += n

    def f(theta):
        parts = [ad.reshape(ad.take(theta, idx), s) for idx, s in index]
        saved = net.biases
        net.biases = parts[2:]
        try:
            return net.loss(x, y, parts[:2])
        finally:
            net.biases = saved

    return f


def autodiff_hvp(net, x, y, v):
    theta = ad.Tensor(flatten(net), requires_grad=True)
    return ad.hvp(tensor_loss(net, x, y), theta, v)


def trained_tiny(seed=0):
    """The reference net after default training on its own seeded task."""
    from adaptq.data import Split
    from adaptq.net import TrainConfig, train

    net = tiny_net(seed)
    x, y = tiny_data(seed)
    train(net, Split(x, y), TrainConfig(seed=seed))
    return net, x, y
