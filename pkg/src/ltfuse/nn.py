"""Small numpy layers with explicit backward passes. Arrays are NCHW, float64."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def fan_in_uniform(rng, shape, fan_in, gain=1.0):
    """U(-b, b) with ``b = gain * sqrt(3 / fan_in)``; gain sqrt(2) suits ReLU inputs."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv2d_forward(x, w, b, pad=1):
    """Stride-1 convolution. x: (N, Cin, H, W); w: (Cout, Cin, kh, kw)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, pad)


def conv2d_backward(dout, w, cache):
    cols, xshape, pad = cache
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, out):
    return dout * (out > 0)


def avgpool2_forward(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


def dropout_mask(rng, shape, rate):
    if rate <= 0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(z, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    b = len(labels)
    lp = log_softmax(z)
    loss = -lp[np.arange(b), labels].mean()
    dz = np.exp(lp)
    dz[np.arange(b), labels] -= 1.0
    return loss, dz / b
