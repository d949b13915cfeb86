import numpy as np
import pytest

from psprune.layers import LayerSpec, Model


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def direct_conv(w, x, stride=1, pad=0):
    """Seven nested loops, nothing clever."""
    N, C, H, W = x.shape
    K, _, R, S = w.shape
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1
    out = np.zeros((N, K, Ho, Wo))
    for n in range(N):
        for k in range(K):
            for oh in range(Ho):
                for ow in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for r in range(R):
                            for s in range(S):
                                ih, iw = oh * stride + r - pad, ow * stride + s - pad
                                if 0 <= ih < H and 0 <= iw < W:
                                    acc += w[k, c, r, s] * x[n, c, ih, iw]
                    out[n, k, oh, ow] = acc
    return out


def two_conv_net(seed=0, C=2, K1=3, K2=2, size=5, classes=3):
    """input -> conv(3x3) -> relu -> conv(3x3) -> global avgpool -> fc; well under 1k params."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec("input", "input", []),
        LayerSpec("c1", "conv", ["input"], {"K": K1, "C": C, "R": 3, "S": 3, "stride": 1, "padding": 1},
                  psp_attached=True),
        LayerSpec("r1", "relu", ["c1"]),
        LayerSpec("c2", "conv", ["r1"], {"K": K2, "C": K1, "R": 3, "S": 3, "stride": 1, "padding": 1},
                  psp_attached=True),
        LayerSpec("pool", "avgpool", ["c2"], {"kernel": None}),
        LayerSpec("fc", "linear", ["pool"], {"in": K2, "out": classes}, psp_exempt_reason="output"),
    ]
    params = {
        "c1.weight": rng.normal(0, 0.5, (K1, C, 3, 3)),
        "c2.weight": rng.normal(0, 0.5, (K2, K1, 3, 3)),
        "fc.weight": rng.normal(0, 0.5, (classes, K2)),
        "fc.bias": rng.normal(0, 0.1, classes),
    }
    return Model(layers, params, {}, (C, size, size), classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
