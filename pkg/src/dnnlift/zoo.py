"""Built-in source models used for ground-truth generation and testing."""
from __future__ import annotations

import numpy as np

from .model import ModelSpec, OpNode, Tensor


class _Builder:
    def __init__(self, name, input_shape, seed, input_domain=None):
        self.name = name
        self.rng = np.random.default_rng([seed, sum(name.encode())])
        self.ops: list[OpNode] = []
        self.params: dict[str, Tensor] = {}
        self.input_shape = tuple(input_shape)
        self.input_domain = input_domain or {"kind": "uniform", "low": -1.0, "high": 1.0}
        self._n = 0

    def _param(self, stem, shape, low=-0.5, high=0.5):
        name = f"{stem}{self._n}"
        self.params[name] = Tensor(self.rng.uniform(low, high, size=shape))
        return name

    def _src(self):
        return ("op", self.ops[-1].op_id) if self.ops else ("input",)

    def add(self, kind, dims=None, attrs=None, params=None, inputs=None):
        self._n += 1
        self.ops.append(OpNode(op_id=f"{kind.lower()}{self._n}", kind=kind,
                               inputs=inputs if inputs is not None else [self._src()],
                               dims=dims or {}, attrs=attrs or {}, params=params or {}))
        return self.ops[-1]

    def conv(self, o_c, k, s=1, p=0, bias=False):
        i_c = self._cur_shape()[1]
        params = {"weights": self._param("w", (o_c, i_c, k, k))}
        if bias:
            params["biases"] = self._param("b", (o_c,))
        return self.add("Conv", dims={"K": k, "S": s, "P": p, "O_C": o_c, "I_C": i_c},
                        params=params)

    def bias_add(self):
        c = self._cur_shape()[1]
        return self.add("BiasAdd", params={"biases": self._param("b", (c,))})

    def dense(self, n):
        m = int(np.prod(self._cur_shape()))
        return self.add("Dense", dims={"M": m, "N": n},
                        params={"weights": self._param("w", (m, n))})

    def batch_norm(self, eps=1e-5):
        c = self._cur_shape()[1]
        return self.add("BatchNorm", attrs={"eps": eps}, params={
            "gamma": self._param("g", (c,), 0.5, 1.5),
            "beta": self._param("be", (c,), -0.2, 0.2),
            "mean": self._param("mu", (c,), -0.3, 0.3),
            "var": self._param("va", (c,), 0.1, 1.0)})

    def embedding(self, vocab, dim):
        return self.add("Embedding", dims={"N": vocab, "D": dim},
                        params={"weights": self._param("w", (vocab, dim))})

    def _cur_shape(self):
        from .model import propagate_shapes
        if not self.ops:
            return self.input_shape
        return propagate_shapes(self.build())[self.ops[-1].op_id]

    def build(self) -> ModelSpec:
        return ModelSpec(ops=list(self.ops), input_shape=self.input_shape,
                         params=dict(self.params), input_domain=self.input_domain,
                         name=self.name)


def cnn_small(seed=0) -> ModelSpec:
    b = _Builder("cnn_small", (1, 1, 8, 8), seed)
    b.conv(4, k=3, s=1, p=1)
    b.bias_add()
    b.add("ReLU")
    b.add("MaxPool", dims={"K": 2, "S": 2})
    b.conv(8, k=3, s=1, p=0)
    b.add("ReLU")
    b.dense(10)
    b.add("Softmax", attrs={"N": 10})
    return b.build()


def cnn_lrn(seed=0) -> ModelSpec:
    b = _Builder("cnn_lrn", (1, 2, 9, 9), seed)
    b.conv(4, k=3, s=2, p=0)
    b.bias_add()
    b.add("ReLU")
    b.add("LRN", attrs={"n": 3, "alpha": 0.5, "beta": 0.75, "k": 2.0})
    b.add("AvgPool", dims={"K": 2, "S": 1})
    b.dense(6)
    b.add("Softmax", attrs={"N": 6})
    return b.build()


def cnn_wide(seed=0) -> ModelSpec:
    b = _Builder("cnn_wide", (1, 3, 10, 10), seed)
    b.conv(8, k=1, s=1, p=0)
    b.add("ReLU")
    b.conv(8, k=3, s=1, p=1)
    b.bias_add()
    b.add("ReLU")
    b.add("MaxPool", dims={"K": 2, "S": 2})
    b.add("ReLU")
    b.dense(4)
    b.add("Softmax", attrs={"N": 4})
    return b.build()


def text_fc(seed=0) -> ModelSpec:
    b = _Builder("text_fc", (5,), seed, input_domain={"kind": "index", "high": 12})
    b.embedding(12, 8)
    b.dense(4)
    b.add("Softmax", attrs={"N": 4})
    return b.build()


def bn_model(seed=0) -> ModelSpec:
    b = _Builder("bn_model", (1, 3, 6, 6), seed)
    b.conv(4, k=3, s=1, p=1)
    b.batch_norm()
    b.add("ReLU")
    b.add("AvgPool", dims={"K": 2, "S": 2})
    b.dense(5)
    b.add("Softmax", attrs={"N": 5})
    return b.build()


def fig4(seed=0) -> ModelSpec:
    """3x3 input, one 2x2 kernel, stride 1, no padding -> 2x2 output."""
    b = _Builder("fig4", (1, 1, 3, 3), seed)
    b.conv(1, k=2, s=1, p=0)
    return b.build()


def conv6d(seed=0) -> ModelSpec:
    """Single [256,128,3,3] convolution, the vector-blocked layout case."""
    b = _Builder("conv6d", (1, 128, 5, 5), seed)
    b.conv(256, k=3, s=1, p=0)
    return b.build()


def rule1_case(seed=0) -> ModelSpec:
    """Stride-2 conv over 56x56; target of the retile-injection repair test."""
    b = _Builder("rule1_case", (1, 3, 56, 56), seed)
    b.conv(64, k=3, s=1, p=1)
    b.add("ReLU")
    b.conv(128, k=3, s=2, p=1)
    b.add("ReLU")
    b.add("AvgPool", dims={"K": 7, "S": 7})
    b.dense(4)
    b.add("Softmax", attrs={"N": 4})
    return b.build()


MODELS = {
    "cnn_small": cnn_small,
    "cnn_lrn": cnn_lrn,
    "cnn_wide": cnn_wide,
    "text_fc": text_fc,
    "bn_model": bn_model,
    "fig4": fig4,
    "conv6d": conv6d,
    "rule1_case": rule1_case,
}

ROUND_TRIP_MODELS = ("cnn_small", "cnn_lrn", "cnn_wide", "text_fc", "bn_model")


def get_model(name: str, seed: int = 0) -> ModelSpec:
    if name not in MODELS:
        raise KeyError(f"unknown model {name!r}; have {sorted(MODELS)}")
    return MODELS[name](seed)


def sample_models(seed: int, count: int) -> list[ModelSpec]:
    """Random small CNN/text models for classifier corpora."""
    rng = np.random.default_rng(seed)
    out = []
    for idx in range(count):
        if rng.random() < 0.2:
            vocab = int(rng.integers(6, 20))
            b = _Builder(f"rnd_text{idx}", (int(rng.integers(3, 7)),), seed + idx,
                         input_domain={"kind": "index", "high": vocab})
            b.embedding(vocab, int(rng.choice([4, 8])))
            b.dense(int(rng.integers(2, 6)))
            b.add("Softmax", attrs={"N": b.ops[-1].dims["N"]})
            out.append(b.build())
            continue
        h = int(rng.choice([8, 9, 10, 12]))
        c = int(rng.choice([1, 2, 3]))
        b = _Builder(f"rnd_cnn{idx}", (1, c, h, h), seed + idx)
        depth = int(rng.integers(1, 3))
        for _ in range(depth):
            cur = b._cur_shape()
            k = int(rng.choice([1, 3]))
            p = 1 if (k == 3 and rng.random() < 0.5) else 0
            if cur[2] + 2 * p - k + 1 < 2:
                break
            b.conv(int(rng.choice([2, 4])), k=k, s=1, p=p)
            if rng.random() < 0.35:
                b.batch_norm()
            elif rng.random() < 0.6:
                b.bias_add()
            if rng.random() < 0.7:
                b.add("ReLU")
            cur = b._cur_shape()
            if rng.random() < 0.5 and cur[2] >= 4:
                kind = "MaxPool" if rng.random() < 0.5 else "AvgPool"
                b.add(kind, dims={"K": 2, "S": 2})
            if rng.random() < 0.25:
                b.add("LRN", attrs={"n": 3, "alpha": 0.5, "beta": 0.75, "k": 2.0})
        if rng.random() < 0.5:
            b.add("Reshape")
        b.dense(int(rng.integers(2, 8)))
        b.add("Softmax", attrs={"N": b.ops[-1].dims["N"]})
        out.append(b.build())
    return out
