"""Parameter-store backed layer helpers shared by the model modules."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .params import Initializer, ParamStore
from .tensor import Tensor


def add_batch_norm(store: ParamStore, name: str, c: int) -> None:
    store.add(f"{name}.gamma", np.ones(c))
    store.add(f"{name}.beta", np.zeros(c))
    store.add_buffer(f"{name}.mean", np.zeros(c))
    store.add_buffer(f"{name}.var", np.ones(c))


def batch_norm(store: ParamStore, name: str, x: Tensor, training: bool, momentum: float = 0.1) -> Tensor:
    return F.batch_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"], store.buffer(f"{name}.mean"),
                        store.buffer(f"{name}.var"), training, momentum)


def add_conv(store: ParamStore, init: Initializer, name: str, c_out: int, c_in: int, k: int = 3,
             gain: float = 1.0, bias: float = 0.0) -> None:
    store.add(f"{name}.w", gain * init.conv(c_out, c_in, k))
    store.add(f"{name}.b", np.full(c_out, bias))


def conv(store: ParamStore, name: str, x: Tensor) -> Tensor:
    w = store[f"{name}.w"]
    return F.conv2d(x, w, store[f"{name}.b"], padding=w.shape[-1] // 2)


def add_layer_norm(store: ParamStore, name: str, c: int) -> None:
    store.add(f"{name}.gamma", np.ones(c))
    store.add(f"{name}.beta", np.zeros(c))


def layer_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return F.layer_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"])


def add_attention(store: ParamStore, init: Initializer, name: str, c: int, qkv_bias: bool) -> None:
    for proj in ("q", "k", "v", "o"):
        store.add(f"{name}.w_{proj}", init.dense(c, c))
        if qkv_bias:
            store.add(f"{name}.b_{proj}", np.zeros(c))


def attention(store: ParamStore, name: str, x: Tensor, bias: Tensor | None, heads: int) -> Tensor:
    get = lambda key: store[key] if key in store else None  # noqa: E731
    return F.mhsa(x, store[f"{name}.w_q"], store[f"{name}.w_k"], store[f"{name}.w_v"], store[f"{name}.w_o"],
                  bias, heads, b_q=get(f"{name}.b_q"), b_k=get(f"{name}.b_k"), b_v=get(f"{name}.b_v"),
                  b_o=get(f"{name}.b_o"))


def add_mlp(store: ParamStore, init: Initializer, name: str, c: int, ratio: float) -> None:
    hidden = max(1, int(round(c * ratio)))
    store.add(f"{name}.w1", init.dense(c, hidden))
    store.add(f"{name}.b1", np.zeros(hidden))
    store.add(f"{name}.w2", init.dense(hidden, c))
    store.add(f"{name}.b2", np.zeros(c))


def mlp(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return F.mlp(x, store[f"{name}.w1"], store[f"{name}.b1"], store[f"{name}.w2"], store[f"{name}.b2"])


def to_tokens(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N, C, H, W)."""
    n, _, c = t.shape
    return t.transpose(0, 2, 1).reshape(n, c, h, w)
