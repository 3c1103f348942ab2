"""Minimal numpy optimizers with serialisable state."""
from __future__ import annotations

import math

import numpy as np

__all__ = ["Adam", "SGD", "make_optimizer", "cosine_lr"]


class Adam:
    def __init__(self, groups: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        # groups: name -> learning rate; parameters are registered lazily by key
        self.groups = dict(groups)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, key: str, group: str, param: np.ndarray, grad: np.ndarray, lr_scale: float = 1.0) -> np.ndarray:
        """Return the update to add to ``param``."""
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
            self.t[key] = 0
        self.t[key] += 1
        t = self.t[key]
        m = self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
        v = self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        return -self.groups[group] * lr_scale * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        arrays = {}
        for k in self.m:
            arrays[f"opt/m/{k}"] = self.m[k]
            arrays[f"opt/v/{k}"] = self.v[k]
        return {"arrays": arrays, "meta": {"kind": "adam", "t": dict(self.t)}}

    def load(self, meta: dict, arrays: dict):
        self.t = {k: int(v) for k, v in meta["t"].items()}
        self.m = {k: arrays[f"opt/m/{k}"].copy() for k in self.t}
        self.v = {k: arrays[f"opt/v/{k}"].copy() for k in self.t}


class SGD:
    def __init__(self, groups: dict[str, float], momentum=0.9):
        self.groups = dict(groups)
        self.momentum = momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, key, group, param, grad, lr_scale: float = 1.0):
        b = self.buf.get(key)
        b = grad.copy() if b is None else self.momentum * b + grad
        self.buf[key] = b
        return -self.groups[group] * lr_scale * b

    def state(self) -> dict:
        return {"arrays": {f"opt/buf/{k}": v for k, v in self.buf.items()}, "meta": {"kind": "sgd", "keys": list(self.buf)}}

    def load(self, meta, arrays):
        self.buf = {k: arrays[f"opt/buf/{k}"].copy() for k in meta["keys"]}


def make_optimizer(opt_cfg, weight_lr: float, logit_lr: float):
    groups = {"weights": weight_lr, "logits": logit_lr}
    if opt_cfg.kind == "adam":
        return Adam(groups, beta1=opt_cfg.beta1, beta2=opt_cfg.beta2)
    return SGD(groups, momentum=opt_cfg.momentum)


def cosine_lr(epoch: int, total: int) -> float:
    """Multiplier decaying from 1 at epoch 0 to 0 after ``total`` epochs."""
    if total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * epoch / total))
