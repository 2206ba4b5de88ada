"""Gradient optimizer with decoupled weight decay plus a one-cycle schedule.

The decay term multiplies the parameter directly and is scaled by the
current learning rate, independent of the adaptive moment normalization,
so regularization strength does not depend on gradient magnitude.
"""

import math

import numpy as np

from .errors import ConfigError


class OneCycle:
    """Cosine warmup from max_lr/div up to max_lr, cosine anneal to a floor.

    Warmup covers pct_start of total_steps; the anneal ends at
    (max_lr / div) / final_div and the rate stays there if stepped past
    the end.
    """

    def __init__(self, max_lr, total_steps, pct_start=0.3, div=25.0,
                 final_div=1e4):
        if max_lr <= 0.0:
            raise ConfigError("max_lr must be positive")
        if total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 < pct_start < 1.0:
            raise ConfigError("pct_start must lie strictly inside (0, 1)")
        self.max_lr = float(max_lr)
        self.total_steps = int(total_steps)
        self.start_lr = self.max_lr / float(div)
        self.final_lr = self.start_lr / float(final_div)
        self.peak_step = pct_start * self.total_steps

    def lr_at(self, step):
        if step < 0:
            raise ConfigError("schedule step must be >= 0")
        if step >= self.total_steps:
            return self.final_lr
        if step <= self.peak_step:
            frac = step / self.peak_step
            return self.start_lr + (self.max_lr - self.start_lr) \
                * 0.5 * (1.0 - math.cos(math.pi * frac))
        frac = (step - self.peak_step) / (self.total_steps - self.peak_step)
        return self.final_lr + (self.max_lr - self.final_lr) \
            * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam moments with weight decay applied directly to the weights.

    Takes either a flat [(name, Parameter)] list or a list of group dicts
    {"params": [...], "lr_scale": float, "weight_decay": float}; the group
    form allows a submodule to run at a scaled rate.  step(lr) applies one
    update at the given base rate, so the caller owns the schedule.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if params and isinstance(params[0], tuple):
            params = [{"params": params}]
        self.groups = []
        seen = set()
        for g in params:
            entries = list(g["params"])
            for name, _ in entries:
                if name in seen:
                    raise ConfigError(f"parameter {name!r} appears twice")
                seen.add(name)
            self.groups.append({
                "params": entries,
                "lr_scale": float(g.get("lr_scale", 1.0)),
                "weight_decay": float(g.get("weight_decay", weight_decay))})
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data)
                  for g in self.groups for name, p in g["params"]}
        self.v = {name: np.zeros_like(p.data)
                  for g in self.groups for name, p in g["params"]}

    def zero_grad(self):
        for g in self.groups:
            for _, p in g["params"]:
                p.reset_grad()

    def step(self, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group in self.groups:
            eff = float(lr) * group["lr_scale"]
            wd = group["weight_decay"]
            for name, p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad.astype(p.data.dtype, copy=False)
                m = self.m[name]
                v = self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                if wd:
                    p.data = p.data - eff * wd * p.data
                p.data = p.data - eff * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
