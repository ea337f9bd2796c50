"""Parameter bookkeeping and the AdamW update rule."""
from __future__ import annotations

from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Named, ordered collection of learnable tensors with freeze flags.

    Iteration order is insertion order, which fixes the (deterministic)
    update order of the optimizer and the layout of checkpoints.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._frozen: Dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._frozen[name] = False
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params.keys())

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def count(self, prefix: str = "") -> int:
        """Total number of scalars under a name prefix."""
        return sum(t.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def freeze_all(self) -> None:
        for name in self._params:
            self._frozen[name] = True
            self._params[name].requires_grad = False

    def set_trainable(self, predicate) -> None:
        """Freeze/unfreeze by predicate on the parameter name."""
        for name, t in self._params.items():
            trainable = bool(predicate(name))
            self._frozen[name] = not trainable
            t.requires_grad = trainable

    def snapshot(self, names: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        keys = self.names() if names is None else list(names)
        return {n: self._params[n].data.copy() for n in keys}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise ShapeError(
                f"parameter set mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, t in self._params.items():
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeError(
                    f"parameter {name}: stored shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


class AdamW:
    """Decoupled-weight-decay Adam.

    Moments are lazily allocated per parameter and start at zero; frozen
    parameters are skipped entirely (no decay, no moment update).
    """

    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else float(lr)
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        for name, p in self.params.items():
            if self.params.is_frozen(name):
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def adamw_step(params: ParamStore, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0, state: Optional[AdamW] = None) -> AdamW:
    """One AdamW update over ``params`` using gradients already accumulated.

    Returns the optimizer holding the moment state; pass it back in to
    continue the same trajectory.
    """
    if state is None:
        state = AdamW(params, lr, beta1, beta2, eps, weight_decay)
    state.step(lr)
    return state


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base_lr`` to ``floor * base_lr`` over a stage."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    lo = base_lr * floor
    return lo + 0.5 * (base_lr - lo) * (1.0 + np.cos(np.pi * frac))
