import logging
from collections.abc import Iterable, Sequence

import numpy as np

from errors import GradientMissingError
from services.tensor import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """
    Adam with decoupled weight decay over one or more parameter groups.

    Each group is a dict with a "params" list and optional "lr", "weight_decay", "betas", "eps"
    overriding the optimizer defaults, so the backbone and the overhead can use different rates.

        m_t = b1 * m + (1 - b1) * g
        v_t = b2 * v + (1 - b2) * g^2
        p  <- p - lr * (m_t / (1 - b1^t)) / (sqrt(v_t / (1 - b2^t)) + eps) - lr * wd * p
    """

    def __init__(self, groups: Sequence[dict] | Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not all(0.0 <= beta < 1.0 for beta in betas):
            raise ValueError(f"Invalid betas: {betas}")
        groups = list(groups)
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": groups}]
        defaults = {"lr": lr, "betas": betas, "eps": eps, "weight_decay": weight_decay}
        self.param_groups = [{**defaults, **group, "params": list(group["params"])} for group in groups]
        self.step_count = 0
        self.state: dict[int, dict[str, np.ndarray]] = {}
        for group in self.param_groups:
            for p in group["params"]:
                self.state[id(p)] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def zero_grad(self) -> None:
        for group in self.param_groups:
            for p in group["params"]:
                p.grad = None

    def step(self) -> None:

        """
        The step function applies one AdamW update to every parameter and then zeroes the gradients.
        A parameter without a gradient is an error: callers must backpropagate first. Gradients are checked
        before anything is touched, so a failed step changes no state.
        """
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    raise GradientMissingError(f"parameter {p.name or tuple(p.shape)} has no gradient")
        self.step_count += 1
        t = self.step_count
        for group in self.param_groups:
            lr, eps, decay = group["lr"], group["eps"], group["weight_decay"]
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                state = self.state[id(p)]
                state["m"] = beta1 * state["m"] + (1.0 - beta1) * p.grad
                state["v"] = beta2 * state["v"] + (1.0 - beta2) * p.grad * p.grad
                m_hat = state["m"] / (1.0 - beta1 ** t)
                v_hat = state["v"] / (1.0 - beta2 ** t)
                update = m_hat / (np.sqrt(v_hat) + eps) + decay * p.data
                p.data = (p.data - lr * update).astype(p.data.dtype)
        self.zero_grad()
