"""Shared building blocks: weight initialization and batch-norm containers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNormState, Parameter, Tensor, batch_norm


def kaiming_conv(rng: np.random.Generator, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Fan-in scaled normal init for an HWIO conv kernel."""
    kh, kw, c_in, _ = shape
    std = np.sqrt(2.0 / (kh * kw * c_in))
    return rng.standard_normal(shape) * std


def kaiming_linear(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Fan-in scaled normal init for a [in, out] linear weight."""
    std = np.sqrt(2.0 / shape[0])
    return rng.standard_normal(shape) * std


@dataclass
class BnParams:
    """Learnable affine plus running statistics for one batch-norm site."""

    gamma: Parameter
    beta: Parameter
    state: BatchNormState

    def apply(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def state_entries(self) -> dict[str, np.ndarray]:
        prefix = self.gamma.name.rsplit(".", 1)[0]
        return {
            f"{prefix}.running_mean": self.state.running_mean,
            f"{prefix}.running_var": self.state.running_var,
        }


def init_bn(channels: int, name: str) -> BnParams:
    return BnParams(
        gamma=Parameter(f"{name}.gamma", np.ones(channels)),
        beta=Parameter(f"{name}.beta", np.zeros(channels)),
        state=BatchNormState(channels),
    )
