"""Frame perturbations: gradient-sign attacks and uniform noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .minipong import Frame


@dataclass
class Perturbation:
    delta: np.ndarray  # same shape as the frame image
    kind: str          # "fgsm" | "uniform" | "zero"
    magnitude: float


def fgsm(params: dict, arch: nn.Architecture, frame, epsilon: float) -> Perturbation:
    """epsilon * sign of the input gradient of the self-crossentropy loss.

    sign(0) stays 0, so the L-inf norm is at most epsilon exactly.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    _, grad = nn.input_gradient(params, arch, frame, nn.self_crossentropy_spec())
    delta = (epsilon * np.sign(grad)).astype(np.float32)
    return Perturbation(delta=delta, kind="fgsm", magnitude=float(epsilon))


def uniform_noise(shape, beta: float, rng: np.random.Generator) -> Perturbation:
    """Additive non-negative noise, each pixel i.i.d. Unif(0, beta)."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    delta = rng.uniform(0.0, beta, size=shape).astype(np.float32)
    return Perturbation(delta=delta, kind="uniform", magnitude=float(beta))


def zero_perturbation(shape) -> Perturbation:
    return Perturbation(delta=np.zeros(shape, dtype=np.float32), kind="zero", magnitude=0.0)


def apply(frame, perturbation: Perturbation):
    """Pixelwise frame + delta, clipped back into the valid range [0, 1]."""
    if isinstance(frame, Frame):
        image = frame.image
        out = apply(image, perturbation)
        return Frame(width=frame.width, height=frame.height, pixels=out.reshape(-1))
    image = np.asarray(frame)
    if image.shape != perturbation.delta.shape:
        raise ValueError(
            f"frame shape {image.shape} != perturbation shape {perturbation.delta.shape}"
        )
    return np.clip(image + perturbation.delta, 0.0, 1.0).astype(np.float32)
