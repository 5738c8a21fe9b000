import logging
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from semharq.errors import TrainingError


@dataclass
class AdamState:
    r"""
    Moment estimates and hyperparameters of an Adam optimizer.

    Parameters
    ----------
    lr : float
        Learning rate :math:`\alpha`.
    beta1 : float
        Decay rate of the first moment :math:`\beta_1`.
    beta2 : float
        Decay rate of the second moment :math:`\beta_2`.
    eps : float
        Denominator floor :math:`\epsilon`.

    Attributes
    ----------
    step_count : int
        Number of completed updates.
    first_moment, second_moment : dict
        Moment arrays keyed by parameter name, created lazily.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    r"""
    Apply one bias-corrected Adam update in place.

    .. math::

        m_t = \beta_1 m_{t-1} + (1 - \beta_1) g_t \qquad
        v_t = \beta_2 v_{t-1} + (1 - \beta_2) g_t^2

        \theta_t = \theta_{t-1} - \alpha \frac{m_t / (1 - \beta_1^t)}
        {\sqrt{v_t / (1 - \beta_2^t)} + \epsilon}

    A parameter whose gradient is identically zero keeps its value and
    moments; the step count advances regardless.

    Parameters
    ----------
    params : dict of Tensor
        Parameters keyed by name.
    grads : dict of numpy.ndarray
        Gradients keyed by the same names. Missing names count as zero.
    state : AdamState
        Optimizer state, updated in place.

    Returns
    -------
    tuple
        ``(params, state)``.

    Raises
    ------
    TrainingError
        If any gradient contains NaN or infinity.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            logging.error(f"Non-finite gradient for parameter '{name}'.")
            raise TrainingError(f"Non-finite gradient for parameter '{name}'.")

    state.step_count += 1
    t = state.step_count
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or not np.any(grad):
            continue
        if grad.shape != param.shape:
            raise TrainingError(
                f"Gradient shape {grad.shape} does not match parameter '{name}' {param.shape}."
            )
        m = state.first_moment.get(name, np.zeros_like(param.data))
        v = state.second_moment.get(name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad ** 2
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
