import numpy as np

from semharq.autodiff.mlp import backward
from semharq.autodiff.mlp import forward
from semharq.autodiff.tensor import Tensor
from semharq.errors import UsageError


def grad_check(net, x, eps=1e-4, seed=0):
    r"""
    Compare analytic parameter gradients with central finite differences.

    The test loss is :math:`L = \sum_i c_i \, f(x)_i` with a fixed
    standard-normal weight vector :math:`c`, so every output contributes.

    Parameters
    ----------
    net : Mlp
        Network under test. Parameters are restored afterwards.
    x : array_like
        Input batch.
    eps : float, optional
        Finite-difference step in :math:`(0, 10^{-2}]`.
    seed : int, optional
        Seed of the weight vector.

    Returns
    -------
    float
        Maximum over all parameter entries of
        :math:`|a - n| / \max(|a|, |n|, 10^{-8})`.

    Raises
    ------
    UsageError
        If ``eps`` is outside its admissible range.
    """
    if not 0.0 < eps <= 1e-2:
        raise UsageError(f"Finite-difference step eps={eps} outside (0, 1e-2].")
    x = Tensor(np.asarray(x, dtype=np.float64))
    output_shape = forward(net, x).shape
    weights = np.random.default_rng(seed).standard_normal(output_shape)

    def loss_value():
        return float((forward(net, x).data * weights).sum())

    params = net.parameters()
    analytic = backward(params, (forward(net, x) * weights).sum())

    worst = 0.0
    for name, param in params.items():
        for idx in np.ndindex(param.shape):
            original = param.data[idx]
            param.data[idx] = original + eps
            upper = loss_value()
            param.data[idx] = original - eps
            lower = loss_value()
            param.data[idx] = original
            numeric = (upper - lower) / (2.0 * eps)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
