"""Small neural-network building blocks shared by the two models.

Everything here is a pure function over :class:`~urnng.autodiff.Tensor`
values; parameter creation and ownership live with the model classes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_SCALE = 0.1


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def make_param(rng: np.random.Generator, name: str, shape,
               scale: float = INIT_SCALE) -> Tensor:
    return Tensor(uniform_init(rng, shape, scale), requires_grad=True,
                  name=name)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_row(ad.matmul(x, w), b)


def lstm_cell(x: Tensor, state: tuple[Tensor, Tensor], w: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step.  ``w`` is [(x_dim + hidden), 4 * hidden], gates i,f,o,g."""
    h_prev, c_prev = state
    hidden = h_prev.shape[-1]
    z = linear(ad.concat([x, h_prev], axis=1), w, b)
    i = ad.sigmoid(ad.narrow(z, 1, 0, hidden))
    f = ad.sigmoid(ad.narrow(z, 1, hidden, hidden))
    o = ad.sigmoid(ad.narrow(z, 1, 2 * hidden, hidden))
    g = ad.tanh(ad.narrow(z, 1, 3 * hidden, hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def tree_cell(left: tuple[Tensor, Tensor], right: tuple[Tensor, Tensor],
              w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Binary tree composition with one forget gate per child.

    ``w`` is [2 * dim, 5 * dim] with gate order i, f_left, f_right, o, g.
    The output depends on child order, so mirrored children compose to
    different vectors.
    """
    hl, cl = left
    hr, cr = right
    dim = hl.shape[-1]
    z = linear(ad.concat([hl, hr], axis=1), w, b)
    i = ad.sigmoid(ad.narrow(z, 1, 0, dim))
    fl = ad.sigmoid(ad.narrow(z, 1, dim, dim))
    fr = ad.sigmoid(ad.narrow(z, 1, 2 * dim, dim))
    o = ad.sigmoid(ad.narrow(z, 1, 3 * dim, dim))
    g = ad.tanh(ad.narrow(z, 1, 4 * dim, dim))
    c = ad.add(ad.add(ad.mul(fl, cl), ad.mul(fr, cr)), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c
