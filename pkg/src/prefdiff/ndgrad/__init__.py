"""Small reverse-mode autodiff over numpy float64 arrays."""
from .optim import Adam, AdamState, adam_apply
from .rng import Rng, derive_seed, seeded_rng
from .tensor import (
    DomainError,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    add,
    as_tensor,
    clip,
    concat,
    detach,
    div,
    exp,
    log,
    matmul,
    mean,
    mse,
    mul,
    neg,
    no_tape,
    relu,
    reshape,
    slice_last,
    softmax,
    softplus,
    sqrt,
    square,
    sub,
    sum,
    take_rows,
    tanh,
    transpose,
)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def backward(loss: Tensor, params=None):
    """Gradients of ``loss`` on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("backward called with no active tape")
    return tape.backward(loss, params)
