"""Process-wide counter of optimizer gradient steps.

The zero-shot path must perform zero gradient steps; every optimizer step in
the training and inversion loops reports here so tests and the timing
benchmark can assert that exactly.
"""

GRAD_STEPS = 0


def count_grad_step(n=1):
    global GRAD_STEPS
    GRAD_STEPS += n


def grad_steps():
    return GRAD_STEPS


def reset():
    global GRAD_STEPS
    GRAD_STEPS = 0
