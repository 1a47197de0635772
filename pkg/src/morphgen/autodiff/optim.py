import numpy as np

from ..errors import NonFiniteError


class Adam:
    """Adam with bias correction; moment buffers live on each Parameter."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient on parameter {p.name or '<unnamed>'}")
        for p in self.params:
            adam_update(p, self.lr, self.beta1, self.beta2, self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_update(p, lr, beta1, beta2, eps):
    st = p.adam
    g = p.grad
    st.step += 1
    st.m *= beta1
    st.m += (1.0 - beta1) * g
    st.v *= beta2
    st.v += (1.0 - beta2) * g * g
    m_hat = st.m / (1.0 - beta1**st.step)
    v_hat = st.v / (1.0 - beta2**st.step)
    p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


def adam_step(params, lr, beta1=0.9, beta2=0.99, eps=1e-8):
    """Functional form: one Adam update on ``params``, then zero their gradients."""
    Adam(params, lr, beta1, beta2, eps).step()


class EMA:
    """Exponential moving average shadow of a parameter list."""

    def __init__(self, params, decay=0.995):
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.copy() for p in self.params]

    def update(self):
        d = self.decay
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data
