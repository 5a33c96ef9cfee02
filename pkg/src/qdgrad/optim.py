"""Optimizers: SGD, AdaGrad, and the diagonal / quasi-diagonal family.

The six metric-based variants combine two storage modes with three ways of
seeding the metric from output-space vectors:

    op      per-sample gradient of the realized loss (actual targets)
    mcnat   gradients against pseudo-targets drawn from the model itself
    nat     the model's exact per-output Fisher decomposition

Every variant preconditions the same minibatch mean gradient; they differ
only in the matrix M they maintain. M follows a decayed moving average
M <- (1-gamma) M + gamma M_minibatch, with gamma = 1 on the first minibatch.
AdaGrad keeps the identical accumulator as the diagonal op variant but
applies exponent -1/2 instead of -1 in the preconditioner.
"""

from dataclasses import dataclass

import numpy as np

from .metric import QDMetric

__all__ = [
    "ALGOS",
    "OptimizerConfig",
    "OptimizerState",
    "StepReport",
    "DivergenceError",
    "step_sgd",
    "step_adagrad",
    "optimizer_step",
    "metric_warmup",
]

ALGOS = ("sgd", "adagrad", "dop", "qdop", "dmcnat", "qdmcnat", "dnat", "qdnat")


class DivergenceError(RuntimeError):
    """A step produced a non-finite loss or direction; parameters untouched."""

    def __init__(self, message, eta=None):
        super().__init__(message)
        self.eta = eta


@dataclass
class OptimizerConfig:
    algo: str
    eta: float
    gamma: float = 0.01
    epsilon: float = 1e-8
    n_mc: int = 1

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if not (np.isfinite(self.eta) and self.eta > 0.0):
            raise ValueError("eta must be a positive finite step-size")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be nonnegative")
        if self.n_mc < 1:
            raise ValueError("n_mc must be at least 1")

    @property
    def quasi(self) -> bool:
        return self.algo.startswith("qd")

    @property
    def needs_metric(self) -> bool:
        return self.algo != "sgd"


class OptimizerState:
    """Owns the metric accumulator between steps."""

    def __init__(self, net, cfg: OptimizerConfig):
        self.metric = QDMetric(net.layout, quasi=cfg.quasi) if cfg.needs_metric else None
        self.t = 0  # completed parameter updates


@dataclass
class StepReport:
    loss: float
    grad_norm: float
    step_norm: float


def step_sgd(params, grad_mean, eta) -> None:
    """In-place vanilla descent step on a flat parameter array."""
    params -= eta * grad_mean


def step_adagrad(params, grad_mean, state, cfg, grad_sq_mean=None) -> None:
    """RMSProp-style adaptive step sharing the decayed accumulator of dop.

    grad_sq_mean is the minibatch mean of per-sample squared gradients;
    when omitted (single-sample streams) it falls back to grad_mean**2.
    """
    if grad_sq_mean is None:
        grad_sq_mean = grad_mean * grad_mean
    m = state.metric
    gamma_t = cfg.gamma if m.initialized else 1.0
    m.decay(gamma_t)
    m.add_terms(grad_sq_mean, None, gamma_t)
    m.initialized = True
    params -= cfg.eta * grad_mean / np.sqrt(m.diag + cfg.epsilon)


def _metric_batch(net, model, trace, grad_deltas, cfg, rng):
    """Minibatch-averaged metric contribution (diag, row) for cfg.algo."""
    y = trace.pre_activations[-1]
    b = y.shape[0]
    if cfg.algo in ("adagrad", "dop", "qdop"):
        return net.qd_batch_terms(trace, grad_deltas, 1.0 / b, quasi=cfg.quasi)
    diag = np.zeros(net.layout.dim)
    row = np.zeros(net.layout.dim) if cfg.quasi else None
    if cfg.algo in ("dmcnat", "qdmcnat"):
        for _ in range(cfg.n_mc):
            pseudo = model.sample_pseudo_target(y, rng)
            deltas = net.backprop_deltas(trace, model.loss_output_grad(y, pseudo))
            d, r = net.qd_batch_terms(trace, deltas, 1.0 / (b * cfg.n_mc), quasi=cfg.quasi)
            diag += d
            if cfg.quasi:
                row += r
    else:  # dnat, qdnat
        for term in model.enumerate_fisher_terms(y):
            deltas = net.backprop_deltas(trace, term.seed)
            d, r = net.qd_batch_terms(trace, deltas, term.weight / b, quasi=cfg.quasi)
            diag += d
            if cfg.quasi:
                row += r
    return diag, row


def optimizer_step(net, model, inputs, targets, state, cfg, rng=None) -> StepReport:
    """One minibatch update; raises DivergenceError instead of writing NaNs.

    Order of operations: forward and backprop under the current parameters,
    then metric decay and accumulation, then preconditioning, then the
    parameter write. Learned output variances take a plain SGD step with
    the same eta after the main update.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    b = inputs.shape[0]
    # overflow here surfaces as a DivergenceError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        trace = net.forward(inputs, mode="train", rng=rng)
        y = trace.pre_activations[-1]
        loss = float(np.mean(model.loss(y, targets)))
        grad_deltas = net.backprop_deltas(trace, model.loss_output_grad(y, targets))
        grad_mean = net.grad_from_deltas(trace, grad_deltas) / b

        theta = net.get_params()
        if cfg.algo == "sgd":
            direction = grad_mean
        elif cfg.algo == "adagrad":
            diag, _ = _metric_batch(net, model, trace, grad_deltas, cfg, rng)
            m = state.metric
            gamma_t = cfg.gamma if m.initialized else 1.0
            m.decay(gamma_t)
            m.add_terms(diag, None, gamma_t)
            m.initialized = True
            direction = grad_mean / np.sqrt(m.diag + cfg.epsilon)
        else:
            diag, row = _metric_batch(net, model, trace, grad_deltas, cfg, rng)
            m = state.metric
            gamma_t = cfg.gamma if m.initialized else 1.0
            m.decay(gamma_t)
            m.add_terms(diag, row, gamma_t)
            m.initialized = True
            direction = m.solve(grad_mean, cfg.epsilon)

    if not (np.isfinite(loss) and np.isfinite(direction).all()):
        raise DivergenceError("non-finite loss or update direction", eta=cfg.eta)
    net.set_params(theta - cfg.eta * direction)
    if getattr(model, "learn_variance", False):
        vgrad = model.variance_grad(y, targets).mean(axis=0)
        model.variance_step(vgrad, cfg.eta)
    state.t += 1
    return StepReport(
        loss=loss,
        grad_norm=float(np.linalg.norm(grad_mean)),
        step_norm=float(cfg.eta * np.linalg.norm(direction)),
    )


def metric_warmup(net, model, inputs, targets, state, cfg, rng=None) -> None:
    """Initialize the metric on a batch with total weight 1, no param write."""
    if state.metric is None:
        return
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] == 0:
        raise ValueError("warmup needs at least one sample")
    trace = net.forward(inputs, mode="train", rng=rng)
    y = trace.pre_activations[-1]
    grad_deltas = net.backprop_deltas(trace, model.loss_output_grad(y, targets))
    diag, row = _metric_batch(net, model, trace, grad_deltas, cfg, rng)
    m = state.metric
    m.decay(1.0)
    m.add_terms(diag, row, 1.0)
    m.initialized = True
