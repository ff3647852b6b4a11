"""Langevin purification defense and its adaptive BPDA+EOT evaluation.

A purified input is one draw of ``K`` Langevin steps started at ``x``. The
defended classifier averages logits over ``H`` purified copies. The attacker
differentiates the cross-entropy of those averaged logits while treating
purification as the identity in the backward pass, and takes ``l_inf`` PGD
steps with that gradient.

Randomness is keyed per example: the random start is hashed from the example
index, and Langevin noise for replicate ``h`` of example ``i`` is keyed by the
chain id ``i * H + h``. Results are therefore independent of how examples are
grouped into batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .autodiff import DenseNet, backward, forward, input_grad
from .energy import EnergyModel
from .langevin import LangevinConfig, langevin_run
from .rng import Stream


class Classifier:
    """Dense network mapping ``R^d`` to ``C >= 2`` logits."""

    def __init__(self, net: DenseNet):
        if net.out_dim < 2:
            raise ValueError("a classifier needs at least two classes")
        self.net = net
        self.dim = net.in_dim
        self.num_classes = net.out_dim

    def logits(self, x) -> np.ndarray:
        return forward(self.net, x)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(x)), axis=1)

    def loss_input_grad(self, x, y) -> np.ndarray:
        """Per-example input gradient of cross-entropy."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logits = forward(self.net, xb)
        return input_grad(self.net, xb, ce_logit_grad(logits, y))[1]


def ce_logit_grad(logits, y) -> np.ndarray:
    """d CE / d logits = softmax(logits) - onehot(y), row-wise."""
    g = softmax(logits, axis=1)
    g[np.arange(g.shape[0]), np.asarray(y)] -= 1.0
    return g


def cross_entropy(logits, y) -> np.ndarray:
    return -log_softmax(logits, axis=1)[np.arange(logits.shape[0]), np.asarray(y)]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    num_steps: int = 50
    replicates: int = 1
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size < 0 or self.step_size > self.epsilon:
            raise ValueError("attack needs 0 <= step_size <= epsilon")
        if self.num_steps < 1 or self.replicates < 1:
            raise ValueError("num_steps and replicates must be at least 1")


@dataclass(frozen=True)
class DefenseConfig:
    langevin_steps: int
    replicates: int = 1
    step_size: float = 1e-2
    temperature: float = 1.0

    def __post_init__(self):
        if self.langevin_steps < 0 or self.replicates < 1:
            raise ValueError("defense needs langevin_steps >= 0 and replicates >= 1")
        if not self.step_size > 0 or not self.temperature > 0:
            raise ValueError("defense step size and temperature must be positive")


@dataclass
class DefenseRecord:
    defended: np.ndarray        # D_i in {0, 1}
    natural_pred: np.ndarray
    labels: np.ndarray
    first_break: np.ndarray     # attack round of the first confirmed break, -1 if none
    adversaries: np.ndarray = field(repr=False)

    @property
    def natural_accuracy(self) -> float:
        return float(np.mean(self.natural_pred == self.labels))

    @property
    def robust_accuracy(self) -> float:
        return float(np.mean(self.defended))

    def rows(self):
        for i in range(self.labels.size):
            yield {"example": i, "natural_pred": int(self.natural_pred[i]),
                   "defended": int(self.defended[i]), "first_break": int(self.first_break[i])}


# --- purification and the ensemble classifier --------------------------------

def purify(ebm: EnergyModel, x_batch, K: int, cfg: DefenseConfig | None = None,
           stream: Stream | None = None, chain_ids=None) -> np.ndarray:
    """One Langevin draw of ``K`` steps per row; ``K = 0`` returns a copy."""
    if K < 0:
        raise ValueError("K must be non-negative")
    x = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    if K == 0:
        return x.copy()
    cfg = cfg or DefenseConfig(K)
    lc = LangevinConfig(cfg.step_size, K, cfg.temperature, stream=stream or Stream())
    return langevin_run(ebm, x, lc, chain_ids=chain_ids).final_state


def _replicated(x, H):
    return np.repeat(x, H, axis=0)


def _replicate_ids(example_ids, H):
    return (np.asarray(example_ids, dtype=np.int64)[:, None] * H + np.arange(H)[None, :]).ravel()


def ensemble_logits(classifier: Classifier, ebm, x, H: int, cfg: DefenseConfig, stream: Stream,
                    example_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean logits over ``H`` purifications, plus the purified points ``(n*H, d)``."""
    if H < 1:
        raise ValueError("H must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    ids = np.arange(n) if example_ids is None else example_ids
    xh = purify(ebm, _replicated(x, H), cfg.langevin_steps, cfg, stream, _replicate_ids(ids, H))
    logits = classifier.logits(xh).reshape(n, H, -1).mean(axis=1)
    return logits, xh


def ensemble_predict(classifier, ebm, x, H: int, defense_cfg: DefenseConfig, stream: Stream | None = None,
                     example_ids=None) -> np.ndarray:
    """Averaged logits; the predicted class is ``argmax`` (ties go to the lowest index)."""
    return ensemble_logits(classifier, ebm, x, H, defense_cfg, stream or Stream(), example_ids)[0]


def bpda_eot_gradient(classifier, ebm, x, y, H_adv: int, cfg: DefenseConfig, stream: Stream | None = None,
                      example_ids=None, _cache=None) -> np.ndarray:
    """Attack gradient: cross-entropy of the averaged logits, backpropagated to each
    purified copy and averaged, with purification treated as the identity."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if _cache is None:
        _cache = ensemble_logits(classifier, ebm, x, H_adv, cfg, stream or Stream(), example_ids)
    mean_logits, xh = _cache
    seed = _replicated(ce_logit_grad(mean_logits, np.atleast_1d(y)), H_adv) / H_adv
    _, g = input_grad(classifier.net, xh, seed)
    return g.reshape(x.shape[0], H_adv, -1).sum(axis=1)


# --- PGD -----------------------------------------------------------------------

def pgd_step(x_adv, grad, x_orig, epsilon: float, alpha: float, bounds=None) -> np.ndarray:
    """Signed ascent step, projected onto the ``l_inf`` ball and optional box."""
    out = np.clip(np.asarray(x_adv) + alpha * np.sign(grad), np.asarray(x_orig) - epsilon,
                  np.asarray(x_orig) + epsilon)
    if bounds is not None:
        out = np.clip(out, bounds[0], bounds[1])
    return out


def random_start(x, epsilon: float, stream: Stream, example_ids, bounds=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = stream.child("start").uniforms(stream.chain_keys(example_ids), 0, 1, x.shape[1])[0]
    out = x + epsilon * (2.0 * u - 1.0)
    if bounds is not None:
        out = np.clip(out, bounds[0], bounds[1])
    return out


def evaluate_defense(data, labels, classifier: Classifier, ebm, attack_cfg: AttackConfig,
                     defense_cfg: DefenseConfig, stream: Stream | int = 0, bounds=None,
                     example_ids=None) -> DefenseRecord:
    """Adaptive attack loop over all examples at once.

    Each round ``j``: classify the current adversaries with ``H_adv`` purified
    copies and take the attack gradient from the same copies; where that
    prediction is wrong, confirm with a fresh ``H_def``-copy prediction and
    clear ``D_i`` if it is also wrong; then take the PGD step. An example whose
    clean ``H_def`` prediction is already wrong starts with ``D_i = 0``.
    """
    stream = stream if isinstance(stream, Stream) else Stream(int(stream))
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    ids = np.arange(n) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    Ha, Hd = attack_cfg.replicates, defense_cfg.replicates
    eps, alpha = attack_cfg.epsilon, attack_cfg.step_size

    nat = np.argmax(ensemble_predict(classifier, ebm, x, Hd, defense_cfg, stream.child("natural"), ids), axis=1)
    D = (nat == y).astype(np.int8)
    first_break = np.where(D == 0, 0, -1)
    xa = random_start(x, eps, stream, ids, bounds) if attack_cfg.random_start else x.copy()
    for j in range(1, attack_cfg.num_steps + 1):
        cache = ensemble_logits(classifier, ebm, xa, Ha, defense_cfg, stream.child("attack", j), ids)
        c = np.argmax(cache[0], axis=1)
        delta = bpda_eot_gradient(classifier, ebm, xa, y, Ha, defense_cfg, _cache=cache)
        # confirming examples that are already broken cannot change D, so they are skipped
        check = (c != y) & (D == 1)
        if check.any():
            c2 = np.argmax(ensemble_predict(classifier, ebm, xa[check], Hd, defense_cfg,
                                            stream.child("defense", j), ids[check]), axis=1)
            broken = np.flatnonzero(check)[c2 != y[check]]
            D[broken] = 0
            first_break[broken] = j
        xa = pgd_step(xa, delta, x, eps, alpha, bounds)
    return DefenseRecord(D, nat, y, first_break, xa)


def plain_pgd(data, labels, classifier: Classifier, attack_cfg: AttackConfig, stream: Stream | int = 0,
              bounds=None, example_ids=None) -> DefenseRecord:
    """Undefended reference: the same loop with ``f`` in place of the ensemble."""
    stream = stream if isinstance(stream, Stream) else Stream(int(stream))
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    ids = np.arange(x.shape[0]) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    nat = classifier.predict(x)
    D = (nat == y).astype(np.int8)
    first_break = np.where(D == 0, 0, -1)
    xa = random_start(x, attack_cfg.epsilon, stream, ids, bounds) if attack_cfg.random_start else x.copy()
    for j in range(1, attack_cfg.num_steps + 1):
        logits = classifier.logits(xa)
        wrong = (np.argmax(logits, axis=1) != y) & (D == 1)
        D[wrong] = 0
        first_break[wrong] = j
        _, g = input_grad(classifier.net, xa, ce_logit_grad(logits, y))
        xa = pgd_step(xa, g, x, attack_cfg.epsilon, attack_cfg.step_size, bounds)
    return DefenseRecord(D, nat, y, first_break, xa)


# --- toy classifier ------------------------------------------------------------

def fit_classifier(x, y, num_classes: int, hidden=(16,), rng=None, steps: int = 2000, lr: float = 0.1,
                   activation: str = "tanh") -> Classifier:
    """Full-batch gradient descent on cross-entropy.

    Inputs are standardised during training and the standardisation is folded
    into the first layer afterwards, so the returned net takes raw inputs.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    xs = (x - mu) / sd
    net = DenseNet.init([x.shape[1], *hidden, num_classes], rng, activation=activation)
    n = x.shape[0]
    for _ in range(steps):
        seed = ce_logit_grad(forward(net, xs), y) / n
        grads = backward(net, xs, seed).param_grads
        net = net.with_params([p - lr * g for p, g in zip(net.params(), grads)])
    params = net.params()
    w0, b0 = params[0], params[1]
    params[0] = w0 / sd[None, :]
    params[1] = b0 - params[0] @ mu
    return Classifier(net.with_params(params))
