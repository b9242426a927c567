"""Search for perturbations that flip the approximated net but not the backbone.

The search alternates a gradient-ascent step on the approximated model's loss
with a local random search, then masks the perturbation to coordinates where
the two models' input gradients disagree strongly while the backbone's own
gradient stays near its clean-input value. Whenever the backbone starts
misclassifying, the perturbation reverts to the most recent safe checkpoint
and the step length halves.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .seeding import derive_rng

__all__ = ["AttackConfig", "AttackOutcome", "attack_pann", "verify_outcome",
           "discrepancy_grid"]


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for the two-model evasion search.

    eps is the ∞-norm budget; eps_atk keeps only coordinates whose gradient
    difference between the two models is at least that large; eps_lim drops
    coordinates where the backbone gradient moved more than that from its
    clean-input value.
    """

    alpha: float = 0.05
    eps: float = 0.3
    eps_atk: float = 1e-6
    eps_lim: float = 1.0
    search_radius: float = 0.02
    search_draws: int = 16
    max_iters: int = 200
    backtrack_depth: int = 8
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        for name in ("alpha", "eps", "eps_atk", "eps_lim", "search_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.search_draws < 1:
            raise ValueError("search_draws must be >= 1")
        if self.max_iters < 0 or not np.isfinite(self.max_iters):
            raise ValueError("max_iters must be a finite count >= 0")
        if self.backtrack_depth < 1:
            raise ValueError("backtrack_depth must be >= 1")


@dataclass(frozen=True)
class AttackOutcome:
    """Result of one attack run.

    trace holds one (backbone prediction, approximated prediction) pair per
    executed iteration, evaluated at the perturbation accepted at the end of
    that iteration; accepted states never make the backbone misclassify.
    """

    success: bool
    delta: np.ndarray
    iterations: int
    trace: tuple = ()
    failure_reason: str | None = field(default=None)


def _predict_one(net: nn.Network, x1: np.ndarray) -> int:
    return int(nn.predict(net, x1[None])[0])


def _loss_one(net: nn.Network, x1: np.ndarray, y: int, kind: str) -> float:
    logits, _ = nn.forward(net, x1[None])
    loss, _ = nn.loss_and_logit_grad(logits, np.array([y]), kind)
    return loss


def _input_grad_one(net, x1, y, kind) -> np.ndarray:
    g, _ = nn.input_gradient(net, x1[None], np.array([y]), kind)
    return g[0]


def _random_search(x, delta, y, backbone, pann, cfg, rng):
    """Best of k uniform ∞-ball draws around delta, by approximated-model
    loss, restricted to candidates the backbone still gets right. The
    current iterate competes on the same terms; if no candidate qualifies
    the iterate is returned unchanged."""
    cands = [delta]
    for _ in range(cfg.search_draws):
        step = rng.uniform(-cfg.search_radius, cfg.search_radius,
                           size=delta.shape)
        cands.append(np.clip(delta + step, -cfg.eps, cfg.eps))
    best, best_loss = delta, None
    for cand in cands:
        if _predict_one(backbone, x + cand) != y:
            continue
        loss = _loss_one(pann, x + cand, y, cfg.loss_kind)
        if best_loss is None or loss > best_loss:
            best, best_loss = cand, loss
    return best


def attack_pann(x, y, backbone: nn.Network, pann: nn.Network,
                cfg: AttackConfig, seed: int = 0) -> AttackOutcome:
    """Find delta with ‖delta‖∞ ≤ cfg.eps flipping only the approximated net.

    Requires the backbone to classify the clean sample correctly. Returns a
    failure outcome (with trace) when the iteration cap runs out. Fixed seed
    gives an identical outcome and trace.
    """
    x = np.asarray(x, dtype=np.float64)
    y = int(y)
    if _predict_one(backbone, x) != y:
        raise ValueError(
            f"sample not clean: backbone predicts "
            f"{_predict_one(backbone, x)}, label is {y}")

    rng = derive_rng(seed, "attack")
    clip = lambda d: np.clip(d, -cfg.eps, cfg.eps)
    delta = np.zeros_like(x)

    if _predict_one(pann, x) != y:
        return AttackOutcome(True, delta, 0)

    # the eps_lim mask compares against the backbone gradient at the clean
    # input, which never changes during the search
    g_bb_clean = _input_grad_one(backbone, x, y, cfg.loss_kind)

    checkpoints = [delta.copy()]  # delta = 0 is safe by precondition
    alpha = cfg.alpha
    trace = []
    iters = 0
    while iters < cfg.max_iters:
        iters += 1
        if _predict_one(pann, x + delta) == y:
            g_pann = _input_grad_one(pann, x + delta, y, cfg.loss_kind)
            delta = clip(delta + alpha * g_pann)
            delta = clip(_random_search(x, delta, y, backbone, pann,
                                        cfg, rng))
            g_pann = _input_grad_one(pann, x + delta, y, cfg.loss_kind)
            g_bb = _input_grad_one(backbone, x + delta, y, cfg.loss_kind)
            delta = clip(delta * (np.abs(g_pann - g_bb) >= cfg.eps_atk))
            delta = clip(delta * (np.abs(g_bb - g_bb_clean) <= cfg.eps_lim))
        if _predict_one(backbone, x + delta) != y:
            # revert to the most recent safe state and probe more gently
            delta = checkpoints.pop() if checkpoints else np.zeros_like(x)
            alpha /= 2.0
        else:
            checkpoints.append(delta.copy())
            if len(checkpoints) > cfg.backtrack_depth:
                checkpoints.pop(0)
            alpha = cfg.alpha
        pb = _predict_one(backbone, x + delta)
        pp = _predict_one(pann, x + delta)
        trace.append((pb, pp))
        if pb == y and pp != y:
            return AttackOutcome(True, delta, iters, tuple(trace))
    return AttackOutcome(False, delta, iters, tuple(trace),
                         failure_reason="iteration cap reached")


def verify_outcome(x, y, delta, backbone: nn.Network, pann: nn.Network,
                   eps: float) -> bool:
    """Recompute the three success conditions from scratch.

    True iff ‖delta‖∞ ≤ eps, the backbone classifies x+delta as y, and the
    approximated net does not. Independent of any search state.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape:
        raise ValueError(f"delta shape {delta.shape} != input {x.shape}")
    if np.max(np.abs(delta)) > eps:
        return False
    xa = x + delta
    return (_predict_one(backbone, xa) == int(y)
            and _predict_one(pann, xa) != int(y))


def discrepancy_grid(x, y, backbone: nn.Network, pann: nn.Network,
                     eps: float, steps: int = 50):
    """Exhaustively scan 2-feature perturbations on a (2*steps+1)² grid.

    Returns (axis, mask) where axis holds the per-coordinate offsets and
    mask[i, j] is True when delta = (axis[i], axis[j]) keeps the backbone
    correct while flipping the approximated net. Endpoints sit exactly at
    ±eps so every marked point satisfies the norm budget.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,):
        raise ValueError(f"grid oracle needs a 2-feature input, got {x.shape}")
    axis = np.linspace(-eps, eps, 2 * steps + 1)
    di, dj = np.meshgrid(axis, axis, indexing="ij")
    deltas = np.stack([di.ravel(), dj.ravel()], axis=1)
    batch = x[None, :] + deltas
    pb = nn.predict(backbone, batch)
    pp = nn.predict(pann, batch)
    mask = ((pb == int(y)) & (pp != int(y))).reshape(di.shape)
    return axis, mask
