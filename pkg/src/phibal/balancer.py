"""Online balancing state and the competing load-balancing mechanisms.

One `BalancerState` per sparse layer tracks an exponential moving average of
that layer's routing statistics and turns it into an auxiliary loss:

* ``phi``       price-based balancing: the loss is <p, w> where w is the
                potential gradient at the updated EMA, held out of the
                gradient flow so only the current batch probabilities learn.
* ``st_moe``    the classic frequency/probability dot product.
* ``loss_free`` no loss at all; a per-expert logit bias steers top-k
                selection and is nudged each step toward uniform utilization.
* ``none``      no balancing (the EMA is still tracked for reporting).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, constant
from .potentials import PotentialSpec, aux_weight

__all__ = [
    "MECHANISMS",
    "STATISTICS",
    "BalancerState",
    "stmoe_aux_loss",
    "total_loss",
]

MECHANISMS = ("phi", "st_moe", "loss_free", "none")
STATISTICS = ("probability", "frequency")

# EMA entries start at zero, where entropic gradients are undefined; the
# training path clamps them to this floor before computing prices.
_EMA_FLOOR = 1e-12
_ENTROPIC = {"neg_shannon", "tsallis", "renyi"}


@dataclass
class BalancerState:
    """Per-layer dual tracker and mechanism configuration.

    ``alpha`` is the loss coefficient (0 disables the penalty but keeps the
    EMA running), ``eta`` the EMA step size in (0, 1]. ``statistic`` selects
    what feeds the EMA: mean pre-top-k probabilities or realized per-token
    selection frequencies.
    """

    n_experts: int
    eta: float = 0.7
    alpha: float = 0.01
    mechanism: str = "phi"
    potential: PotentialSpec | None = None
    statistic: str = "probability"
    bias_step: float = 1e-3
    m: np.ndarray = field(init=False)
    bias: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}")
        if self.mechanism == "phi" and self.potential is None:
            raise ValueError("phi mechanism needs a potential spec")
        self.m = np.zeros(self.n_experts)
        if self.mechanism == "loss_free":
            self.bias = np.zeros(self.n_experts)

    # -- EMA ------------------------------------------------------------------

    def ema_update(self, stat: np.ndarray) -> None:
        """m <- (1 - eta) m + eta stat."""
        stat = np.asarray(stat, dtype=np.float64)
        if stat.shape != (self.n_experts,):
            raise ValueError(
                f"statistic shape {stat.shape} does not match {self.n_experts} experts"
            )
        self.m = (1.0 - self.eta) * self.m + self.eta * stat

    def pick_statistic(self, p_bar: np.ndarray, f_per_token: np.ndarray) -> np.ndarray:
        return p_bar if self.statistic == "probability" else f_per_token

    # -- auxiliary losses ------------------------------------------------------

    def price_vector(self) -> np.ndarray:
        """Potential gradient at the current EMA, floored for entropic domains."""
        m = self.m
        if self.potential.family in _ENTROPIC:
            m = np.maximum(m, _EMA_FLOOR)
        return aux_weight(self.potential, m)

    def phi_aux_loss(self, p_bar: Node) -> Node:
        """<p, w> with w = grad-potential(m) excluded from gradient flow.

        Call after ema_update for the same batch: prices come from the
        already-updated EMA.
        """
        return (p_bar * constant(self.price_vector())).sum()

    def aux_loss(self, p_bar: Node, f: np.ndarray) -> Node | None:
        """The mechanism's auxiliary loss for one batch, or None if it has none."""
        if self.mechanism == "phi":
            return self.phi_aux_loss(p_bar)
        if self.mechanism == "st_moe":
            return stmoe_aux_loss(f, p_bar)
        return None

    # -- loss-free bias --------------------------------------------------------

    def loss_free_step(self, f: np.ndarray) -> np.ndarray:
        """Nudge each expert's selection bias opposite its utilization error.

        b_e += u * sign(1/E - f_e); a balanced expert (sign 0) is left alone.
        The bias only steers top-k selection, never the routing weights, and
        never receives gradients.
        """
        if self.mechanism != "loss_free":
            raise ValueError("bias updates only apply to the loss_free mechanism")
        f = np.asarray(f, dtype=np.float64)
        self.bias += self.bias_step * np.sign(1.0 / self.n_experts - f)
        return self.bias

    # -- serialization -----------------------------------------------------------

    def to_snapshot(self) -> dict:
        snap: dict = {
            "m": self.m.tolist(),
            "eta": self.eta,
            "alpha": self.alpha,
            "statistic": self.statistic,
            "mechanism": (
                f"phi:{self.potential.token()}" if self.mechanism == "phi" else self.mechanism
            ),
        }
        if self.bias is not None:
            snap["b"] = self.bias.tolist()
            snap["u"] = self.bias_step
        return snap

    @classmethod
    def from_snapshot(cls, snap: dict) -> BalancerState:
        mechanism = snap["mechanism"]
        potential = None
        if mechanism.startswith("phi:"):
            potential = PotentialSpec.parse(mechanism[len("phi:"):])
            mechanism = "phi"
        state = cls(
            n_experts=len(snap["m"]),
            eta=snap["eta"],
            alpha=snap["alpha"],
            mechanism=mechanism,
            potential=potential,
            statistic=snap["statistic"],
            bias_step=snap.get("u", 1e-3),
        )
        state.m = np.asarray(snap["m"], dtype=np.float64)
        if "b" in snap:
            state.bias = np.asarray(snap["b"], dtype=np.float64)
        return state

    def to_json(self) -> str:
        return json.dumps(self.to_snapshot())

    @classmethod
    def from_json(cls, text: str) -> BalancerState:
        return cls.from_snapshot(json.loads(text))


def stmoe_aux_loss(f: np.ndarray, p_bar: Node) -> Node:
    """Dot product of realized frequencies with mean routing probabilities.

    The frequencies come from discrete top-k selections and are treated as
    constants; gradients reach only the probability side.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != p_bar.shape:
        raise ValueError(f"frequency shape {f.shape} != probability shape {p_bar.shape}")
    return (p_bar * constant(f)).sum()


def total_loss(task: Node, aux_losses: list[Node], alpha: float, n_experts: int) -> Node:
    """task + alpha * E * sum of per-layer auxiliary losses."""
    total = task
    for aux in aux_losses:
        total = total + aux.scale(alpha * n_experts)
    return total
