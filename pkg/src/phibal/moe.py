"""Toy sparse expert layer on the gradient engine.

A layer is a linear router over E experts plus E independent gated
feed-forward experts. Each token activates its top-k experts; their outputs
are combined with weights renormalized over the selected set. Non-selected
experts are never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, constant, index_select, matmul, parameter, softmax_rows

__all__ = ["RoutingBatch", "MoeLayer"]

# Added to non-selected logits before the renormalizing softmax; large enough
# that their probabilities underflow to exactly zero.
_MASK_VALUE = -1e30


@dataclass
class RoutingBatch:
    """Routing decisions for one batch of tokens.

    probs:      (T, E) pre-top-k softmax probabilities (gradient-carrying).
    p_bar:      (E,) column means of probs.
    weights:    (T, E) combination weights, exactly zero off the top-k.
    selections: (T, k) chosen expert indices, ascending by index per token.
    counts:     (E,) how many tokens selected each expert.
    """

    probs: Node
    p_bar: Node
    weights: Node
    selections: np.ndarray
    counts: np.ndarray
    top_k: int

    @property
    def n_tokens(self) -> int:
        return self.selections.shape[0]

    @property
    def f(self) -> np.ndarray:
        """Realized frequencies normalized by k*T (sums to 1)."""
        return self.counts / (self.top_k * self.n_tokens)

    @property
    def f_per_token(self) -> np.ndarray:
        """Realized frequencies normalized by T alone (sums to k)."""
        return self.counts / self.n_tokens


class MoeLayer:
    """Router + E gated feed-forward experts.

    Expert e computes W2 (silu(a) * b) where (a, b) are the halves of
    W1 u; W1 therefore has 2*ffn_dim rows (gate stream and value stream).
    """

    def __init__(
        self,
        n_experts: int,
        top_k: int,
        dim: int,
        ffn_dim: int,
        rng: np.random.Generator,
    ) -> None:
        if n_experts < 1:
            raise ValueError(f"need at least 1 expert, got {n_experts}")
        if not 1 <= top_k <= n_experts:
            raise ValueError(f"top_k={top_k} must lie in [1, {n_experts}]")
        self.n_experts = n_experts
        self.top_k = top_k
        self.dim = dim
        self.ffn_dim = ffn_dim
        self.w_router = parameter(rng.normal(0.0, dim**-0.5, size=(n_experts, dim)))
        self.w1 = [
            parameter(rng.normal(0.0, dim**-0.5, size=(2 * ffn_dim, dim)))
            for _ in range(n_experts)
        ]
        self.w2 = [
            parameter(rng.normal(0.0, ffn_dim**-0.5, size=(dim, ffn_dim)))
            for _ in range(n_experts)
        ]

    def parameters(self) -> list[Node]:
        return [self.w_router, *self.w1, *self.w2]

    # -- routing -------------------------------------------------------------

    def route(self, x: Node, bias: np.ndarray | None = None) -> RoutingBatch:
        """Pick top-k experts per token and build their combination weights.

        The optional bias (loss-free balancing) shifts logits for the top-k
        choice only; probabilities and weights always come from the unbiased
        logits. Ties break toward the lower expert index. For k=1 the weight
        is the pre-top-k probability of the chosen expert, so the router
        still receives a gradient.
        """
        logits = matmul(x, self.w_router.T)
        probs = softmax_rows(logits)
        n_tokens = x.shape[0]

        scores = logits.value if bias is None else logits.value + bias
        # Stable argsort on negated scores: equal scores keep ascending index.
        order = np.argsort(-scores, axis=1, kind="stable")
        selections = np.sort(order[:, : self.top_k], axis=1)
        counts = np.bincount(selections.ravel(), minlength=self.n_experts)

        chosen = np.zeros((n_tokens, self.n_experts), dtype=bool)
        np.put_along_axis(chosen, selections, True, axis=1)
        if self.top_k == 1:
            weights = probs * constant(chosen.astype(np.float64))
        else:
            mask = np.where(chosen, 0.0, _MASK_VALUE)
            weights = softmax_rows(logits + constant(mask))

        return RoutingBatch(
            probs=probs,
            p_bar=probs.mean(axis=0),
            weights=weights,
            selections=selections,
            counts=counts,
            top_k=self.top_k,
        )

    # -- experts -------------------------------------------------------------

    def expert_forward(self, e: int, u: Node) -> Node:
        """Run expert e on a (n, dim) slab of tokens."""
        h = matmul(u, self.w1[e].T)
        gate = index_select(h, np.arange(self.ffn_dim), axis=1)
        value = index_select(h, np.arange(self.ffn_dim, 2 * self.ffn_dim), axis=1)
        return matmul(gate.silu() * value, self.w2[e].T)

    def forward(self, x: Node, routing: RoutingBatch) -> Node:
        """Router-weighted sum of selected experts; skips empty experts."""
        n_tokens = x.shape[0]
        out: Node | None = None
        for e in range(self.n_experts):
            rows = np.flatnonzero((routing.selections == e).any(axis=1))
            if rows.size == 0:
                continue
            tokens = index_select(x, rows, axis=0)
            expert_out = self.expert_forward(e, tokens)
            w = index_select(
                index_select(routing.weights, rows, axis=0), [e], axis=1
            )
            # Scatter rows back to (T, dim) by multiplying with a constant
            # one-hot placement matrix; its transpose is the gather, so the
            # backward rule falls out of matmul.
            placement = np.zeros((n_tokens, rows.size))
            placement[rows, np.arange(rows.size)] = 1.0
            contribution = matmul(constant(placement), w * expert_out)
            out = contribution if out is None else out + contribution
        assert out is not None
        return out
