"""Temporal graph learning: per-snapshot relational message passing,
multi-layer aggregation, recurrent evolution, convolutional decoding, and
cross-entropy training over the snapshot sequence.

Conventions fixed here and relied on everywhere else:

* Inverse relations are appended (id r + |R|) before message passing, so
  subjects receive messages too; raw data is never touched.
* Recurrence: the message-passing input at step t is the evolved state
  from t-1 (the base embedding table before step 0); the per-step
  message-passing output E_t is what history windows expose, while the GRU
  output is what rolls forward.
* The activation is a randomized-slope rectifier: slopes drawn uniformly
  from [1/8, 1/3] per element in train mode, the fixed interval mean 11/48
  in eval mode, so evaluation is deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import torch
import torch.nn.functional as F

from . import checkpoint
from .data import Fact, TemporalKG
from .numcore import DTYPE, EvaluationError, ParamSet

log = logging.getLogger(__name__)

RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0
RRELU_EVAL_SLOPE = (RRELU_LOWER + RRELU_UPPER) / 2.0  # 11/48


@dataclass
class GraphModelConfig:
    num_entities: int
    num_relations: int
    dim: int = 16
    layers: int = 2
    window: int = 5
    decoder_channels: int = 32
    kernel_width: int = 3
    norm: str = "snapshot"  # or "indegree"
    lr: float = 0.1
    epochs: int = 30
    seed: int = 0
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.dim <= 0 or self.layers < 1:
            raise ValueError("dim must be positive and layers >= 1")
        if self.kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd for same padding")
        if self.norm not in ("snapshot", "indegree"):
            raise ValueError("norm must be 'snapshot' or 'indegree'")

    @property
    def num_aug_relations(self) -> int:
        return 2 * self.num_relations

    def to_meta(self) -> dict[str, str]:
        return {
            "num_entities": str(self.num_entities),
            "num_relations": str(self.num_relations),
            "dim": str(self.dim),
            "layers": str(self.layers),
            "window": str(self.window),
            "decoder_channels": str(self.decoder_channels),
            "kernel_width": str(self.kernel_width),
            "norm": self.norm,
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "GraphModelConfig":
        return GraphModelConfig(
            num_entities=int(meta["num_entities"]),
            num_relations=int(meta["num_relations"]),
            dim=int(meta["dim"]),
            layers=int(meta["layers"]),
            window=int(meta["window"]),
            decoder_channels=int(meta["decoder_channels"]),
            kernel_width=int(meta["kernel_width"]),
            norm=meta["norm"],
        )


GRU_NAMES = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


def init_params(cfg: GraphModelConfig, seed: int | None = None) -> ParamSet:
    """Seeded parameter initialization; canonical name order matters."""
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)

    def randn(*shape, scale):
        return torch.randn(*shape, generator=gen, dtype=DTYPE) * scale

    d = cfg.dim
    c, w = cfg.decoder_channels, cfg.kernel_width
    params = ParamSet()
    params.add("entity_embed", randn(cfg.num_entities, d, scale=1.0 / math.sqrt(d)))
    params.add("rel_embed", randn(cfg.num_aug_relations, d, scale=1.0 / math.sqrt(d)))
    for layer in range(cfg.layers):
        params.add(f"rgcn.{layer}.w1", randn(d, d, scale=1.0 / math.sqrt(d)))
        params.add(f"rgcn.{layer}.w2", randn(d, d, scale=1.0 / math.sqrt(d)))
    for name in GRU_NAMES:
        if name.startswith("b"):
            params.add(f"gru.{name}", torch.zeros(d, dtype=DTYPE))
        else:
            params.add(f"gru.{name}", randn(d, d, scale=1.0 / math.sqrt(d)))
    params.add("dec.kernels", randn(c, 2, w, scale=1.0 / math.sqrt(2 * w)))
    params.add("dec.kernel_bias", torch.zeros(c, dtype=DTYPE))
    params.add("dec.proj", randn(c * d, d, scale=1.0 / math.sqrt(c * d)))
    params.add("dec.proj_bias", torch.zeros(d, dtype=DTYPE))
    return params


def augment_with_inverse(facts: Iterable[Fact], num_relations: int) -> list[Fact]:
    """Original facts plus (o, r + |R|, s, t) so subjects get messages."""
    out = list(facts)
    out.extend(
        Fact(f.object, f.relation + num_relations, f.subject, f.timestamp)
        for f in list(out)
    )
    return out


def rrelu(x: torch.Tensor, mode: str, gen: torch.Generator | None) -> torch.Tensor:
    if mode == "train":
        if gen is None:
            raise ValueError("train mode needs a seeded generator")
        slope = RRELU_LOWER + (RRELU_UPPER - RRELU_LOWER) * torch.rand(
            x.shape, generator=gen, dtype=DTYPE
        )
    else:
        slope = torch.as_tensor(RRELU_EVAL_SLOPE, dtype=DTYPE)
    return torch.where(x >= 0, x, slope * x)


def rgcn_layer(
    facts: list[Fact],
    e_in: torch.Tensor,
    rel: torch.Tensor,
    w1: torch.Tensor,
    w2: torch.Tensor,
    mode: str = "eval",
    gen: torch.Generator | None = None,
    norm: str = "snapshot",
) -> torch.Tensor:
    """One round of relation-aware message passing into the object slot.

    ``facts`` must already carry inverse edges. Messages W1 (e_s + r) are
    summed per object and normalized by the snapshot size (or in-degree),
    then combined with the self-transform W2 e_o and rectified. Entities
    with no incoming message keep only the self-transform.
    """
    pre = e_in @ w2.T
    if facts:
        s_idx = torch.tensor([f.subject for f in facts], dtype=torch.long)
        r_idx = torch.tensor([f.relation for f in facts], dtype=torch.long)
        o_idx = torch.tensor([f.object for f in facts], dtype=torch.long)
        msg = (e_in[s_idx] + rel[r_idx]) @ w1.T
        agg = torch.zeros_like(e_in).index_add(0, o_idx, msg)
        if norm == "snapshot":
            agg = agg / len(facts)
        else:
            indeg = torch.zeros(e_in.shape[0], dtype=DTYPE).index_add(
                0, o_idx, torch.ones(len(facts), dtype=DTYPE)
            )
            agg = agg / indeg.clamp(min=1.0).unsqueeze(1)
        pre = pre + agg
    return rrelu(pre, mode, gen)


def multi_layer_embed(
    facts: list[Fact],
    e_in: torch.Tensor,
    params: ParamSet,
    cfg: GraphModelConfig,
    mode: str = "eval",
    gen: torch.Generator | None = None,
    stats: dict | None = None,
) -> torch.Tensor:
    """Sum of the layer-0 input and every propagation layer's output."""
    total = e_in
    current = e_in
    addends = 1
    rel = params["rel_embed"]
    for layer in range(cfg.layers):
        current = rgcn_layer(
            facts,
            current,
            rel,
            params[f"rgcn.{layer}.w1"],
            params[f"rgcn.{layer}.w2"],
            mode,
            gen,
            cfg.norm,
        )
        total = total + current
        addends += 1
    if stats is not None:
        stats["addends"] = addends
    return total


def gru_evolve(e_t: torch.Tensor, h_prev: torch.Tensor, params: ParamSet) -> torch.Tensor:
    """Row-wise GRU step: input e_t, hidden h_prev."""
    x, h = e_t, h_prev
    z = torch.sigmoid(x @ params["gru.wz"].T + h @ params["gru.uz"].T + params["gru.bz"])
    r = torch.sigmoid(x @ params["gru.wr"].T + h @ params["gru.ur"].T + params["gru.br"])
    h_tilde = torch.tanh(
        x @ params["gru.wh"].T + (r * h) @ params["gru.uh"].T + params["gru.bh"]
    )
    return (1.0 - z) * h + z * h_tilde


def decode_hidden(
    e_s: torch.Tensor, r: torch.Tensor, params: ParamSet
) -> torch.Tensor:
    """Convolutional decoder trunk: (B, d) query vectors from (e_s, r) pairs."""
    single = e_s.dim() == 1
    if single:
        e_s, r = e_s.unsqueeze(0), r.unsqueeze(0)
    x = torch.stack([e_s, r], dim=1)  # (B, 2, d)
    kernels = params["dec.kernels"]
    pad = kernels.shape[-1] // 2
    conv = F.conv1d(x, kernels, bias=params["dec.kernel_bias"], padding=pad)
    h = torch.relu(conv).reshape(x.shape[0], -1) @ params["dec.proj"]
    h = torch.relu(h + params["dec.proj_bias"])
    return h[0] if single else h


def decode_scores(
    e_s: torch.Tensor,
    r: torch.Tensor,
    all_e: torch.Tensor,
    params: ParamSet,
) -> torch.Tensor:
    """Logits over every entity row for one (subject, relation) query."""
    return decode_hidden(e_s, r, params) @ all_e.T


def roll_states(
    params: ParamSet,
    cfg: GraphModelConfig,
    kg: TemporalKG,
    t_end: int,
    mode: str = "eval",
    gen: torch.Generator | None = None,
    start: int = 0,
    h_init: torch.Tensor | None = None,
    collect_from: int | None = None,
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Run the recurrence over integer steps [start, t_end].

    Returns the evolved state after t_end and, when ``collect_from`` is
    set, the raw message-passing outputs E_t for t >= collect_from.
    """
    h = params["entity_embed"] if h_init is None else h_init
    collected: dict[int, torch.Tensor] = {}
    for t in range(start, t_end + 1):
        facts = augment_with_inverse(kg.snapshot(t), cfg.num_relations)
        e_t = multi_layer_embed(facts, h, params, cfg, mode, gen)
        if collect_from is not None and t >= collect_from:
            collected[t] = e_t
        h = gru_evolve(e_t, h, params)
    return h, collected


def loss_timestep(
    kg: TemporalKG,
    t: int,
    params: ParamSet,
    cfg: GraphModelConfig,
    mode: str = "eval",
    gen: torch.Generator | None = None,
    warmup: int | None = None,
) -> torch.Tensor:
    """Mean cross-entropy of the facts at t+1 decoded from the state at t.

    The recurrence runs from the epoch (or the last ``warmup`` steps when
    given, with the base embeddings standing in as the state at the window
    start). Facts are decoded in both directions via inverse relations.
    """
    start = 0 if warmup is None else max(0, t - warmup)
    h, _ = roll_states(params, cfg, kg, t, mode, gen, start=start)
    targets = augment_with_inverse(kg.snapshot(t + 1), cfg.num_relations)
    if not targets:
        return torch.zeros((), dtype=DTYPE)
    return _facts_loss(targets, h, params)


def _facts_loss(facts: list[Fact], states: torch.Tensor, params: ParamSet) -> torch.Tensor:
    s_idx = torch.tensor([f.subject for f in facts], dtype=torch.long)
    r_idx = torch.tensor([f.relation for f in facts], dtype=torch.long)
    o_idx = torch.tensor([f.object for f in facts], dtype=torch.long)
    hidden = decode_hidden(states[s_idx], params["rel_embed"][r_idx], params)
    logits = hidden @ states.T
    return F.cross_entropy(logits, o_idx)


def train_graph_model(
    kg: TemporalKG, cfg: GraphModelConfig
) -> tuple[ParamSet, list[float]]:
    """Gradient-descent training over timesteps in order.

    Backpropagation is truncated every cfg.window steps: the accumulated
    window loss is stepped with plain SGD (global-norm clipping) and the
    recurrent state detached. Deterministic given cfg.seed.
    """
    params = init_params(cfg)
    for tensor in params.tensors():
        tensor.requires_grad_(True)
    opt = torch.optim.SGD(params.tensors(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    max_t = kg.max_timestamp
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        h = params["entity_embed"]
        window_losses: list[torch.Tensor] = []
        epoch_total, epoch_count = 0.0, 0

        def flush(state: torch.Tensor) -> torch.Tensor:
            nonlocal window_losses
            if window_losses:
                loss = torch.stack(window_losses).mean()
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params.tensors(), cfg.clip_norm)
                opt.step()
                window_losses = []
            return state.detach()

        for t in range(max_t):
            facts = augment_with_inverse(kg.snapshot(t), cfg.num_relations)
            e_t = multi_layer_embed(facts, h, params, cfg, "train", gen)
            h = gru_evolve(e_t, h, params)
            targets = augment_with_inverse(kg.snapshot(t + 1), cfg.num_relations)
            if targets:
                loss = _facts_loss(targets, h, params)
                if not torch.isfinite(loss):
                    raise EvaluationError(
                        f"training diverged: non-finite loss at epoch {epoch}, step {t}"
                    )
                window_losses.append(loss)
                epoch_total += float(loss.detach())
                epoch_count += 1
            if cfg.window == 0 or (t + 1) % max(cfg.window, 1) == 0:
                h = flush(h)
        flush(h)
        epoch_losses.append(epoch_total / max(epoch_count, 1))
        log.info("graph model epoch %d: mean loss %.4f", epoch, epoch_losses[-1])
    frozen = ParamSet((n, t.detach().clone()) for n, t in params.items())
    return frozen, epoch_losses


@dataclass
class HistoryWindow:
    """The T+1 most recent message-passing outputs ending at anchor t."""

    t: int
    length: int  # T
    entity_snapshots: list[torch.Tensor]  # E_{t-T} .. E_t, each (|E|, d)
    relations: torch.Tensor  # (2|R|, d)

    def __post_init__(self):
        if len(self.entity_snapshots) != self.length + 1:
            raise ValueError("window must hold exactly T+1 snapshots")

    def entity_track(self, entity: int) -> list[torch.Tensor]:
        return [snap[entity] for snap in self.entity_snapshots]


def history_embeddings(
    params: ParamSet, cfg: GraphModelConfig, kg: TemporalKG, t: int, window: int
) -> HistoryWindow:
    """Roll the recurrence from the epoch and expose E_{t-T}..E_t plus R."""
    if t < window:
        raise ValueError(
            f"window of length {window} needs t >= {window}, got t={t}; "
            "use a shorter window"
        )
    _, collected = roll_states(
        params, cfg, kg, t, mode="eval", collect_from=t - window
    )
    snaps = [collected[step].detach() for step in range(t - window, t + 1)]
    return HistoryWindow(
        t=t,
        length=window,
        entity_snapshots=snaps,
        relations=params["rel_embed"].detach(),
    )


class HistoryProvider:
    """Single eval-mode roll over a frozen model, serving windows per anchor."""

    def __init__(self, params: ParamSet, cfg: GraphModelConfig, kg: TemporalKG, t_max: int):
        self.cfg = cfg
        self.t_max = t_max
        final_state, collected = roll_states(
            params, cfg, kg, t_max, mode="eval", collect_from=0
        )
        self._snapshots = [collected[t].detach() for t in range(t_max + 1)]
        self._states: dict[int, torch.Tensor] = {t_max: final_state.detach()}
        self.relations = params["rel_embed"].detach()
        self._params = params
        self._kg = kg

    def window(self, t: int, length: int) -> HistoryWindow:
        if t < length:
            raise ValueError(
                f"window of length {length} needs t >= {length}, got t={t}"
            )
        if t > self.t_max:
            raise ValueError(f"anchor {t} beyond provider horizon {self.t_max}")
        return HistoryWindow(
            t=t,
            length=length,
            entity_snapshots=self._snapshots[t - length : t + 1],
            relations=self.relations,
        )

    def evolved_state(self, t: int) -> torch.Tensor:
        """GRU state after step t (used by the graph-only evaluation path)."""
        if t not in self._states:
            state, _ = roll_states(self._params, self.cfg, self._kg, t, mode="eval")
            self._states[t] = state.detach()
        return self._states[t]


def save_graph_model(path, params: ParamSet, cfg: GraphModelConfig) -> None:
    checkpoint.save(path, params, meta={"kind": "graph_model", **cfg.to_meta()})


def load_graph_model(path) -> tuple[ParamSet, GraphModelConfig]:
    params, meta = checkpoint.load(path)
    if meta.get("kind") != "graph_model":
        raise checkpoint.CheckpointError(f"{path}: not a graph model checkpoint")
    return params, GraphModelConfig.from_meta(meta)
