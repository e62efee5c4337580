"""The CDRNP network expressed as tape operations.

Shapes, with d the user-embedding width:

* users ``d``, source and target items ``d*d``
* x_m = [Resize(c_u) u || v_t] has width ``d + d*d``
* set encoders take [x_m || y] (width ``d + d*d + 1``) to ``d``
* the decoder takes [x_m || z] and is modulated by the remainer output h
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractError, Node, Parameter, Tape
from .config import TrainingConfig
from .tasks import RatingExample, Task

LOG_SIGMA_BOUND = 10.0
# gamma starts at tanh(1) ~ 0.76 so an untrained decoder is not silenced
FILM_GAMMA_BIAS = 1.0


class ModelParams:
    """Ordered collection of every trainable tensor, addressed by name."""

    def __init__(self, params: Sequence[Parameter], d: int, hidden: int, depth: int):
        self._params: Dict[str, Parameter] = {}
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter {p.name}")
            self._params[p.name] = p
        self.d = d
        self.hidden = hidden
        self.depth = depth

    @classmethod
    def init(cls, cfg: TrainingConfig, n_users: int, n_src_items: int, n_tgt_items: int,
             rng: np.random.Generator) -> "ModelParams":
        d, hid, L = cfg.d, cfg.hidden, cfg.decoder_depth
        dx = d + d * d
        std = cfg.init_std
        specs: List[Tuple[str, tuple, bool]] = [
            ("user_emb", (n_users, d), False),
            ("src_item_emb", (n_src_items, d * d), False),
            ("tgt_item_emb", (n_tgt_items, d * d), False),
            ("attn_q", (d,), False),
            ("attn_W", (d, d * d), False),
        ]
        for mlp in ("enc", "rem"):
            widths = [dx + 1, hid, hid, d]
            for k in range(3):
                specs.append((f"{mlp}.W{k}", (widths[k + 1], widths[k]), False))
                specs.append((f"{mlp}.b{k}", (widths[k + 1],), True))
        specs += [("head_Wr", (d, d), False), ("head_Wmu", (d, d), False), ("head_Wsigma", (d, d), False)]
        width_in = dx + d
        for l in range(L):
            specs.append((f"dec.W{l}", (hid, width_in), False))
            specs.append((f"dec.b{l}", (hid,), True))
            specs.append((f"film.Wgamma{l}", (hid, d), False))
            specs.append((f"film.Wbeta{l}", (hid, d), False))
            specs.append((f"film.bgamma{l}", (hid,), True))
            specs.append((f"film.bbeta{l}", (hid,), True))
            width_in = hid
        specs += [("out.W", (1, hid), False), ("out.b", (1,), True)]
        specs += [
            ("aux.W0", (hid, 2 * d), False),
            ("aux.b0", (hid,), True),
            ("aux.W1", (1, hid), False),
            ("aux.b1", (1,), True),
        ]
        params = [
            Parameter(name, np.zeros(shape) if is_bias else rng.normal(0.0, std, size=shape))
            for name, shape, is_bias in specs
        ]
        for p in params:
            if p.name.startswith("film.bgamma"):
                p.value[...] = FILM_GAMMA_BIAS
        return cls(params, d, hid, L)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams([Parameter(p.name, p.value.copy()) for p in self], self.d, self.hidden, self.depth)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self:
            h.update(p.name.encode())
            h.update(p.value.tobytes())
        return h.hexdigest()


@dataclass
class GaussianLatent:
    mu: Node
    log_sigma: Node


@dataclass
class TaskLatents:
    prior: GaussianLatent
    posterior: Optional[GaussianLatent]
    z: Node
    h: Optional[Node]
    epsilon: np.ndarray


def _mlp(tape: Tape, params: ModelParams, prefix: str, x: Node, layers: int = 3) -> Node:
    for k in range(layers):
        x = tape.linear(params[f"{prefix}.W{k}"], x, params[f"{prefix}.b{k}"])
        if k < layers - 1:
            x = tape.relu(x)
    return x


def _flatten_histories(examples: Sequence[RatingExample]):
    lengths = np.array([len(e.history) for e in examples], dtype=np.intp)
    if len(examples) == 0 or lengths.min() < 1:
        raise ContractError("every example needs a non-empty source history")
    items = np.concatenate([e.history for e in examples])
    seg = np.repeat(np.arange(len(examples)), lengths)
    return items, seg, lengths


def attention_weights(tape: Tape, history_embs: Node, segments, n_segments: int, params: ModelParams) -> Node:
    """Softmax over q . relu(W_a v) within each history segment."""
    if history_embs.shape[0] == 0:
        raise ContractError("attention needs at least one history item")
    hidden = tape.relu(tape.linear(params["attn_W"], history_embs))
    q = tape.reshape(params["attn_q"], (1, params.d))
    scores = tape.reshape(tape.linear(q, hidden), (hidden.shape[0],))
    return tape.segment_softmax(scores, segments, n_segments)


def embed_characteristic(tape: Tape, examples: Sequence[RatingExample], params: ModelParams,
                         ablate_acp: bool = False) -> Node:
    """Rows x_m = [Resize(c_u) u || v_t] for a batch of examples, shape (B, d + d*d)."""
    d = params.d
    B = len(examples)
    items, seg, lengths = _flatten_histories(examples)
    V = tape.take(params["src_item_emb"], items)
    if ablate_acp:
        w = tape.const(1.0 / lengths[seg])
    else:
        w = attention_weights(tape, V, seg, B, params)
    c = tape.segment_sum(tape.scale_rows(V, w), seg, B)
    users = np.array([e.user for e in examples], dtype=np.intp)
    u = tape.take(params["user_emb"], users)
    u_hat = tape.batched_matvec(tape.reshape(c, (B, d, d)), u)
    cands = np.array([e.candidate_item for e in examples], dtype=np.intp)
    vt = tape.take(params["tgt_item_emb"], cands)
    return tape.concat([u_hat, vt])


def _with_ratings(tape: Tape, x: Node, ratings) -> Node:
    y = np.asarray(ratings, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != x.shape[0]:
        raise ContractError("one rating per example is required")
    return tape.concat([x, tape.const(y)])


def encode_latent(tape: Tape, x: Node, ratings, params: ModelParams) -> GaussianLatent:
    if x.shape[0] == 0:
        raise ContractError("cannot encode an empty set")
    r = _mlp(tape, params, "enc", _with_ratings(tape, x, ratings))
    r_bar = tape.mean_rows(r)
    r_hat = tape.relu(tape.linear(params["head_Wr"], r_bar))
    mu = tape.linear(params["head_Wmu"], r_hat)
    log_sigma = tape.clamp(tape.linear(params["head_Wsigma"], r_hat), -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
    return GaussianLatent(mu, log_sigma)


def encode_remainer(tape: Tape, x: Node, ratings, params: ModelParams) -> Node:
    if x.shape[0] == 0:
        raise ContractError("cannot encode an empty support set")
    return tape.mean_rows(_mlp(tape, params, "rem", _with_ratings(tape, x, ratings)))


def sample_latent(tape: Tape, g: GaussianLatent, rng: Optional[np.random.Generator] = None,
                  mode: str = "sample", epsilon: Optional[np.ndarray] = None):
    """Reparameterised draw z = mu + eps * exp(log_sigma); returns (z, eps)."""
    d = g.mu.shape[0]
    if mode == "mean":
        return g.mu, np.zeros(d)
    if mode != "sample":
        raise ValueError(f"unknown latent mode {mode!r}")
    if epsilon is None:
        epsilon = rng.standard_normal(d)
    eps = np.asarray(epsilon, dtype=np.float64)
    z = tape.add(g.mu, tape.mul(tape.const(eps), tape.exp(g.log_sigma)))
    return z, eps


def decode_rating(tape: Tape, x: Node, z: Node, h: Optional[Node], params: ModelParams,
                  ablate_prm: bool = False) -> Node:
    """FiLM-modulated MLP over [x_m || z]; returns predictions of shape (B,)."""
    B = x.shape[0]
    g = tape.concat([x, tape.tile_rows(z, B)])
    for l in range(params.depth):
        pre = tape.linear(params[f"dec.W{l}"], g, params[f"dec.b{l}"])
        if not ablate_prm:
            gamma = tape.tanh(tape.linear(params[f"film.Wgamma{l}"], h, params[f"film.bgamma{l}"]))
            beta = tape.tanh(tape.linear(params[f"film.Wbeta{l}"], h, params[f"film.bbeta{l}"]))
            pre = tape.add(tape.mul(tape.tile_rows(gamma, B), pre), tape.tile_rows(beta, B))
        g = tape.relu(pre)
    out = tape.linear(params["out.W"], g, params["out.b"])
    return tape.reshape(out, (B,))


def forward_task(tape: Tape, task: Task, params: ModelParams, phase: str,
                 rng: Optional[np.random.Generator], cfg: TrainingConfig,
                 epsilon: Optional[np.ndarray] = None):
    """Predict every query example of ``task``; returns (predictions node, TaskLatents).

    Training: z comes from q(z | query) and the posterior is returned for the
    KL term. Testing: only the support set is encoded and query ratings are
    stripped before the model sees the examples.
    """
    if task.phase != phase:
        raise ContractError(f"{task.phase} task passed to a {phase} forward pass")
    support = task.support
    if phase == "testing":
        query = [e.hidden() for e in task.query]
    elif phase == "training":
        query = task.query
    else:
        raise ValueError(f"unknown phase {phase!r}")
    y_support = [e.rating for e in support]
    if any(y is None for y in y_support):
        raise ContractError("support examples must carry ratings")

    x_c = embed_characteristic(tape, support, params, cfg.ablate_acp)
    x_q = embed_characteristic(tape, query, params, cfg.ablate_acp)
    prior = encode_latent(tape, x_c, y_support, params)
    h = None if cfg.ablate_prm else encode_remainer(tape, x_c, y_support, params)

    if phase == "training":
        posterior = encode_latent(tape, x_q, [e.rating for e in query], params)
        z, eps = sample_latent(tape, posterior, rng, "sample", epsilon)
    else:
        assert all(e.rating is None for e in query), "query ratings leaked into a testing pass"
        posterior = None
        z, eps = sample_latent(tape, prior, rng, cfg.test_latent_mode, epsilon)
    preds = decode_rating(tape, x_q, z, h, params, cfg.ablate_prm)
    return preds, TaskLatents(prior, posterior, z, h, eps)


def predict(task: Task, params: ModelParams, cfg: TrainingConfig,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Testing-phase predictions for a task as a plain array."""
    tape = Tape()
    preds, _ = forward_task(tape, task, params, "testing", rng, cfg)
    return preds.value.copy()
