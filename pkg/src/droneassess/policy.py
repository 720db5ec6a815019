"""Attention encoder-decoder policy over transformed road networks.

Row layout of the embedding matrix: row 0 is the depot token, built from the
global problem parameters ``(x_o, y_o, K, p_max, Q)``; row ``j + 1`` is node
``j`` built from ``(x_j, y_j, c_j)``.  The depot's own node row is kept for
attention in the encoder but is never selectable: choosing the depot means
choosing row 0.

Distributions handed to callers are indexed by node (length ``node_count``),
so greedy ties resolve to the lowest node index.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .baselines import Solution, actions_to_routes
from .batchenv import BatchEnv
from .env import EnvState, InfeasibleAction, evaluate_route_set, start_nodes
from .instgen import ProblemInstance

CHECKPOINT_MAGIC = b"DRASCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    layers: int = 6
    heads: int = 8
    ffn: int = 512
    clip: float = 10.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.layers < 0 or self.heads < 1 or self.ffn < 1:
            raise ValueError("model sizes must be positive")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.clip <= 0:
            raise ValueError("clip must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class InstanceNorm(nn.Module):
    """Per-instance, per-feature normalization across the node axis."""

    def __init__(self, d: int, eps: float):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d, bias=False)

    def split(self, x):
        B, N, d = x.shape
        return x.view(B, N, self.heads, d // self.heads).transpose(1, 2)

    def attend(self, q, k, v, mask=None):
        """``q``: (B, h, P, dk); ``k, v``: (B, h, N, dk); ``mask``: (B, P, N) bool of allowed keys."""
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        B, h, P, dk = attn.shape
        return self.out(attn.transpose(1, 2).reshape(B, P, h * dk))

    def forward(self, x):
        return self.attend(self.split(self.q(x)), self.split(self.k(x)), self.split(self.v(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mha = MultiHeadAttention(cfg.d, cfg.heads)
        self.norm1 = InstanceNorm(cfg.d, cfg.norm_eps)
        self.ff = nn.Sequential(nn.Linear(cfg.d, cfg.ffn), nn.ReLU(), nn.Linear(cfg.ffn, cfg.d))
        self.norm2 = InstanceNorm(cfg.d, cfg.norm_eps)

    def forward(self, h):
        h = self.norm1(h + self.mha(h))
        return self.norm2(h + self.ff(h))


@dataclass
class DecoderCache:
    embeddings: torch.Tensor   # (B, n+1, d)
    keys: torch.Tensor         # (B, h, n+1, dk)
    values: torch.Tensor       # (B, h, n+1, dk)
    logit_keys: torch.Tensor   # (B, n+1, d)
    depot: torch.Tensor        # (B,)


@dataclass
class ActionDistribution:
    probs: torch.Tensor
    log_probs: torch.Tensor
    mask: torch.Tensor


class AttentionPolicy(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        if seed is not None:
            state = torch.random.get_rng_state()
            torch.manual_seed(seed)
        self.node_embed = nn.Linear(3, cfg.d)
        self.depot_embed = nn.Linear(5, cfg.d)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.context = nn.Linear(cfg.d + 2, cfg.d)
        self.decoder_mha = MultiHeadAttention(cfg.d, cfg.heads)
        self.logit_q = nn.Linear(cfg.d, cfg.d, bias=False)
        self.logit_k = nn.Linear(cfg.d, cfg.d, bias=False)
        if seed is not None:
            torch.random.set_rng_state(state)

    @property
    def dtype(self):
        return self.node_embed.weight.dtype

    # -- encoder ------------------------------------------------------------
    def encode_features(self, nodes: torch.Tensor, depot: torch.Tensor, all_layers: bool = False):
        """``nodes``: (B, n, 3); ``depot``: (B, 5).  Returns (B, n+1, d) or every layer's output."""
        if nodes.ndim != 3 or nodes.shape[-1] != 3 or depot.shape != (nodes.shape[0], 5):
            raise ValueError(f"bad feature shapes {tuple(nodes.shape)} / {tuple(depot.shape)}")
        h = torch.cat([self.depot_embed(depot)[:, None], self.node_embed(nodes)], dim=1)
        out = [h]
        for layer in self.layers:
            h = layer(h)
            out.append(h)
        return out if all_layers else h

    def precompute(self, h: torch.Tensor, depot: torch.Tensor) -> DecoderCache:
        mha = self.decoder_mha
        return DecoderCache(h, mha.split(mha.k(h)), mha.split(mha.v(h)), self.logit_k(h), depot)

    # -- decoder ------------------------------------------------------------
    def row_logits(self, cache: DecoderCache, prev_rows, d_t, k_t, row_mask):
        """Clipped, masked compatibilities over embedding rows: (B, P, n+1)."""
        h = cache.embeddings
        B, P = prev_rows.shape
        prev = h.gather(1, prev_rows[..., None].expand(B, P, h.shape[-1]))
        ctx = torch.cat([prev, d_t[..., None].to(h.dtype), k_t[..., None].to(h.dtype)], dim=-1)
        mha = self.decoder_mha
        glimpse = mha.attend(mha.split(self.context(ctx)), cache.keys, cache.values, row_mask)
        u = (self.logit_q(glimpse) @ cache.logit_keys.transpose(-1, -2)) / math.sqrt(h.shape[-1])
        logits = self.cfg.clip * torch.tanh(u)
        return logits.masked_fill(~row_mask, float("-inf"))

    def node_log_probs(self, cache: DecoderCache, prev_rows, d_t, k_t, node_mask):
        """Log-probabilities over node indices: (B, P, n)."""
        if not node_mask.any(-1).all():
            raise ValueError("all actions are masked")
        row_mask = nodes_to_rows(node_mask, cache.depot)
        logits = self.row_logits(cache, prev_rows, d_t, k_t, row_mask)
        return rows_to_nodes(torch.log_softmax(logits, dim=-1), cache.depot)


def nodes_to_rows(node_tensor, depot):
    """Node-indexed (B, P, n) -> row-indexed (B, P, n+1); the depot's node row is masked out."""
    B, P, n = node_tensor.shape
    o = depot[:, None, None].expand(B, P, 1)
    head = node_tensor.gather(2, o)
    rows = torch.cat([head, node_tensor], dim=2)
    return rows.scatter(2, o + 1, torch.zeros_like(head))


def rows_to_nodes(row_tensor, depot):
    B, P, _ = row_tensor.shape
    o = depot[:, None, None].expand(B, P, 1)
    nodes = row_tensor[..., 1:]
    return nodes.scatter(2, o, row_tensor[..., :1])


def node_rows(nodes, depot):
    """Embedding row of each node index (the depot maps to row 0)."""
    return torch.where(nodes == depot[:, None], torch.zeros_like(nodes), nodes + 1)


def instance_features(instances: list[ProblemInstance], dtype=torch.float32):
    nodes = torch.stack([
        torch.from_numpy(np.column_stack([i.network.coords, i.network.value])) for i in instances
    ]).to(dtype)
    depot = torch.tensor([
        [*i.network.coords[i.depot], i.K, i.p_max, i.Q] for i in instances
    ], dtype=dtype)
    return nodes, depot


def parameter_count(policy: nn.Module) -> int:
    return sum(p.numel() for p in policy.parameters())


# -- functional API ------------------------------------------------------------

def encode(policy: AttentionPolicy, inst: ProblemInstance) -> torch.Tensor:
    nodes, depot = instance_features([inst], policy.dtype)
    return policy.encode_features(nodes, depot)[0]


def decode_step(policy: AttentionPolicy, embeddings: torch.Tensor, state: EnvState,
                mask: np.ndarray) -> ActionDistribution:
    """Action distribution for a single environment state."""
    mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))[None, None]
    if not mask_t.any():
        raise ValueError("all actions are masked")
    depot = torch.tensor([state.instance.depot])
    cache = policy.precompute(embeddings[None], depot)
    prev = node_rows(torch.tensor([[state.current]]), depot)
    logp = policy.node_log_probs(cache, prev, torch.tensor([[state.d]]), torch.tensor([[float(state.k)]]),
                                 mask_t)[0, 0]
    return ActionDistribution(logp.exp(), logp, mask_t[0, 0])


@dataclass
class BatchRollout:
    env: BatchEnv
    log_probs: torch.Tensor   # (B, P), differentiable when grad is enabled
    values: torch.Tensor      # (B, P) float64

    def routes(self, b: int, p: int) -> list[list[int]]:
        inst = self.env.instances[b]
        return actions_to_routes(inst.depot, self.env.episode_actions(b, p))


def padded_starts(instances: list[ProblemInstance], limit: int | None = None):
    """Multi-start table (B, P): each row cycles through that instance's start nodes.

    Returns ``None`` when some instance has no start node (unforced rollouts).
    """
    sets = [start_nodes(inst) for inst in instances]
    if any(not s for s in sets):
        return None
    P = max(len(s) for s in sets)
    if limit is not None:
        P = min(P, limit)
    return torch.tensor([[s[j % len(s)] for j in range(P)] for s in sets], dtype=torch.long)


def rollout_batch(policy: AttentionPolicy, instances: list[ProblemInstance], mode: str = "greedy",
                  starts: torch.Tensor | None = None, pomo: int | None = None,
                  generator: torch.Generator | None = None, max_steps: int | None = None) -> BatchRollout:
    """Run ``P`` episodes per instance in lock step; ``starts`` (B, P) forces the first node."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    P = starts.shape[1] if starts is not None else (pomo or 1)
    env = BatchEnv(instances, P, starts)
    nodes, depot_feats = instance_features(instances, policy.dtype)
    cache = policy.precompute(policy.encode_features(nodes, depot_feats), env.depot)
    total = torch.zeros(env.B, P, dtype=policy.dtype)
    limit = max_steps or 4 * env.n * int(env.K.max()) + 16
    while not env.all_done():
        if env.t >= limit:
            raise RuntimeError("rollout exceeded its step limit")
        mask = env.mask()
        logp = policy.node_log_probs(cache, node_rows(env.current, env.depot), env.d, env.k.to(torch.float64), mask)
        if mode == "greedy":
            action = logp.argmax(-1)
        else:
            flat = logp.detach().exp().reshape(-1, env.n)
            action = torch.multinomial(flat, 1, generator=generator).view(env.B, P)
        chosen = logp.gather(2, action[..., None]).squeeze(2)
        total = total + torch.where(env.done, torch.zeros_like(chosen), chosen)
        env.step(action)
    return BatchRollout(env, total, env.value.clone())


def rollout(policy: AttentionPolicy, inst: ProblemInstance, mode: str = "greedy",
            starts: list[int] | None = None, rng: int | torch.Generator | None = None
            ) -> list[tuple[Solution, float]]:
    """One episode per forced start (or a single unforced episode when ``starts`` is empty)."""
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    valid = set(start_nodes(inst))
    for s in starts or []:
        if s not in valid:
            raise ValueError(f"invalid forced first node {s}")
    start_t = torch.tensor([list(starts)], dtype=torch.long) if starts else None
    t0 = time.perf_counter()
    with torch.no_grad():
        res = rollout_batch(policy, [inst], mode, start_t, generator=rng)
    seconds = time.perf_counter() - t0
    out = []
    for p in range(res.env.P):
        routes = res.routes(0, p)
        report = evaluate_route_set(inst, routes)
        if not report.feasible:
            raise InfeasibleAction(f"policy produced an infeasible route set: {report.violations}")
        sol = Solution(routes, report.value, f"policy-{mode}", seconds, False,
                       {"start": starts[p] if starts else None})
        out.append((sol, float(res.log_probs[0, p])))
    return out


@dataclass(frozen=True)
class Trajectory:
    actions: tuple[int, ...]
    forced_first: int | None = None


def trajectory_log_prob(policy: AttentionPolicy, inst: ProblemInstance, traj: Trajectory) -> torch.Tensor:
    """Differentiable log-probability of replaying ``traj`` on ``inst``."""
    starts = torch.tensor([[traj.forced_first]]) if traj.forced_first is not None else None
    env = BatchEnv([inst], 1, starts)
    nodes, depot_feats = instance_features([inst], policy.dtype)
    cache = policy.precompute(policy.encode_features(nodes, depot_feats), env.depot)
    total = torch.zeros((), dtype=policy.dtype)
    for a in traj.actions:
        if env.all_done():
            raise InfeasibleAction("trajectory continues past termination")
        mask = env.mask()
        if not 0 <= a < env.n or not bool(mask[0, 0, a]):
            raise InfeasibleAction(f"trajectory action {a} is masked")
        logp = policy.node_log_probs(cache, node_rows(env.current, env.depot), env.d, env.k.to(torch.float64), mask)
        total = total + logp[0, 0, a]
        env.step(torch.tensor([[a]]))
    if not env.all_done():
        raise InfeasibleAction("trajectory ends before termination")
    return total


def logprob_gradient(policy: AttentionPolicy, inst: ProblemInstance, traj: Trajectory) -> dict[str, torch.Tensor]:
    policy.zero_grad(set_to_none=True)
    with torch.enable_grad():
        trajectory_log_prob(policy, inst, traj).backward()
    grads = {}
    for name, p in policy.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    policy.zero_grad(set_to_none=True)
    return grads


# -- checkpoints ---------------------------------------------------------------

def _header(policy: AttentionPolicy, extra: dict | None) -> dict:
    return {
        "format": CHECKPOINT_VERSION,
        "config": asdict(policy.cfg),
        "params": [[name, list(t.shape)] for name, t in policy.state_dict().items()],
        "extra": extra or {},
    }


def save_checkpoint(policy: AttentionPolicy, path, extra: dict | None = None) -> None:
    header = json.dumps(_header(policy, extra), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    for t in policy.state_dict().values():
        parts.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse_header(raw)[0]


def _parse_header(raw: bytes):
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a policy checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos: pos + size])
    if header.get("format") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format')}")
    return header, pos + size


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> AttentionPolicy:
    raw = Path(path).read_bytes()
    header, pos = _parse_header(raw)
    cfg = ModelConfig.from_dict(header["config"])
    if expect_config is not None and cfg != expect_config:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expect_config}")
    policy = AttentionPolicy(cfg)
    expected = {name: list(t.shape) for name, t in policy.state_dict().items()}
    stored = {name: shape for name, shape in header["params"]}
    if stored != expected:
        raise ValueError("checkpoint parameter names or shapes do not match the model")
    state = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(raw):
            raise ValueError("checkpoint payload is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos = end
    if pos != len(raw):
        raise ValueError("checkpoint has trailing bytes")
    policy.load_state_dict(state)
    return policy


# -- embedding dump ------------------------------------------------------------

def layer_embeddings(policy: AttentionPolicy, inst: ProblemInstance, layer: int) -> np.ndarray:
    if not 0 <= layer <= policy.cfg.layers:
        raise ValueError(f"layer must be in 0..{policy.cfg.layers}, got {layer}")
    nodes, depot = instance_features([inst], policy.dtype)
    with torch.no_grad():
        out = policy.encode_features(nodes, depot, all_layers=True)
    return out[layer][0].double().numpy()


def dump_embeddings(policy: AttentionPolicy, inst: ProblemInstance, layer: int, path) -> np.ndarray:
    """Write one TSV row per embedding row (depot token first)."""
    emb = layer_embeddings(policy, inst, layer)
    lines = ["\t".join(repr(float(v)) for v in row) for row in emb]
    Path(path).write_text("\n".join(lines) + "\n")
    return emb
