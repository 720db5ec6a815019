"""Lock-step stepping of many episodes over a batch of same-size instances.

Shapes: ``B`` instances x ``P`` episodes per instance x ``n`` nodes.  Time
arithmetic is float64 and uses the same expression order as
:mod:`droneassess.env`, so masks agree bit-for-bit with the scalar environment.
"""
from __future__ import annotations

import numpy as np
import torch

from .instgen import ProblemInstance


class BatchEnv:
    def __init__(self, instances: list[ProblemInstance], pomo: int, starts=None):
        n = instances[0].network.node_count
        if any(inst.network.node_count != n for inst in instances):
            raise ValueError("batched instances must share a node count")
        self.instances = instances
        self.B, self.P, self.n = len(instances), pomo, n
        f64 = torch.float64
        self.dist = torch.stack([torch.from_numpy(np.array(i.network.dist)) for i in instances]).to(f64)
        self.adj = torch.stack([torch.from_numpy(np.array(i.network.adjacency)) for i in instances])
        self.is_value = torch.stack([torch.from_numpy(np.array(i.network.is_value_node)) for i in instances])
        self.node_value = torch.stack([torch.from_numpy(np.array(i.network.value)) for i in instances]).to(f64)
        self.depot = torch.tensor([i.depot for i in instances], dtype=torch.long)
        self.budget = torch.tensor([i.budget for i in instances], dtype=f64)
        self.K = torch.tensor([i.K for i in instances], dtype=torch.long)
        self.n_values = self.is_value.sum(1)
        ep = torch.stack([torch.from_numpy(np.array(i.network.endpoints)) for i in instances]).clone()
        ep[ep < 0] = self.depot[:, None, None].expand_as(ep)[ep < 0]
        b = torch.arange(self.B)[:, None]
        o = self.depot[:, None]
        nodes = torch.arange(n)[None, :]
        # per-node constants for the look-ahead rules
        self.d_to_depot = self.dist[b, nodes, o]                      # (B, n)
        e1, e2 = ep[..., 0], ep[..., 1]
        self.d_half1 = self.dist[b, nodes, e1]
        self.d_half2 = self.dist[b, nodes, e2]
        self.d_e1_depot = self.dist[b, e1, o]
        self.d_e2_depot = self.dist[b, e2, o]
        self.starts = starts                                          # (B, P) long or None
        self.reset()

    def reset(self):
        B, P, n = self.B, self.P, self.n
        self.k = torch.ones(B, P, dtype=torch.long)
        self.d = torch.zeros(B, P, dtype=torch.float64)
        self.current = self.depot[:, None].expand(B, P).clone()
        self.visited = torch.zeros(B, P, n, dtype=torch.bool)
        self.n_visited = torch.zeros(B, P, dtype=torch.long)
        self.value = torch.zeros(B, P, dtype=torch.float64)
        self.t = 0
        self.actions: list[torch.Tensor] = []
        self._history: np.ndarray | None = None
        self.done = self._terminal()

    def _terminal(self):
        at_depot = self.current == self.depot[:, None]
        return (self.k > self.K[:, None]) | (at_depot & (self.n_visited == self.n_values[:, None]))

    def mask(self) -> torch.Tensor:
        B, P, n = self.B, self.P, self.n
        bi = torch.arange(B)[:, None]
        cur = self.current
        adj = self.adj[bi, cur]                                       # (B, P, n)
        dcur = self.dist[bi, cur]                                     # (B, P, n)
        budget = self.budget[:, None, None]
        to_i = self.d[..., None] + dcur
        isv = self.is_value[:, None, :]
        zero_ok = adj & ~isv & (to_i + self.d_to_depot[:, None, :] <= budget)
        via1 = to_i + self.d_half1[:, None, :] + self.d_e1_depot[:, None, :]
        via2 = to_i + self.d_half2[:, None, :] + self.d_e2_depot[:, None, :]
        value_ok = adj & isv & ~self.visited & (torch.minimum(via1, via2) <= budget)
        mask = zero_ok | value_ok
        o = self.depot[:, None].expand(B, P)
        at_depot = cur == o
        d_home = self.d + dcur.gather(2, o[..., None]).squeeze(2)
        depot_ok = at_depot | (adj.gather(2, o[..., None]).squeeze(2) & (d_home <= self.budget[:, None]))
        mask.scatter_(2, o[..., None], depot_ok[..., None])
        if self.t == 0 and self.starts is not None:
            forced = torch.zeros_like(mask)
            forced.scatter_(2, self.starts[..., None], True)
            mask = mask & forced
        # finished episodes idle at the depot
        done_mask = torch.zeros_like(mask)
        done_mask.scatter_(2, o[..., None], True)
        return torch.where(self.done[..., None], done_mask, mask)

    def step(self, action: torch.Tensor) -> None:
        bi = torch.arange(self.B)[:, None]
        active = ~self.done
        o = self.depot[:, None].expand_as(action)
        home = action == o
        step_time = self.dist[bi, self.current, action]
        self.k = torch.where(active & home, self.k + 1, self.k)
        self.d = torch.where(active & ~home, self.d + step_time, torch.where(active & home, 0.0, self.d))
        collect = active & self.is_value.gather(1, action) & ~self.visited.gather(2, action[..., None]).squeeze(2)
        self.visited.scatter_(2, action[..., None], self.visited.gather(2, action[..., None]) | collect[..., None])
        self.n_visited = self.n_visited + collect.long()
        gain = self.node_value.gather(1, action)
        self.value = torch.where(collect, self.value + gain, self.value)
        self.current = torch.where(active, action, self.current)
        self.actions.append(torch.where(active, action, torch.full_like(action, -1)))
        self.t += 1
        self.done = self.done | self._terminal()

    def all_done(self) -> bool:
        return bool(self.done.all())

    def action_history(self) -> np.ndarray:
        """All recorded actions as a ``(B, P, T)`` array, ``-1`` after an episode ends."""
        if self._history is None or self._history.shape[2] != len(self.actions):
            self._history = (torch.stack(self.actions, dim=2).numpy() if self.actions
                             else np.zeros((self.B, self.P, 0), dtype=np.int64))
        return self._history

    def episode_actions(self, b: int, p: int) -> list[int]:
        row = self.action_history()[b, p]
        return row[row >= 0].tolist()
