"""Multi-start policy-gradient training with a shared per-instance baseline.

Each step draws a fresh batch of instances that share one parameter
combination ``(K, p_max, Q)``; combinations are visited cyclically.  Rewards
are normalized per combination before the shared baseline is subtracted.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baselines import Solution, gap
from .env import evaluate_route_set
from .instgen import GenSpec, ProblemInstance, augment_8fold, generate_instance
from .policy import (AttentionPolicy, ModelConfig, load_checkpoint, padded_starts, read_checkpoint_header,
                     rollout_batch, save_checkpoint)

log = logging.getLogger(__name__)

VARIANTS = ("ema-zscore", "batch-zscore", "ema-mean-div", "none")


# -- reward normalization --------------------------------------------------------

@dataclass
class RewardStats:
    """Smoothed mean and variance of rewards for each parameter combination."""

    gamma: float = 0.25
    eps: float = 1e-8
    entries: dict[str, tuple[float, float]] = field(default_factory=dict)

    def get(self, pc) -> tuple[float, float] | None:
        return self.entries.get(pc_key(pc))

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "eps": self.eps, "entries": {k: list(v) for k, v in self.entries.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "RewardStats":
        return cls(data["gamma"], data["eps"], {k: (float(v[0]), float(v[1])) for k, v in data["entries"].items()})


def pc_key(pc) -> str:
    K, p_max, Q = pc
    return f"{int(K)}|{float(p_max)!r}|{float(Q)!r}"


def normalize_rewards(rewards, pc, stats: RewardStats, variant: str = "ema-zscore"):
    """Return ``(normalized, updated_stats)``; ``stats`` itself is left untouched."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown normalization variant {variant!r}")
    r = torch.as_tensor(rewards, dtype=torch.float64)
    if r.numel() == 0:
        raise ValueError("empty reward batch")
    mu = float(r.mean())
    var = float(r.var(unbiased=False))
    new = RewardStats(stats.gamma, stats.eps, dict(stats.entries))
    prev = stats.get(pc)
    if prev is None:
        mu_hat, var_hat = mu, var
    else:
        g = stats.gamma
        mu_hat = (1 - g) * prev[0] + g * mu
        var_hat = (1 - g) * prev[1] + g * var
    if variant != "batch-zscore" and variant != "none":
        new.entries[pc_key(pc)] = (mu_hat, var_hat)
    eps = stats.eps
    if variant == "ema-zscore":
        out = (r - mu_hat) / (var_hat ** 0.5 + eps)
    elif variant == "batch-zscore":
        out = (r - mu) / (var ** 0.5 + eps)
    elif variant == "ema-mean-div":
        out = r / (mu_hat + eps)
    else:
        out = r.clone()
    return out, new


# -- configuration ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 157
    batch_size: int = 64
    combos: list = field(default_factory=lambda: [[k, p, 10.0] for k in (2, 3, 4) for p in (2.0, 3.0, 4.0)])
    normalization: str = "ema-zscore"
    gamma: float = 0.25
    eps: float = 1e-8
    lr: float = 1e-4
    weight_decay: float = 1e-6
    decay_epoch: int = 190
    decay_factor: float = 0.1
    seed: int = 0
    nodes: int = 100
    gen: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    max_starts: int | None = None
    eval_instances: int = 0
    eval_seed: int = 10_000

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.combos:
            raise ValueError("combos must be non-empty")
        for c in self.combos:
            if len(c) != 3 or int(c[0]) < 1 or float(c[1]) <= 0 or float(c[2]) <= 0:
                raise ValueError(f"bad parameter combination {c!r}")
        if self.normalization not in VARIANTS:
            raise ValueError(f"normalization must be one of {VARIANTS}")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 < self.gamma <= 1:
            raise ValueError("bad optimizer or smoothing settings")
        self.combos = [[int(c[0]), float(c[1]), float(c[2])] for c in self.combos]
        self.gen_spec()
        self.model_config()

    def gen_spec(self) -> GenSpec:
        return GenSpec.for_node_count(self.nodes, **self.gen)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def training_batch(cfg: TrainConfig, epoch: int, step: int) -> tuple[tuple, list[ProblemInstance]]:
    """Instances for one step; a pure function of (seed, epoch, step)."""
    index = (epoch - 1) * cfg.steps_per_epoch + (step - 1)
    K, p_max, Q = cfg.combos[index % len(cfg.combos)]
    spec = cfg.gen_spec()
    insts = [generate_instance(spec, K, p_max, Q, _seed(cfg.seed, epoch, step, b)) for b in range(cfg.batch_size)]
    return (K, p_max, Q), insts


def held_out_instances(cfg: TrainConfig, count: int | None = None) -> list[ProblemInstance]:
    count = cfg.eval_instances if count is None else count
    spec = cfg.gen_spec()
    out = []
    for j in range(count):
        K, p_max, Q = cfg.combos[j % len(cfg.combos)]
        out.append(generate_instance(spec, K, p_max, Q, _seed(cfg.eval_seed, j)))
    return out


# -- one policy-gradient step ------------------------------------------------------

def pomo_step(policy: AttentionPolicy, instances: list[ProblemInstance], pc, stats: RewardStats,
              variant: str = "ema-zscore", generator: torch.Generator | None = None,
              max_starts: int | None = None):
    """Sampled multi-start rollouts and the shared-baseline gradient.

    Gradients are left in ``param.grad`` and also returned by name.
    Returns ``(gradients, metrics, updated_stats)``.
    """
    if any(inst.pc != tuple(pc) for inst in instances):
        raise ValueError("all instances in a batch must share the parameter combination")
    starts = padded_starts(instances, max_starts)
    policy.zero_grad(set_to_none=True)
    res = rollout_batch(policy, instances, "sample", starts, pomo=max_starts or 8, generator=generator)
    raw = res.values
    normed, stats = normalize_rewards(raw.flatten(), pc, stats, variant)
    normed = normed.view_as(raw)
    baseline = normed.mean(dim=1, keepdim=True)
    adv = normed - baseline
    count = raw.numel()
    loss = -(adv.to(res.log_probs.dtype) * res.log_probs).sum() / count
    loss.backward()
    grads = {name: (p.grad if p.grad is not None else torch.zeros_like(p)) for name, p in policy.named_parameters()}
    metrics = {
        "raw_mean": float(raw.mean()),
        "norm_mean": float(normed.mean()),
        "baseline": float(baseline.mean()),
        "adv_sum_max": float(adv.sum(dim=1).abs().max()),
        "trajectories": count,
        "loss": float(loss.detach()),
    }
    return grads, metrics, stats


# -- training loop -------------------------------------------------------------------

def _lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * (cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0)


def _checkpoint_path(out: Path, epoch: int) -> Path:
    return out / f"epoch{epoch:04d}.ckpt"


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".state.pt")


def save_training_state(path: Path, policy, optimizer, stats: RewardStats, cfg: TrainConfig, epoch: int):
    save_checkpoint(policy, path, {"epoch": epoch, "train": cfg.to_dict(), "stats": stats.to_dict()})
    torch.save({"optimizer": optimizer.state_dict(), "epoch": epoch}, _sidecar(path))


def train_loop(cfg: TrainConfig, out_dir, resume=None, progress=None) -> dict:
    """Train and write ``epochNNNN.ckpt`` files, ``metrics.ndjson`` and ``eval.ndjson`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = AttentionPolicy(cfg.model_config(), seed=cfg.seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=_lr(cfg, 1), weight_decay=cfg.weight_decay)
    stats = RewardStats(cfg.gamma, cfg.eps)
    start_epoch = 1
    metrics_path, eval_path = out / "metrics.ndjson", out / "eval.ndjson"
    if resume is not None:
        header = read_checkpoint_header(resume)
        extra = header["extra"]
        if TrainConfig.from_dict(extra["train"]) != cfg:
            raise ValueError("resume checkpoint was written with a different training config")
        policy = load_checkpoint(resume, cfg.model_config())
        optimizer = torch.optim.Adam(policy.parameters(), lr=_lr(cfg, 1), weight_decay=cfg.weight_decay)
        optimizer.load_state_dict(torch.load(_sidecar(Path(resume)), weights_only=True)["optimizer"])
        stats = RewardStats.from_dict(extra["stats"])
        start_epoch = int(extra["epoch"]) + 1
        _truncate_log(metrics_path, start_epoch)
        _truncate_log(eval_path, start_epoch)
    else:
        metrics_path.write_text("")
        eval_path.write_text("")
    held_out = held_out_instances(cfg)
    history = []
    if resume is None and held_out:
        history.append(_log_eval(eval_path, policy, held_out, 0))
    t_start = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = _lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for step in range(1, cfg.steps_per_epoch + 1):
            t0 = time.perf_counter()
            pc, insts = training_batch(cfg, epoch, step)
            gen = torch.Generator().manual_seed(_seed(cfg.seed, epoch, step, 1 << 20))
            _, m, stats = pomo_step(policy, insts, pc, stats, cfg.normalization, gen, cfg.max_starts)
            optimizer.step()
            record = {"epoch": epoch, "step": step, "pc": list(pc), "raw_mean": m["raw_mean"],
                      "norm_mean": m["norm_mean"], "baseline": m["baseline"], "lr": lr,
                      "seconds": time.perf_counter() - t0, "adv_sum_max": m["adv_sum_max"],
                      "loss": m["loss"]}
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
            if progress:
                progress(record)
        ckpt = _checkpoint_path(out, epoch)
        save_training_state(ckpt, policy, optimizer, stats, cfg, epoch)
        if held_out:
            history.append(_log_eval(eval_path, policy, held_out, epoch))
        log.info("epoch %d done after %.1fs", epoch, time.perf_counter() - t_start)
    return {"policy": policy, "stats": stats, "eval": history, "out": str(out)}


def _truncate_log(path: Path, start_epoch: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["epoch"] < start_epoch]
    path.write_text("".join(ln + "\n" for ln in keep))


def _log_eval(path: Path, policy, instances, epoch: int) -> dict:
    _, summary = evaluate(policy, instances, augment=False)
    rec = {"epoch": epoch, "mean_value": summary["mean_value"]}
    with path.open("a") as fh:
        fh.write(json.dumps(rec) + "\n")
    return rec


def read_ndjson(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


# -- evaluation ----------------------------------------------------------------------

def _greedy_best(policy, instances: list[ProblemInstance], originals: list[ProblemInstance], chunk: int):
    """Best feasible (on the original instance) greedy multi-start solution for each instance."""
    best: list[Solution | None] = [None] * len(instances)
    for lo in range(0, len(instances), chunk):
        part = instances[lo: lo + chunk]
        with torch.no_grad():
            res = rollout_batch(policy, part, "greedy", padded_starts(part))
        for b in range(len(part)):
            orig = originals[lo + b]
            for p in range(res.env.P):
                routes = res.routes(b, p)
                report = evaluate_route_set(orig, routes)
                if not report.feasible:
                    continue
                cur = best[lo + b]
                if cur is None or report.value > cur.value:
                    best[lo + b] = Solution(routes, report.value, "policy", 0.0, False, {})
    return best


def evaluate(policy: AttentionPolicy, instances: list[ProblemInstance], augment: bool = False,
             baselines: dict[str, list[float]] | None = None, chunk: int = 128):
    """Greedy multi-start inference; with ``augment`` the best over all 8 coordinate variants."""
    policy.eval()
    t0 = time.perf_counter()
    solutions: list[Solution | None] = [None] * len(instances)
    groups: dict[int, list[int]] = {}
    for j, inst in enumerate(instances):
        groups.setdefault(inst.network.node_count, []).append(j)
    for idx in groups.values():
        if augment:
            variants, originals, owner = [], [], []
            for j in idx:
                for v in augment_8fold(instances[j]):
                    variants.append(v)
                    originals.append(instances[j])
                    owner.append(j)
        else:
            variants = originals = [instances[j] for j in idx]
            owner = idx
        found = _greedy_best(policy, variants, originals, chunk)
        for j, sol in zip(owner, found):
            if sol is not None and (solutions[j] is None or sol.value > solutions[j].value):
                solutions[j] = sol
    seconds = time.perf_counter() - t0
    name = "policy-x8" if augment else "policy"
    for j, sol in enumerate(solutions):
        if sol is None:
            raise RuntimeError(f"no feasible policy solution for instance {j}")
        sol.solver = name
        sol.seconds = seconds / len(instances)
    values = [s.value for s in solutions]
    summary = {"solver": name, "count": len(values), "mean_value": float(np.mean(values)) if values else 0.0,
               "mean_seconds": seconds / max(1, len(values)), "total_seconds": seconds, "gaps": {}}
    for other, vals in (baselines or {}).items():
        gaps = [gap(y, yo) for y, yo in zip(values, vals) if y != 0]
        summary["gaps"][other] = float(np.mean(gaps)) if gaps else None
    return solutions, summary

