"""Group-normalized advantages and the contribution-weighted clipped objective.

For a group of N rollouts sharing one session, each rollout i has a reward
r_i, an advantage A_i = (r_i - mean) / (std + eps), and four token spans (one
per memory type).  The objective averages, over rollouts, the per-type mean of

    min(w_m * rho * A_i, clip(rho, 1 - eps, 1 + eps) * A_i)

over each span's tokens, minus beta * KL(policy || reference).  Only the
unclipped branch is scaled by the attribution weight w_m.

The toy half of the module (``ToyPolicy``, ``objective_gradient``,
``train_toy``) runs the same objective on a small tabular softmax policy, with
an analytic gradient that can be checked against finite differences.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attribution import assign_weights, dominant_type
from .errors import GroupTooSmall, ShapeMismatch, SupportMismatch
from .memory import CORE, ENTRY_TYPES
from .reward import PenaltyParams, combine_reward, core_length_penalty, entry_length_penalty, aggregate_ell

MEM_TYPES = (CORE, *ENTRY_TYPES)


@dataclass(frozen=True)
class AdrpoConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    adv_eps: float = 1e-8
    alpha: float = 4.0
    # "reference": ratios against ref_logp; "old": against old_logp
    ratio_baseline: str = "reference"

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.adv_eps <= 0:
            raise ValueError("adv_eps must be positive")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.ratio_baseline not in ("reference", "old"):
            raise ValueError("ratio_baseline must be 'reference' or 'old'")


def advantages(rewards: Sequence[float], adv_eps: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rollouts per group, got {r.size}")
    return (r - r.mean()) / (r.std() + adv_eps)


@dataclass
class RolloutGroup:
    """One session's rollouts.

    ``logp``/``ref_logp``/``old_logp`` hold per-token log-probabilities of the
    sampled tokens, shape (N, L).  ``masks`` marks which tokens belong to
    each memory type's output.  ``kl`` is the KL term already evaluated for
    the current policy.
    """

    rewards: np.ndarray
    logp: np.ndarray
    ref_logp: np.ndarray
    masks: dict[str, np.ndarray]
    weights: list[Mapping[str, float]]
    kl: float = 0.0
    old_logp: np.ndarray | None = None
    tokens: np.ndarray | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.logp = np.asarray(self.logp, dtype=np.float64)
        self.ref_logp = np.asarray(self.ref_logp, dtype=np.float64)
        n = self.rewards.shape[0]
        shape = self.logp.shape
        if self.logp.ndim != 2 or shape[0] != n:
            raise ShapeMismatch(f"logp shape {shape} does not match {n} rewards")
        if self.ref_logp.shape != shape:
            raise ShapeMismatch(f"ref_logp shape {self.ref_logp.shape} != logp shape {shape}")
        if self.old_logp is not None:
            self.old_logp = np.asarray(self.old_logp, dtype=np.float64)
            if self.old_logp.shape != shape:
                raise ShapeMismatch(f"old_logp shape {self.old_logp.shape} != logp shape {shape}")
        if self.tokens is not None:
            self.tokens = np.asarray(self.tokens)
            if self.tokens.shape != shape:
                raise ShapeMismatch(f"tokens shape {self.tokens.shape} != logp shape {shape}")
        self.masks = {m: np.asarray(v, dtype=bool) for m, v in self.masks.items()}
        for m, mask in self.masks.items():
            if mask.shape != shape:
                raise ShapeMismatch(f"mask for {m} has shape {mask.shape}, expected {shape}")
        if len(self.weights) != n:
            raise ShapeMismatch(f"{len(self.weights)} weight maps for {n} rollouts")

    @property
    def size(self) -> int:
        return self.rewards.shape[0]


def _baseline(group: RolloutGroup, cfg: AdrpoConfig) -> np.ndarray:
    if cfg.ratio_baseline == "old":
        if group.old_logp is None:
            raise ShapeMismatch("ratio_baseline='old' needs old_logp")
        return group.old_logp
    return group.ref_logp


def _type_weights(group: RolloutGroup, m: str) -> np.ndarray:
    return np.array([float(w.get(m, 1.0)) for w in group.weights])


def surrogate(group: RolloutGroup, cfg: AdrpoConfig) -> float:
    """Clipped, weighted surrogate (objective without the KL term)."""
    adv = advantages(group.rewards, cfg.adv_eps)[:, None]
    ratio = np.exp(group.logp - _baseline(group, cfg))
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    total = np.zeros(group.size)
    for m, mask in group.masks.items():
        w = _type_weights(group, m)[:, None]
        term = np.minimum(w * ratio * adv, clipped) * mask
        n_tok = mask.sum(axis=1)
        total += np.where(n_tok > 0, term.sum(axis=1) / np.maximum(n_tok, 1), 0.0)
    return float(total.mean())


def objective(group: RolloutGroup, cfg: AdrpoConfig) -> float:
    return surrogate(group, cfg) - cfg.kl_beta * group.kl


# ---------------------------------------------------------------------------
# toy policy


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ToyPolicy:
    """Independent categorical distribution per position, parameterized by logits (L, V)."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ShapeMismatch("logits must be a (positions, vocab) table")

    @classmethod
    def uniform(cls, length: int, vocab: int) -> "ToyPolicy":
        return cls(np.zeros((length, vocab)))

    @property
    def length(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab(self) -> int:
        return self.logits.shape[1]

    def log_probs(self) -> np.ndarray:
        return _log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits.copy())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.probs()
        cum = np.cumsum(p, axis=1)
        u = rng.random((n, self.length, 1))
        tokens = (u > cum[None, :, :]).sum(axis=2)
        return np.minimum(tokens, self.vocab - 1)

    def token_logp(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.length:
            raise ShapeMismatch(f"tokens shape {tokens.shape} incompatible with length {self.length}")
        return self.log_probs()[np.arange(self.length)[None, :], tokens]


def _prob_table(x) -> np.ndarray:
    return x.probs() if isinstance(x, ToyPolicy) else np.asarray(x, dtype=np.float64)


def kl_divergence(policy, reference) -> float:
    """Exact KL(policy || reference), summed over positions.

    Accepts ToyPolicy objects or probability tables of shape (L, V) / (V,).
    """
    p, q = _prob_table(policy), _prob_table(reference)
    if p.shape != q.shape:
        raise SupportMismatch(f"shapes differ: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise SupportMismatch("reference assigns zero probability where policy does not")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def build_group(
    policy: ToyPolicy,
    reference: ToyPolicy,
    tokens: np.ndarray,
    rewards: Sequence[float],
    masks: Mapping[str, np.ndarray],
    weights: Sequence[Mapping[str, float]],
    old: ToyPolicy | None = None,
) -> RolloutGroup:
    return RolloutGroup(
        rewards=np.asarray(rewards, dtype=np.float64),
        logp=policy.token_logp(tokens),
        ref_logp=reference.token_logp(tokens),
        masks=dict(masks),
        weights=list(weights),
        kl=kl_divergence(policy, reference),
        old_logp=None if old is None else old.token_logp(tokens),
        tokens=np.asarray(tokens),
    )


def toy_objective(policy, reference, tokens, rewards, masks, weights, cfg: AdrpoConfig, old=None) -> float:
    return objective(build_group(policy, reference, tokens, rewards, masks, weights, old), cfg)


def objective_gradient(
    policy: ToyPolicy,
    group: RolloutGroup,
    cfg: AdrpoConfig,
    reference: ToyPolicy | None = None,
) -> np.ndarray:
    """Analytic d(objective)/d(logits).

    Log-probs of the current policy are recomputed from ``policy``; the
    ratio baseline is taken from ``group``.  ``reference`` is required when
    ``cfg.kl_beta > 0``.
    """
    if group.tokens is None:
        raise ShapeMismatch("objective_gradient needs the group's sampled tokens")
    tokens = group.tokens
    n, length = tokens.shape
    logp = policy.token_logp(tokens)
    adv = advantages(group.rewards, cfg.adv_eps)[:, None]
    ratio = np.exp(logp - _baseline(group, cfg))
    lo, hi = 1 - cfg.clip_eps, 1 + cfg.clip_eps
    clipped = np.clip(ratio, lo, hi) * adv
    inside = (ratio > lo) & (ratio < hi)

    coeff = np.zeros((n, length))
    for m, mask in group.masks.items():
        w = _type_weights(group, m)[:, None]
        unclipped = w * ratio * adv
        d_ratio = np.where(unclipped <= clipped, w * adv, np.where(inside, adv, 0.0))
        n_tok = mask.sum(axis=1, keepdims=True)
        coeff += np.where(mask, d_ratio * ratio / np.maximum(n_tok, 1), 0.0)
    coeff /= n

    probs = policy.probs()
    grad = -probs * coeff.sum(axis=0)[:, None]
    rows = np.broadcast_to(np.arange(length), tokens.shape)
    np.add.at(grad, (rows, tokens), coeff)

    if cfg.kl_beta > 0:
        if reference is None:
            raise ValueError("reference policy required when kl_beta > 0")
        log_p, log_q = policy.log_probs(), reference.log_probs()
        diff = log_p - log_q
        kl_pos = (probs * diff).sum(axis=1, keepdims=True)
        grad -= cfg.kl_beta * probs * (diff - kl_pos)
    return grad


def finite_difference_gradient(fn, logits: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn(logits)`` over every entry of the table."""
    base = np.array(logits, dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (fn(plus) - fn(minus)) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# toy environment and trainer


@dataclass
class ToyOutcome:
    valid: bool
    r_task: float
    penalties: dict[str, float]
    retrieval_counts: dict[str, int]
    length: float


@dataclass
class ToyEnv:
    """Scripted session environment over one token sequence split into four typed spans.

    Each position in ``targets`` stands for one synthetic question: it is
    answered correctly when the sampled token equals the target.  Answering
    it retrieves the entry written at that position, right or wrong, which
    counts toward the span's memory type.
    ``invalid_token`` anywhere makes the rollout malformed.  ``verbose_token``
    marks a long write that costs ``verbose_len`` tokens instead of
    ``base_len``; expert reference lengths assume ``base_len`` everywhere.
    """

    segments: dict[str, tuple[int, ...]]
    targets: dict[int, int]
    vocab: int
    invalid_token: int | None = None
    verbose_token: int | None = None
    base_len: int = 60
    verbose_len: int = 400
    params: PenaltyParams = field(default_factory=PenaltyParams)

    @property
    def length(self) -> int:
        return 1 + max(p for span in self.segments.values() for p in span)

    def masks(self, n: int) -> dict[str, np.ndarray]:
        out = {}
        for m, span in self.segments.items():
            mask = np.zeros((n, self.length), dtype=bool)
            mask[:, list(span)] = True
            out[m] = mask
        return out

    def evaluate(self, seq: Sequence[int]) -> ToyOutcome:
        seq = [int(t) for t in seq]
        valid = self.invalid_token is None or self.invalid_token not in seq
        hits = {p: seq[p] == t for p, t in self.targets.items()}
        r_task = sum(hits.values()) / len(hits) if hits else 0.0
        counts = {m: 0 for m in ENTRY_TYPES}
        penalties, total = {}, 0.0
        for m, span in self.segments.items():
            if m in counts:
                counts[m] = sum(p in self.targets for p in span)
            written = sum(self.verbose_len if seq[p] == self.verbose_token else self.base_len for p in span)
            total += written
            if m == CORE:
                penalties[m] = core_length_penalty(written, self.params)
            else:
                penalties[m] = entry_length_penalty(written, self.base_len * len(span), self.params)
        return ToyOutcome(valid, r_task, penalties, counts, total)


DEFAULT_SEGMENTS = {CORE: (0,), "episodic": (1, 2), "semantic": (3, 4), "procedural": (5,)}


def bandit_env(vocab: int = 6, seed: int = 0) -> ToyEnv:
    """Every position has a rewarded token; last token is malformed, second-to-last verbose."""
    rng = np.random.default_rng(seed)
    positions = [p for span in DEFAULT_SEGMENTS.values() for p in span]
    targets = {p: int(rng.integers(0, vocab - 2)) for p in positions}
    return ToyEnv(dict(DEFAULT_SEGMENTS), targets, vocab, invalid_token=vocab - 1, verbose_token=vocab - 2)


def attribution_env(vocab: int = 6, seed: int = 0, mem_type: str = "episodic") -> ToyEnv:
    """Only one memory type's span decides the task reward."""
    rng = np.random.default_rng(seed)
    targets = {p: int(rng.integers(0, vocab - 2)) for p in DEFAULT_SEGMENTS[mem_type]}
    return ToyEnv(dict(DEFAULT_SEGMENTS), targets, vocab, invalid_token=vocab - 1, verbose_token=vocab - 2)


@dataclass
class LearningCurve:
    rows: list[dict] = field(default_factory=list)
    policy: ToyPolicy | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def final(self, name: str = "mean_reward", window: int = 5) -> float:
        return float(self.column(name)[-window:].mean())

    def first_epoch_reaching(self, threshold: float, name: str = "mean_reward") -> int | None:
        for r in self.rows:
            if r[name] >= threshold:
                return r["epoch"]
        return None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "mean_reward", "task_reward", "mean_length"])
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in writer.fieldnames})


def train_toy(
    env: ToyEnv,
    cfg: AdrpoConfig = AdrpoConfig(),
    epochs: int = 50,
    reward_density: float = 1.0,
    *,
    sessions_per_epoch: int = 4,
    group_size: int = 8,
    lr: float = 0.5,
    seed: int = 0,
    unweighted: bool = False,
) -> LearningCurve:
    """Sampled rollouts -> rewards -> advantages -> weighted clipped ascent steps.

    A session receives its task reward with probability ``reward_density``.
    Sessions without it are scored on format and length only (task term
    held at 1) and carry no retrieval counts, hence no amplification.
    Ratios are taken against the pre-update policy that sampled the group;
    the KL term is against the initial policy.

    Logged ``mean_reward`` always includes the task term, so curves are
    comparable across densities.
    """
    if not 0 < reward_density <= 1:
        raise ValueError("reward_density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    policy = ToyPolicy.uniform(env.length, env.vocab)
    reference = policy.copy()
    step_cfg = dataclasses.replace(cfg, ratio_baseline="old")
    masks = env.masks(group_size)
    lam = env.params.lam
    curve = LearningCurve()

    for epoch in range(1, epochs + 1):
        logged_r, logged_task, logged_len = [], [], []
        for _ in range(sessions_per_epoch):
            tokens = policy.sample(rng, group_size)
            outcomes = [env.evaluate(x) for x in tokens]
            with_task = rng.random() < reward_density
            rewards, weights = [], []
            for o in outcomes:
                ell = aggregate_ell(o.penalties)
                rewards.append(combine_reward(o.valid, o.r_task if with_task else 1.0, ell, lam))
                if unweighted or not with_task or cfg.alpha == 1:
                    weights.append(assign_weights(None, unweighted=True).weights)
                else:
                    weights.append(assign_weights(dominant_type(o.retrieval_counts), cfg.alpha).weights)
                logged_r.append(combine_reward(o.valid, o.r_task, ell, lam))
                logged_task.append(o.r_task)
                logged_len.append(o.length)
            old = policy.copy()
            group = build_group(policy, reference, tokens, rewards, masks, weights, old=old)
            policy.logits += lr * objective_gradient(policy, group, step_cfg, reference)
        curve.rows.append(
            {
                "epoch": epoch,
                "mean_reward": float(np.mean(logged_r)),
                "task_reward": float(np.mean(logged_task)),
                "mean_length": float(np.mean(logged_len)),
            }
        )
    curve.policy = policy
    return curve


def expected_task_reward(policy: ToyPolicy, env: ToyEnv) -> float:
    """Exact expected task reward under ``policy`` (no sampling)."""
    p = policy.probs()
    return float(np.mean([p[pos, tok] for pos, tok in env.targets.items()]))
