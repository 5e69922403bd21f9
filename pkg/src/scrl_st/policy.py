"""Policy network, set sampling, REINFORCE update and the active-sampling loop.

The policy scores every unsampled candidate from its image features; a set
of ``k`` spots is drawn by sequential sampling without replacement from the
softmax over those scores, and the probability of that ordered draw is the
set probability the REINFORCE gradient differentiates.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .config import SamplerConfig
from .dataset import Dataset
from .errors import BudgetError, DimensionError, NumericError
from .helpers import append_jsonl
from .layers import Mlp, Params, SgdMomentum
from .numerics import FloatArray, IntArray, log_softmax
from .rewards import RewardBreakdown, RewardModel

logger = structlog.get_logger(__name__)


@dataclass
class PolicyNet:
    """Two-layer scorer ``W2 · relu(W1 · e + b1) + b2`` and its optimizer state."""

    mlp: Mlp
    optimizer: SgdMomentum = field(default_factory=lambda: SgdMomentum(momentum=0.0))

    @classmethod
    def init(
        cls, feature_dim: int, rng: np.random.Generator, hidden: int = 128, momentum: float = 0.0
    ) -> "PolicyNet":
        """Uniform ±1/sqrt(fan_in) hidden weights and a zero output row.

        With ``W2 = 0`` every candidate starts with the same score, so the
        untrained policy samples uniformly.
        """
        mlp = Mlp.init(feature_dim, hidden, 1, rng)
        mlp.w2[:] = 0.0
        return cls(
            mlp=mlp,
            optimizer=SgdMomentum(momentum=momentum),
        )

    def copy(self) -> "PolicyNet":
        return PolicyNet(
            mlp=self.mlp.copy(),
            optimizer=SgdMomentum(
                momentum=self.optimizer.momentum,
                weight_decay=self.optimizer.weight_decay,
                velocity={
                    key: {name: v.copy() for name, v in slot.items()}
                    for key, slot in self.optimizer.velocity.items()
                },
            ),
        )


def policy_scores(net: PolicyNet, features: npt.ArrayLike) -> FloatArray:
    """One priority score per feature row."""
    return net.mlp(features)[:, 0]


def sequential_log_prob(
    scores: npt.ArrayLike, order: npt.ArrayLike
) -> tuple[float, FloatArray]:
    """Log-probability of drawing ``order`` without replacement, and its score gradient.

    After each pick the softmax is renormalized over the remaining candidates:
    ``log p = sum_t [s[a_t] - logsumexp(s[R_t])]``, whose gradient is
    ``1{j = a_t} - 1{j in R_t} * softmax_{R_t}(j)`` summed over picks.
    """
    s = np.asarray(scores, dtype=np.float64)
    picks = np.asarray(order, dtype=np.int64).ravel()
    remaining = np.ones(s.size, dtype=bool)
    grad = np.zeros_like(s)
    total = 0.0
    for a in picks:
        if not 0 <= a < s.size or not remaining[a]:
            raise DimensionError(f"pick {int(a)} is not a remaining candidate")
        idx = np.flatnonzero(remaining)
        logp = log_softmax(s[idx])
        total += float(logp[np.searchsorted(idx, a)])
        grad[idx] -= np.exp(logp)
        grad[a] += 1.0
        remaining[a] = False
    return total, grad


def sample_set(
    probs: npt.ArrayLike, k: int, rng: np.random.Generator
) -> tuple[IntArray, float]:
    """Draw ``k`` distinct indices by sequential sampling with renormalization.

    Uses the Gumbel-top-k construction, which yields exactly the sequential
    without-replacement distribution in a single vectorized draw.

    Returns:
        The picks in draw order and the log-probability of that order.
    """
    p = np.asarray(probs, dtype=np.float64)
    if k > p.size:
        raise BudgetError(f"cannot draw {k} from {p.size} candidates")
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    keys = logp + rng.gumbel(size=p.size)
    order = np.argsort(-keys, kind="stable")[:k].astype(np.int64)
    picked = p[order]
    mass_before = 1.0 - np.concatenate(([0.0], np.cumsum(picked)[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        log_prob = float(np.sum(np.log(picked / np.maximum(mass_before, picked))))
    return order, min(log_prob, 0.0)


def sample_from_scores(
    scores: npt.ArrayLike, k: int, rng: np.random.Generator
) -> tuple[IntArray, float]:
    """:func:`sample_set` over softmax(scores), with the log-probability from scores."""
    s = np.asarray(scores, dtype=np.float64)
    if k > s.size:
        raise BudgetError(f"cannot draw {k} from {s.size} candidates")
    keys = log_softmax(s) + rng.gumbel(size=s.size)
    order = np.argsort(-keys, kind="stable")[:k].astype(np.int64)
    log_prob, _ = sequential_log_prob(s, order)
    return order, log_prob


def log_prob_gradient(
    net: PolicyNet, features: npt.ArrayLike, order: npt.ArrayLike
) -> tuple[float, Params]:
    """Set log-probability of ``order`` and its gradient for every policy parameter."""
    out, cache = net.mlp.forward(features)
    log_prob, grad_scores = sequential_log_prob(out[:, 0], order)
    grads, _ = net.mlp.backward(cache, grad_scores[:, None])
    return log_prob, grads


class BaselineState(BaseModel):
    """Reward baseline subtracted from the return before the policy step."""

    kind: Literal["none", "running_mean"] = "running_mean"
    decay: float = Field(default=0.9, ge=0.0, lt=1.0)
    value: float = 0.0
    observed: bool = False

    def updated(self, reward: float) -> "BaselineState":
        """Baseline after observing ``reward`` (the first reward initializes it)."""
        if self.kind == "none":
            return self
        value = reward if not self.observed else self.decay * self.value + (1.0 - self.decay) * reward
        return self.model_copy(update={"value": value, "observed": True})

    @property
    def current(self) -> float:
        return self.value if self.kind == "running_mean" else 0.0


def reinforce_update(
    net: PolicyNet,
    features: npt.ArrayLike,
    order: npt.ArrayLike,
    reward: float,
    lr: float,
    baseline: BaselineState,
) -> tuple[PolicyNet, BaselineState]:
    """One REINFORCE ascent step ``theta += lr * (R - b) * grad log pi(S)``.

    Returns a new network and the baseline after observing ``reward``; the
    input network is never modified.

    Raises:
        NumericError: the gradient is not finite (parameters untouched).
    """
    _, grads = log_prob_gradient(net, features, order)
    advantage = reward - baseline.current
    ascent = {name: -advantage * g for name, g in grads.items()}
    updated = net.copy()
    try:
        updated.optimizer.step("policy", updated.mlp, ascent, lr)
    except NumericError:
        logger.error("Non-finite policy gradient", reward=reward, advantage=advantage)
        raise
    return updated, baseline.updated(reward)


class Episode(BaseModel):
    """One sampling round."""

    model_config = ConfigDict(frozen=True)

    round: int = Field(..., ge=0)
    spot_ids: list[int]
    log_prob: float = Field(..., le=0.0)
    reward: RewardBreakdown
    gain: float
    baseline: float
    warmup: bool = False


def resolve_budget(budget: int | float, n: int) -> int:
    """Spot count for a budget given as a count or as a ratio of ``n``."""
    if isinstance(budget, bool):
        raise BudgetError("budget must be a count or a ratio")
    count = budget if isinstance(budget, int) else math.ceil(budget * n - 1e-9)
    if count < 1:
        raise BudgetError(f"budget {budget} selects no spots")
    if count > n:
        raise BudgetError(f"budget {count} exceeds the {n} candidates")
    return int(count)


def round_sizes(budget: int, rounds: int) -> list[int]:
    """``ceil(B / rounds)`` per round, the last round truncated to hit B."""
    k = math.ceil(budget / rounds)
    sizes = []
    left = budget
    while left > 0:
        sizes.append(min(k, left))
        left -= sizes[-1]
    return sizes


@dataclass
class SamplingResult:
    pool: list[int]
    episodes: list[Episode]
    policy: PolicyNet


class ActiveSampler:
    """Round-by-round active sampling over a dataset's spots.

    :meth:`step` runs one round so callers can interleave other work (such
    as predictor epochs) between rounds; :meth:`run` drives all rounds.
    """

    def __init__(
        self,
        ds: Dataset,
        cfg: SamplerConfig,
        reward_model: RewardModel,
        episode_log: str | Path | None = None,
    ) -> None:
        self.ds = ds
        self.cfg = cfg
        self.reward_model = reward_model
        self.episode_log = Path(episode_log) if episode_log is not None else None
        self.budget = resolve_budget(cfg.budget, len(ds))
        self.sizes = round_sizes(self.budget, cfg.rounds)
        init_seq, draw_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rng = np.random.default_rng(draw_seq)
        self.net = PolicyNet.init(
            ds.feature_dim,
            np.random.default_rng(init_seq),
            hidden=cfg.hidden,
            momentum=cfg.momentum,
        )
        self.baseline = BaselineState(kind=cfg.baseline, decay=cfg.baseline_decay)
        self.pool_reward = 0.0
        self.features = np.asarray(ds.features, dtype=np.float64)
        self.coords = ds.coords()
        self.pool: list[int] = []
        self.episodes: list[Episode] = []
        self._sampled = np.zeros(len(ds), dtype=bool)

    @property
    def done(self) -> bool:
        return len(self.episodes) >= len(self.sizes)

    def _reward(self, new_ids: list[int]) -> RewardBreakdown:
        scope = self.pool if self.reward_model.cfg.reward_scope == "pool" else new_ids
        batch = self.ds.reveal(scope)
        rows = self.ds.index_of(batch.spot_ids)
        return self.reward_model.score(self.reward_model.embed(batch), self.coords[rows])

    def _gain(self, reward: RewardBreakdown) -> float:
        """Scalar return of the round.

        Under pool scope this is the round's contribution, the combined pool
        reward minus the previous round's; batch scope uses the batch reward.
        """
        if self.reward_model.cfg.reward_scope != "pool":
            return reward.combined
        gain = reward.combined - self.pool_reward
        self.pool_reward = reward.combined
        return gain

    def step(self) -> Episode:
        """Run the next round and return its episode."""
        t = len(self.episodes)
        if self.done:
            raise BudgetError("sampling budget already exhausted")
        k = self.sizes[t]
        candidates = np.flatnonzero(~self._sampled)
        feats = self.features[candidates]
        scores = policy_scores(self.net, feats)

        warmup = t == 0 and self.cfg.warmup_random
        if warmup:
            order = self.rng.permutation(candidates.size)[:k]
            log_prob, _ = sequential_log_prob(scores, order)
        else:
            order, log_prob = sample_from_scores(scores, k, self.rng)

        rows = candidates[order]
        chosen = [int(i) for i in self.ds.spot_ids[rows]]
        self._sampled[rows] = True
        self.ds.reveal(chosen)
        self.pool.extend(chosen)

        reward = self._reward(chosen)
        gain = self._gain(reward)
        if warmup:
            # Warm-up picks are not policy draws: zero advantage, and the
            # baseline starts from the first policy round.
            baseline_before = self.baseline.current
            self.net, _ = reinforce_update(
                self.net, feats, order, baseline_before, self.cfg.lr, self.baseline
            )
        else:
            if not self.baseline.observed:
                self.baseline = self.baseline.updated(gain)
            baseline_before = self.baseline.current
            self.net, self.baseline = reinforce_update(
                self.net, feats, order, gain, self.cfg.lr, self.baseline
            )
        episode = Episode(
            round=t,
            spot_ids=chosen,
            log_prob=min(log_prob, 0.0),
            reward=reward,
            gain=gain,
            baseline=baseline_before,
            warmup=warmup,
        )
        self.episodes.append(episode)
        if self.episode_log is not None:
            append_jsonl(self.episode_log, episode.model_dump(mode="json"))
        logger.info(
            "Sampling round",
            round=t,
            k=k,
            pool=len(self.pool),
            warmup=warmup,
            log_prob=episode.log_prob,
            baseline=baseline_before,
            gain=gain,
            **reward.model_dump(),
        )
        return episode

    def run(self) -> SamplingResult:
        while not self.done:
            self.step()
        return SamplingResult(pool=list(self.pool), episodes=list(self.episodes), policy=self.net)


def run_active_sampling(
    ds: Dataset,
    cfg: SamplerConfig,
    reward_model: RewardModel,
    episode_log: str | Path | None = None,
) -> SamplingResult:
    """Sample exactly the budget from ``ds`` and return the pool and episode log.

    Raises:
        BudgetError: the budget exceeds the number of spots.
    """
    return ActiveSampler(ds, cfg, reward_model, episode_log=episode_log).run()