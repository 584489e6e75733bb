"""Model-backed driving agent: sample candidate waypoint plans from the
trajectory flow, rank them by likelihood plus goal proximity, and turn
the leading waypoint into throttle/steer/brake."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, context_for, forward_log_prob, sample_many
from .raster import Observation
from .world import Action


@dataclass(frozen=True)
class AgentConfig:
    num_candidates: int = 16     # flow samples ranked per replan
    goal_weight: float = 3.0     # score bonus per meter closer to the goal
    lookahead: int = 5           # waypoint index (1-based) used for control
    heading_gain: float = 3.2
    speed_gain: float = 0.9
    brake_gain: float = 2.4      # braking side of the speed P-control
    replan_every: int = 2        # steps between plans
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.lookahead < 1:
            raise ValueError("lookahead must be >= 1")
        if self.goal_weight < 0.0:
            raise ValueError("goal_weight must be >= 0")
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")


@dataclass
class Plan:
    trajectories: np.ndarray   # (K, T, 2) ego frame
    scores: np.ndarray         # (K,)
    chosen: int


def make_plan(params, model_config: ModelConfig, agent_config: AgentConfig,
              grid, lam3, past, goal, zs) -> Plan:
    """Score |zs| flow samples by log-likelihood plus goal proximity and
    pick the argmax (ties break toward the lowest candidate index)."""
    ctx = context_for(params, model_config, grid, lam3, past)
    trajs = sample_many(params, model_config, ctx, zs)
    K = len(trajs)
    log_q, _ = forward_log_prob(
        params, model_config, np.repeat(np.atleast_2d(ctx), K, axis=0), trajs
    )
    goal = np.asarray(goal, dtype=np.float64)
    dist = np.linalg.norm(trajs[:, -1, :] - goal[None, :], axis=1)
    scores = log_q - agent_config.goal_weight * dist
    keep = np.isfinite(scores)
    if not keep.any():
        raise ValueError("every candidate plan scored non-finite")
    trajs, scores = trajs[keep], scores[keep]
    return Plan(trajs, scores, int(np.argmax(scores)))


class WaypointAgent:
    """Stateful act() wrapper: replans every ``replan_every`` steps and
    tracks which plan step the ego should currently be chasing."""

    def __init__(self, params, model_config: ModelConfig,
                 agent_config: AgentConfig = AgentConfig()):
        if agent_config.lookahead > model_config.horizon:
            raise ValueError("lookahead exceeds the model horizon")
        self.params = np.asarray(params, dtype=np.float64)
        self.model_config = model_config
        self.config = agent_config
        self.reset()

    def reset(self):
        self._plan = None
        self._steps_since_plan = 0
        self._plan_count = 0

    def _draw(self) -> np.ndarray:
        """Candidate 0 is always z=0 (the flow mean); the rest are seeded
        standard-normal draws, fresh per replan."""
        K, T = self.config.num_candidates, self.model_config.horizon
        zs = np.zeros((K, T, 2))
        if K > 1:
            rng = np.random.default_rng(np.random.SeedSequence(
                [self.config.seed & 0x7FFFFFFF, self._plan_count]))
            zs[1:] = rng.standard_normal((K - 1, T, 2))
        return zs

    def plan(self, obs: Observation, past, goal) -> Plan:
        from .dataset import lam_vector

        self._plan_count += 1
        return make_plan(self.params, self.model_config, self.config,
                         obs.visual_features, lam_vector(obs), past, goal,
                         self._draw())

    def act(self, obs: Observation, past, goal) -> Action:
        cfg = self.config
        if self._plan is None or self._steps_since_plan >= cfg.replan_every:
            self._plan = self.plan(obs, past, goal)
            self._steps_since_plan = 0
        plan = self._plan
        # between replans, chase the correspondingly later waypoint
        idx = min(cfg.lookahead - 1 + self._steps_since_plan,
                  self.model_config.horizon - 1)
        self._steps_since_plan += 1
        wp = plan.trajectories[plan.chosen, idx]

        alpha = math.atan2(wp[1], wp[0])
        steer = max(-1.0, min(1.0, cfg.heading_gain * alpha))
        target_speed = float(np.linalg.norm(wp)) / ((idx + 1) * cfg.dt)
        err = target_speed - obs.velocity
        throttle = max(0.0, min(1.0, cfg.speed_gain * err))
        brake = max(0.0, min(1.0, cfg.brake_gain * (-err - 0.3)))
        return Action(throttle, steer, brake)
