from .c51 import C51Agent, CategoricalSupport, c51_project
from .common import (
    Agent,
    AgentConfig,
    EpisodeBuffer,
    ExplorationSchedule,
    ReplayMemory,
    SyncMode,
    TrainingLog,
    build_transitions,
    default_config,
    fit_scaler,
    run_episode,
    select_action,
    train,
    train_step,
)
from .ddqn import DDQNAgent, ddqn_target, dueling_combine
from .iqn import IQNAgent, cosine_features, iqn_embed, quantile_huber_loss

AGENT_CLASSES = {"ddqn": DDQNAgent, "c51": C51Agent, "iqn": IQNAgent}


def make_agent(cfg: AgentConfig, spec, scaler=None, seed: int = 0) -> Agent:
    return AGENT_CLASSES[cfg.algorithm](cfg, spec, scaler, seed)


def load_agent(path) -> Agent:
    """Rebuild an agent (config, spec and both networks) from a checkpoint."""
    from ..core import PayoutSpec
    from ..nn import load_checkpoint

    nets, meta = load_checkpoint(path)
    cfg = AgentConfig.from_dict(meta["config"])
    spec = PayoutSpec(**meta["spec"])
    agent = make_agent(cfg, spec)
    agent._import(nets)
    agent.episodes = meta.get("episodes", 0)
    return agent


__all__ = [
    "Agent", "AgentConfig", "C51Agent", "CategoricalSupport", "DDQNAgent", "EpisodeBuffer",
    "ExplorationSchedule", "IQNAgent", "ReplayMemory", "SyncMode", "TrainingLog",
    "build_transitions", "c51_project", "cosine_features", "ddqn_target", "default_config",
    "dueling_combine", "fit_scaler", "iqn_embed", "load_agent", "make_agent",
    "quantile_huber_loss", "run_episode", "select_action", "train", "train_step",
]
