"""Coverage-guided greybox fuzzing with a contextual-bandit energy scheduler."""

from .campaign import Campaign, CampaignConfig, run_campaign
from .policy import ByteWindowEncoder, LSTMPolicy
from .scheduler import ACTIONS, Mode, SchedulerConfig

__all__ = [
    "ACTIONS",
    "ByteWindowEncoder",
    "Campaign",
    "CampaignConfig",
    "LSTMPolicy",
    "Mode",
    "SchedulerConfig",
    "run_campaign",
]
