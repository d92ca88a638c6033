"""Transport reversible jump MCMC: maps, targets, samplers and estimators."""

import json as _json

from ._trj import *  # noqa: F401,F403
from ._trj import ExperimentConfig, __version__  # noqa: F401


def config_from_dict(d):
    """ExperimentConfig from a plain dict (same schema as the JSON files)."""
    return ExperimentConfig.from_json(_json.dumps(d))
