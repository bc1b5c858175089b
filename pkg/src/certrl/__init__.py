"""Certified robustness for reinforcement-learning policies via interval bounds."""

import os

# CERTRL_THREADS caps the BLAS thread pools; it has to be set before numpy loads.
if os.environ.get("CERTRL_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CERTRL_THREADS"])

__version__ = "0.1.0"

from .box import Box, concat  # noqa: E402
from .certify import (AbstractTrace, CertConfig, NotCertifiable, abstract_rollout,  # noqa: E402
                      theorem1_bound, verify_certificate, wcar)
from .envs import PerturbationSpec, make_env  # noqa: E402
from .mlp import Mlp  # noqa: E402
from .model import GaussianModel, GaussianPolicy, fit_model  # noqa: E402
from .train import TrainConfig, train  # noqa: E402
from .attack import AttackConfig, attack_state, attacked_return  # noqa: E402

__all__ = [
    "AbstractTrace", "AttackConfig", "Box", "CertConfig", "GaussianModel", "GaussianPolicy",
    "Mlp", "NotCertifiable", "PerturbationSpec", "TrainConfig", "abstract_rollout",
    "attack_state", "attacked_return", "concat", "fit_model", "make_env", "theorem1_bound",
    "train", "verify_certificate", "wcar",
]
