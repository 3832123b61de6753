"""Trial files, dataset manifests, protocol splits and a synthetic generator."""

from allconv_emg.data.manifest import DatasetManifest, TrialEntry, load_manifest
from allconv_emg.data.splits import (
    BUDGETS,
    Fold,
    SplitPlan,
    budget_trials,
    make_inter_session_split,
    make_inter_subject_splits,
    make_intra_session_splits,
)
from allconv_emg.data.synthetic import SyntheticConfig, generate_synthetic, iter_trials, subject_templates
from allconv_emg.data.trialio import decode_trial, encode_trial, read_trial, write_trial

__all__ = [
    "BUDGETS",
    "DatasetManifest",
    "Fold",
    "SplitPlan",
    "SyntheticConfig",
    "TrialEntry",
    "budget_trials",
    "decode_trial",
    "encode_trial",
    "generate_synthetic",
    "iter_trials",
    "load_manifest",
    "make_inter_session_split",
    "make_inter_subject_splits",
    "make_intra_session_splits",
    "read_trial",
    "subject_templates",
    "write_trial",
]
