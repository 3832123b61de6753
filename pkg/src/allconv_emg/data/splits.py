"""Cross-validation plans for the three evaluation scenarios.

Trial indices are 1-based. "Odd" adaptation trials are 1, 3, 5, 7, 9 and
"even" test trials 2, 4, 6, 8, 10. A partial budget T_k takes the first k
odd trials.
"""

from dataclasses import dataclass, field

from allconv_emg.data.manifest import DatasetManifest
from allconv_emg.errors import ConfigurationError

BUDGETS = {"T1": 1, "T2": 2, "T3": 3, "T4": 4, "T5": 5}
ROLES = ("pretrain", "train", "adaptation", "validation", "test")


def budget_trials(budget: str) -> int:
    try:
        return BUDGETS[budget]
    except KeyError:
        raise ConfigurationError(f"unknown budget {budget!r}; expected one of {sorted(BUDGETS)}") from None


@dataclass(frozen=True)
class Fold:
    scenario: str
    subject: int
    index: int
    session: int | None = None
    budget: str | None = None
    pretrain: frozenset = frozenset()
    train: frozenset = frozenset()
    adaptation: frozenset = frozenset()
    validation: frozenset = frozenset()
    test: frozenset = frozenset()

    @property
    def fold_id(self) -> str:
        sess = f"-sess{self.session}" if self.session is not None else ""
        return f"{self.scenario}-s{self.subject:02d}{sess}-f{self.index:02d}"

    @property
    def training_keys(self) -> frozenset:
        return self.pretrain | self.train | self.adaptation | self.validation

    def check_disjoint(self) -> None:
        sets = [getattr(self, r) for r in ROLES]
        for i in range(len(ROLES)):
            for j in range(i + 1, len(ROLES)):
                common = sets[i] & sets[j]
                if common:
                    raise ConfigurationError(
                        f"{self.fold_id}: roles {ROLES[i]} and {ROLES[j]} share trials {sorted(common)[:3]}"
                    )


@dataclass
class SplitPlan:
    scenario: str
    folds: list = field(default_factory=list)

    def __post_init__(self):
        for f in self.folds:
            f.check_disjoint()

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def _keys(manifest: DatasetManifest, subjects, session, trials) -> frozenset:
    return frozenset(
        e.key for e in manifest.entries if e.subject in subjects and e.session == session and e.trial in trials
    )


def _require_trials(manifest: DatasetManifest, subject: int, session: int, trials) -> None:
    missing = []
    for g in range(manifest.gestures):
        have = {e.trial for e in manifest.select(subject=subject, session=session, gesture=g)}
        gaps = sorted(set(trials) - have)
        if gaps:
            missing.append(f"gesture {g}: trials {gaps}")
    if missing:
        raise ConfigurationError(f"subject {subject} session {session} is missing " + "; ".join(missing))


def make_intra_session_splits(manifest: DatasetManifest, n_trials: int = 10) -> SplitPlan:
    """Leave-one-trial-out per (subject, session).

    Fold i tests on trial i, validates on trial i+1 (wrapping), and trains from
    scratch on the remaining trials.
    """
    trials = list(range(1, n_trials + 1))
    folds = []
    for subject in manifest.subjects:
        for session in manifest.sessions:
            _require_trials(manifest, subject, session, trials)
            for i in trials:
                val = i % n_trials + 1
                train = [t for t in trials if t not in (i, val)]
                folds.append(
                    Fold(
                        scenario="intra_session",
                        subject=subject,
                        session=session,
                        index=i,
                        train=_keys(manifest, [subject], session, train),
                        validation=_keys(manifest, [subject], session, [val]),
                        test=_keys(manifest, [subject], session, [i]),
                    )
                )
    return SplitPlan("intra_session", folds)


def _odd_even(n_trials: int):
    odd = [t for t in range(1, n_trials + 1) if t % 2 == 1]
    even = [t for t in range(1, n_trials + 1) if t % 2 == 0]
    return odd, even


def make_inter_session_split(manifest: DatasetManifest, budget: str = "T5", n_trials: int = 10) -> SplitPlan:
    """Pretrain on session 1, adapt on the first k odd session-2 trials, test on even ones."""
    if len(manifest.sessions) < 2:
        raise ConfigurationError("inter-session split needs two sessions per subject")
    k = budget_trials(budget)
    s1, s2 = sorted(manifest.sessions)[:2]
    odd, even = _odd_even(n_trials)
    folds = []
    for subject in manifest.subjects:
        _require_trials(manifest, subject, s1, range(1, n_trials + 1))
        _require_trials(manifest, subject, s2, range(1, n_trials + 1))
        folds.append(
            Fold(
                scenario="inter_session",
                subject=subject,
                session=s2,
                index=1,
                budget=budget,
                pretrain=_keys(manifest, [subject], s1, range(1, n_trials + 1)),
                adaptation=_keys(manifest, [subject], s2, odd[:k]),
                test=_keys(manifest, [subject], s2, even),
            )
        )
    return SplitPlan("inter_session", folds)


def make_inter_subject_splits(
    manifest: DatasetManifest, budget: str = "T5", session: int | None = None, n_trials: int = 10
) -> SplitPlan:
    """Leave-one-subject-out within one session (the last one by default)."""
    if len(manifest.subjects) < 2:
        raise ConfigurationError("inter-subject split needs at least two subjects")
    k = budget_trials(budget)
    session = max(manifest.sessions) if session is None else session
    if session not in manifest.sessions:
        raise ConfigurationError(f"session {session} not in manifest sessions {manifest.sessions}")
    odd, even = _odd_even(n_trials)
    folds = []
    for i, held_out in enumerate(manifest.subjects, start=1):
        _require_trials(manifest, held_out, session, range(1, n_trials + 1))
        others = [s for s in manifest.subjects if s != held_out]
        folds.append(
            Fold(
                scenario="inter_subject",
                subject=held_out,
                session=session,
                index=i,
                budget=budget,
                pretrain=_keys(manifest, others, session, range(1, n_trials + 1)),
                adaptation=_keys(manifest, [held_out], session, odd[:k]),
                test=_keys(manifest, [held_out], session, even),
            )
        )
    return SplitPlan("inter_subject", folds)
