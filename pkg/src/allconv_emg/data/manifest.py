import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from allconv_emg.data.trialio import read_trial
from allconv_emg.errors import FormatError


@dataclass(frozen=True)
class TrialEntry:
    path: str
    subject: int
    session: int
    gesture: int
    trial: int
    num_frames: int = 0

    @property
    def key(self) -> tuple:
        return (self.subject, self.session, self.gesture, self.trial)


@dataclass
class DatasetManifest:
    dataset_tag: str
    gestures: int
    subjects: list
    sessions: list
    trials_per_gesture: int
    entries: list = field(default_factory=list)
    sample_rate: int = 1000
    root: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.key in seen:
                raise FormatError(f"duplicate trial key (subject, session, gesture, trial) = {e.key}")
            seen.add(e.key)

    def entry(self, key: tuple) -> TrialEntry:
        for e in self.entries:
            if e.key == key:
                return e
        raise KeyError(key)

    def select(self, subject=None, session=None, gesture=None, trial=None) -> list[TrialEntry]:
        out = []
        for e in self.entries:
            if subject is not None and e.subject != subject:
                continue
            if session is not None and e.session != session:
                continue
            if gesture is not None and e.gesture != gesture:
                continue
            if trial is not None and e.trial != trial:
                continue
            out.append(e)
        return out

    def resolve(self, entry: TrialEntry) -> Path:
        return self.root / entry.path

    def to_json(self) -> str:
        doc = {
            "dataset_tag": self.dataset_tag,
            "gestures": self.gestures,
            "subjects": list(self.subjects),
            "sessions": list(self.sessions),
            "trials_per_gesture": self.trials_per_gesture,
            "sample_rate": self.sample_rate,
            "trials": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    def validate(self) -> None:
        """Cross-check every trial file header against its manifest entry."""
        for e in self.entries:
            t = read_trial(self.resolve(e))
            if t.key != e.key:
                raise FormatError(f"{e.path}: header key {t.key} does not match manifest entry {e.key}")
            if e.num_frames and t.num_frames != e.num_frames:
                raise FormatError(f"{e.path}: {t.num_frames} frames on disk, manifest says {e.num_frames}")
            if t.sample_rate != self.sample_rate:
                raise FormatError(f"{e.path}: sample rate {t.sample_rate} != manifest {self.sample_rate}")


def load_manifest(path, validate: bool = False) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot load manifest ({exc})") from exc
    try:
        entries = [TrialEntry(**t) for t in doc["trials"]]
        manifest = DatasetManifest(
            dataset_tag=doc["dataset_tag"],
            gestures=int(doc["gestures"]),
            subjects=[int(s) for s in doc["subjects"]],
            sessions=[int(s) for s in doc["sessions"]],
            trials_per_gesture=int(doc["trials_per_gesture"]),
            entries=entries,
            sample_rate=int(doc.get("sample_rate", 1000)),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if validate:
        manifest.validate()
    return manifest
