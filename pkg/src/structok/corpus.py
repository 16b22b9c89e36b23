"""Patient-record data model, JSONL parsing/serialization, and synthetic corpora.

A record is one JSON object per line:

    {"patient_id": str,
     "visits": [{"date": int YYYYMMDD, "codes": [str, ...]}, ...],
     "current_text": str?,          # clinical note of the current visit
     "labels": {task: payload}?}    # payload: 0/1 flag or list of code strings

Visits are kept sorted ascending by date (stable on ties). Canonicalization
sorts a visit's codes lexicographically and deduplicates; it is a separate
step from parsing so that ablations can keep duplicates.
"""

from __future__ import annotations

import datetime
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

# Filler vocabulary for synthetic clinical notes; content-free by design.
_FILLER_TOKENS = tuple(f"note{j}" for j in range(24))


def check_code(value: str) -> str:
    """Validate a medical-code string: non-empty, printable, no whitespace."""
    if not isinstance(value, str) or not value:
        raise ValidationError(f"code must be a non-empty string, got {value!r}")
    if any(ch.isspace() for ch in value) or not value.isprintable():
        raise ValidationError(f"code contains whitespace or unprintable characters: {value!r}")
    return value


def check_date(date: int) -> int:
    """Validate an integer YYYYMMDD calendar date."""
    if not isinstance(date, int) or isinstance(date, bool):
        raise ValidationError(f"date must be an integer YYYYMMDD, got {date!r}")
    year, month, day = date // 10000, (date // 100) % 100, date % 100
    if year < 1000:
        raise ValidationError(f"date {date} is not in YYYYMMDD form")
    try:
        datetime.date(year, month, day)
    except ValueError:
        raise ValidationError(f"date {date} is not a valid calendar date") from None
    return date


@dataclass(frozen=True)
class Visit:
    """One dated encounter carrying an ordered list of medical codes."""

    date: int
    codes: tuple[str, ...]


@dataclass(frozen=True)
class PatientTimeline:
    """Date-ordered visits for one patient, plus optional current-visit text and labels."""

    patient_id: str
    visits: tuple[Visit, ...]
    current_text: str | None = None
    labels: dict | None = None


@dataclass(frozen=True)
class Corpus:
    patients: tuple[PatientTimeline, ...]
    code_universe: tuple[str, ...]  # sorted union of codes over all visits


def canonicalize_visit(v: Visit, keep_duplicates: bool = False) -> Visit:
    """Sort codes ascending lexicographically; drop duplicates unless asked not to.

    An empty result is returned as-is; callers decide whether to drop it.
    """
    codes = sorted(v.codes) if keep_duplicates else sorted(set(v.codes))
    return Visit(date=v.date, codes=tuple(codes))


def canonicalize_timeline(t: PatientTimeline, keep_duplicates: bool = False) -> tuple[PatientTimeline, int]:
    """Canonicalize every visit and drop empty ones; returns (timeline, dropped count)."""
    visits = [canonicalize_visit(v, keep_duplicates) for v in t.visits]
    kept = tuple(v for v in visits if v.codes)
    return replace(t, visits=kept), len(visits) - len(kept)


def parse_record(json_line: str, line_no: int | None = None) -> PatientTimeline:
    """Parse one JSONL record into a PatientTimeline.

    Visits are sorted ascending by date (stable on ties); codes are preserved
    verbatim, canonicalization happens separately.
    """
    try:
        obj = json.loads(json_line)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", line=line_no, offset=e.pos) from None
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object")

    for name in ("patient_id", "visits"):
        if name not in obj:
            raise SchemaError(f"missing required field '{name}'")
    patient_id = obj["patient_id"]
    if not isinstance(patient_id, str) or not patient_id:
        raise SchemaError("field 'patient_id' must be a non-empty string")
    raw_visits = obj["visits"]
    if not isinstance(raw_visits, list):
        raise SchemaError("field 'visits' must be an array")

    visits = []
    for i, rv in enumerate(raw_visits):
        if not isinstance(rv, dict) or "date" not in rv or "codes" not in rv:
            raise SchemaError(f"visit {i} must be an object with 'date' and 'codes'")
        date = check_date(rv["date"])
        codes = rv["codes"]
        if not isinstance(codes, list):
            raise SchemaError(f"visit {i} field 'codes' must be an array")
        visits.append(Visit(date=date, codes=tuple(check_code(c) for c in codes)))
    visits.sort(key=lambda v: v.date)  # stable: input order preserved on ties

    current_text = obj.get("current_text")
    if current_text is not None and not isinstance(current_text, str):
        raise SchemaError("field 'current_text' must be a string")
    labels = obj.get("labels")
    if labels is not None and not isinstance(labels, dict):
        raise SchemaError("field 'labels' must be an object")

    return PatientTimeline(
        patient_id=patient_id,
        visits=tuple(visits),
        current_text=current_text,
        labels=labels,
    )


def serialize_record(t: PatientTimeline) -> str:
    """Serialize a timeline to its one-line JSON form (inverse of parse_record)."""
    obj: dict = {
        "patient_id": t.patient_id,
        "visits": [{"date": v.date, "codes": list(v.codes)} for v in t.visits],
    }
    if t.current_text is not None:
        obj["current_text"] = t.current_text
    if t.labels is not None:
        obj["labels"] = t.labels
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def build_corpus(patients: list[PatientTimeline]) -> Corpus:
    """Assemble a Corpus, computing the code universe and checking id uniqueness."""
    seen: set[str] = set()
    universe: set[str] = set()
    for t in patients:
        if t.patient_id in seen:
            raise DataError(f"duplicate patient_id '{t.patient_id}'")
        seen.add(t.patient_id)
        for v in t.visits:
            universe.update(v.codes)
    return Corpus(patients=tuple(patients), code_universe=tuple(sorted(universe)))


def load_corpus(path, canonicalize: bool = True) -> Corpus:
    """Load a JSONL corpus; optionally canonicalize visits and drop empty ones.

    Any record error aborts with file:line context. Dropped empty visits are
    counted and reported with a single warning.
    """
    patients: list[PatientTimeline] = []
    dropped = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                t = parse_record(line, line_no=line_no)
            except DataError as e:
                raise type(e)(f"{path}:{line_no}: {e}") from None
            if canonicalize:
                t, n = canonicalize_timeline(t)
                dropped += n
            patients.append(t)
    if dropped:
        logger.warning("dropped %d empty visit(s) while loading %s", dropped, path)
    return build_corpus(patients)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in corpus.patients:
            f.write(serialize_record(t) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpora with planted co-occurrence structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic-corpus generator.

    Each latent condition owns a fixed group of `group_size` codes drawn from a
    contiguous block of the (lexicographically sorted) code space, so that
    codes of one condition sort near each other, the way related codes in a
    hierarchical coding scheme share prefixes. Conditions persist across
    visits with probability `chronic_prob`; an active condition emits its full
    group with probability `cooccur_prob`, otherwise a uniformly chosen
    non-empty strict subset. Noise codes are drawn from the non-condition
    pool at rate `noise_rate` per visit.

    `text_template_vocab` is the number of distinct symptom tokens shared by
    the conditions (condition i uses token i mod text_template_vocab), so the
    current-visit note identifies active conditions only up to collisions.
    """

    n_patients: int = 1000
    n_codes: int = 500
    n_conditions: int = 40
    group_size: int = 3
    cooccur_prob: float = 0.9
    chronic_prob: float = 0.7
    noise_rate: float = 2.0
    visits_mean: float = 8.0
    text_template_vocab: int = 12
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_patients, self.n_codes, self.n_conditions, self.group_size) < 1:
            raise ConfigError("counts must be positive")
        if self.n_conditions * self.group_size > self.n_codes:
            raise ConfigError("n_conditions * group_size must not exceed n_codes")
        for name in ("cooccur_prob", "chronic_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.noise_rate < 0 or self.visits_mean < 2:
            raise ConfigError("noise_rate must be >= 0 and visits_mean >= 2")
        if self.text_template_vocab < 1:
            raise ConfigError("text_template_vocab must be >= 1")


@dataclass(frozen=True)
class Condition:
    id: int
    codes: tuple[str, ...]
    text_token: str


@dataclass(frozen=True)
class GroundTruth:
    """Which code groups belong to which latent condition; used by acceptance tests."""

    conditions: tuple[Condition, ...]
    patient_conditions: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "conditions": [
                {"id": c.id, "codes": list(c.codes), "text_token": c.text_token}
                for c in self.conditions
            ],
            "patient_conditions": {pid: list(ids) for pid, ids in self.patient_conditions.items()},
        }
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        obj = json.loads(text)
        conditions = tuple(
            Condition(id=c["id"], codes=tuple(c["codes"]), text_token=c["text_token"])
            for c in obj["conditions"]
        )
        patient_conditions = {pid: tuple(ids) for pid, ids in obj["patient_conditions"].items()}
        return cls(conditions=conditions, patient_conditions=patient_conditions)


def _strict_subset(rng: np.random.Generator, group: tuple[str, ...]) -> list[str]:
    # uniform over non-empty strict subsets, via a bitmask in [1, 2^g - 2]
    mask = 1 + int(rng.integers(2 ** len(group) - 2))
    return [c for j, c in enumerate(group) if mask >> j & 1]


def generate_synthetic(cfg: SynthConfig) -> tuple[Corpus, GroundTruth]:
    """Generate a corpus with planted condition groups and longitudinal signal.

    Deterministic given cfg.seed. Every patient gets >= 2 visits; the final
    visit plays the role of the current encounter: its code set becomes the
    'new_code_assignment' label (the encoder is expected to see only the
    preceding history), and its active conditions drive the clinical note.
    Binary labels 'cond{i}_present' (i < 3) flag whether condition i was
    active anywhere in the history visits.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    width = max(4, len(str(cfg.n_codes - 1)))
    codes = [f"C{i:0{width}d}" for i in range(cfg.n_codes)]

    # Each condition samples its group inside a private contiguous block.
    block = cfg.n_codes // cfg.n_conditions
    conditions: list[Condition] = []
    condition_code_idx: set[int] = set()
    for i in range(cfg.n_conditions):
        lo = i * block
        picks = sorted(rng.choice(np.arange(lo, lo + block), size=cfg.group_size, replace=False).tolist())
        condition_code_idx.update(picks)
        conditions.append(
            Condition(
                id=i,
                codes=tuple(codes[j] for j in picks),
                text_token=f"sym{i % cfg.text_template_vocab}",
            )
        )
    noise_pool = [codes[j] for j in range(cfg.n_codes) if j not in condition_code_idx]

    pid_width = max(4, len(str(cfg.n_patients - 1)))
    n_binary = min(3, cfg.n_conditions)
    patients: list[PatientTimeline] = []
    patient_conditions: dict[str, tuple[int, ...]] = {}

    for p in range(cfg.n_patients):
        pid = f"p{p:0{pid_width}d}"
        n_visits = 2 + int(rng.poisson(max(0.0, cfg.visits_mean - 2)))

        start = datetime.date(2015, 1, 1) + datetime.timedelta(days=int(rng.integers(0, 365)))
        dates = []
        day = start
        for _ in range(n_visits):
            dates.append(day.year * 10000 + day.month * 100 + day.day)
            day += datetime.timedelta(days=int(rng.integers(7, 61)))

        n0 = min(cfg.n_conditions, 1 + int(rng.poisson(0.8)))
        active = set(rng.choice(cfg.n_conditions, size=n0, replace=False).tolist())
        ever_active: set[int] = set()
        active_per_visit: list[set[int]] = []

        visits = []
        for v in range(n_visits):
            if v > 0:
                survivors = {c for c in sorted(active) if rng.random() < cfg.chronic_prob}
                inactive = [c for c in range(cfg.n_conditions) if c not in survivors]
                n_new = min(len(inactive), int(rng.poisson(0.5)))
                if n_new:
                    survivors.update(rng.choice(inactive, size=n_new, replace=False).tolist())
                active = survivors
            ever_active.update(active)
            active_per_visit.append(set(active))

            emitted: set[str] = set()
            for c in sorted(active):
                group = conditions[c].codes
                if rng.random() < cfg.cooccur_prob or len(group) == 1:
                    emitted.update(group)
                else:
                    emitted.update(_strict_subset(rng, group))
            n_noise = int(rng.poisson(cfg.noise_rate))
            if n_noise and noise_pool:
                emitted.update(rng.choice(noise_pool, size=n_noise, replace=True).tolist())
            if not emitted and cfg.noise_rate > 0 and noise_pool:
                # keep benchmark timelines free of empty visits
                emitted.add(noise_pool[int(rng.integers(len(noise_pool)))])
            visits.append(Visit(date=dates[v], codes=tuple(sorted(emitted))))

        final_active = active_per_visit[-1]
        words = [conditions[c].text_token for c in sorted(final_active)]
        # Filler tokens come from a dedicated stream so text styling never
        # perturbs the code draws. Half of them are spurious symptom mentions
        # (ruled-out or unrelated complaints), the way real notes name
        # symptoms the visit's codes never confirm.
        text_rng = np.random.default_rng([cfg.seed, 7, p])
        n_fill = 2 + int(text_rng.poisson(2.0))
        for _ in range(n_fill):
            if text_rng.random() < 0.5:
                words.append(f"sym{int(text_rng.integers(cfg.text_template_vocab))}")
            else:
                words.append(_FILLER_TOKENS[int(text_rng.integers(len(_FILLER_TOKENS)))])

        history_active: set[int] = set()
        for s in active_per_visit[:-1]:
            history_active.update(s)
        labels: dict = {"new_code_assignment": list(visits[-1].codes)}
        for i in range(n_binary):
            labels[f"cond{i}_present"] = int(i in history_active)

        ever_active.update(final_active)
        patient_conditions[pid] = tuple(sorted(ever_active))
        patients.append(
            PatientTimeline(
                patient_id=pid,
                visits=tuple(visits),
                current_text=" ".join(words),
                labels=labels,
            )
        )

    truth = GroundTruth(conditions=tuple(conditions), patient_conditions=patient_conditions)
    return build_corpus(patients), truth
