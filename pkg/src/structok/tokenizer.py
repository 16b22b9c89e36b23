"""Visit-aware BPE tokenizer for medical-code timelines.

Pair counting and merge rules are confined within visit boundaries: a merged
token never spans two visits. Codes inside a visit are sorted lexicographically
before encoding (canonical order), which makes adjacency a deterministic proxy
for within-visit co-occurrence. Element mode skips merges entirely and is the
baseline where every code is its own token.

Token-id layout: PAD=0, UNK=1, BOS=2, EOS=3, VSEP=4, then base codes in
ascending lexicographic order from id 5, then merged tokens in merge order.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Corpus, PatientTimeline, Visit, canonicalize_visit
from .errors import ConfigError, DataError, LayoutError, TokenizerFormatError

PAD, UNK, BOS, EOS, VSEP = 0, 1, 2, 3, 4
SPECIALS = {"PAD": PAD, "UNK": UNK, "BOS": BOS, "EOS": EOS, "VSEP": VSEP}
N_SPECIALS = 5

FORMAT_NAME = "structok-tokenizer"
FORMAT_VERSION = 1
UNK_SURFACE = "[UNK]"


@dataclass(frozen=True)
class MergedToken:
    id: int
    left: int
    right: int
    surface: str  # space-joined constituent base codes, for human audit


@dataclass(frozen=True)
class MergeRule:
    left: int
    right: int
    result: int
    pair_count_at_selection: int | None = None  # None when loaded from file


@dataclass
class Vocabulary:
    base_codes: tuple[str, ...]  # sorted ascending
    merged: list[MergedToken] = field(default_factory=list)

    def __post_init__(self):
        self._code_to_id = {c: N_SPECIALS + i for i, c in enumerate(self.base_codes)}

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.base_codes) + len(self.merged)

    def id_of(self, code: str) -> int:
        return self._code_to_id.get(code, UNK)

    def base_id(self, code: str) -> int | None:
        return self._code_to_id.get(code)


@dataclass(frozen=True)
class TrainerConfig:
    target_vocab_size: int
    min_pair_frequency: int = 2
    max_merges: int | None = None
    canonicalize_input: bool = True

    def validate(self) -> None:
        if self.target_vocab_size < N_SPECIALS:
            raise ConfigError("target_vocab_size must cover the special tokens")
        if self.min_pair_frequency < 1:
            raise ConfigError("min_pair_frequency must be >= 1")
        if self.max_merges is not None and self.max_merges < 0:
            raise ConfigError("max_merges must be >= 0")


@dataclass
class Tokenizer:
    vocab: Vocabulary
    merges: list[MergeRule]
    mode: str = "bpe"
    canonicalize: bool = True

    @property
    def vocab_size(self) -> int:
        return self.vocab.size


def build_base_vocab(corpus: Corpus) -> Vocabulary:
    """Assign ids 5.. to every code in the corpus, in ascending lexicographic order."""
    if not corpus.patients:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if not corpus.code_universe:
        raise DataError("corpus contains no codes")
    return Vocabulary(base_codes=tuple(corpus.code_universe))


def count_pairs(visit_segments: list[list[int]]) -> Counter:
    """Count adjacent ordered id pairs within each visit segment.

    Pairs never span segment boundaries; overlapping occurrences each count.
    """
    counts: Counter = Counter()
    for seg in visit_segments:
        counts.update(zip(seg, seg[1:]))
    return counts


def _merge_pass(seg: list[int], left: int, right: int, result: int) -> list[int]:
    # single greedy leftmost-first pass
    out: list[int] = []
    i = 0
    n = len(seg)
    while i < n:
        if i + 1 < n and seg[i] == left and seg[i + 1] == right:
            out.append(result)
            i += 2
        else:
            out.append(seg[i])
            i += 1
    return out


def select_best_pair(counts: Counter) -> tuple[tuple[int, int], int]:
    """Max-count pair; ties broken by smaller left id, then smaller right id."""
    (l, r), c = min(counts.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    return (l, r), c


def _visit_segments(corpus: Corpus, canonicalize: bool, vocab: Vocabulary) -> list[list[int]]:
    segs: list[list[int]] = []
    for t in corpus.patients:
        for v in t.visits:
            vv = canonicalize_visit(v) if canonicalize else v
            if vv.codes:
                segs.append([vocab.id_of(c) for c in vv.codes])
    return segs


def train(corpus: Corpus, cfg: TrainerConfig) -> Tokenizer:
    """Train merge rules by iterated max-count pair replacement within visits.

    Stops when the best pair falls below min_pair_frequency, or when the
    vocabulary cap / merge budget is reached. Deterministic.
    """
    cfg.validate()
    vocab = build_base_vocab(corpus)
    capacity = cfg.target_vocab_size - vocab.size
    if capacity < 0:
        raise ConfigError(
            f"target_vocab_size {cfg.target_vocab_size} is below the "
            f"{vocab.size} ids needed for specials plus base codes"
        )
    if cfg.max_merges is not None and cfg.max_merges > 0 and capacity == 0:
        raise ConfigError("no merge capacity: target_vocab_size leaves no room for merges")
    budget = capacity if cfg.max_merges is None else min(cfg.max_merges, capacity)

    segs = _visit_segments(corpus, cfg.canonicalize_input, vocab)
    expansions: dict[int, list[str]] = {}

    def expand(tid: int) -> list[str]:
        if tid >= N_SPECIALS + len(vocab.base_codes):
            return expansions[tid]
        return [vocab.base_codes[tid - N_SPECIALS]]

    merges: list[MergeRule] = []
    for _ in range(budget):
        counts = count_pairs(segs)
        if not counts:
            break
        (left, right), count = select_best_pair(counts)
        if count < cfg.min_pair_frequency:
            break
        new_id = vocab.size
        segs = [
            _merge_pass(seg, left, right, new_id)
            if left in seg and (left != right or seg.count(left) > 1) and right in seg
            else seg
            for seg in segs
        ]
        expansions[new_id] = expand(left) + expand(right)
        vocab.merged.append(
            MergedToken(id=new_id, left=left, right=right, surface=" ".join(expansions[new_id]))
        )
        merges.append(MergeRule(left=left, right=right, result=new_id, pair_count_at_selection=count))

    return Tokenizer(vocab=vocab, merges=merges, canonicalize=cfg.canonicalize_input)


def apply_merges(ids: list[int], merges: list[MergeRule]) -> list[int]:
    """Apply merge rules in training order, one greedy leftmost pass each."""
    present = set(ids)
    for rule in merges:
        if rule.left in present and rule.right in present:
            ids = _merge_pass(ids, rule.left, rule.right, rule.result)
            present = set(ids)
    return ids


def encode(
    tok: Tokenizer,
    t: PatientTimeline,
    mode: str | None = None,
    canonicalize: bool | None = None,
) -> list[int]:
    """Encode a timeline as [BOS, visit-1 ids, VSEP, visit-2 ids, ..., EOS].

    Unknown codes map to UNK. BPE mode applies the trained merges within each
    visit; element mode applies none. Empty visits are skipped; a timeline
    with no non-empty visit is an error.
    """
    mode = tok.mode if mode is None else mode
    if mode not in ("bpe", "element"):
        raise ConfigError(f"unknown mode '{mode}' (expected 'bpe' or 'element')")
    if canonicalize is None:
        canonicalize = tok.canonicalize

    out: list[int] = [BOS]
    n_visits = 0
    for v in t.visits:
        vv = canonicalize_visit(v) if canonicalize else v
        if not vv.codes:
            continue
        ids = [tok.vocab.id_of(c) for c in vv.codes]
        if mode == "bpe":
            ids = apply_merges(ids, tok.merges)
        if n_visits:
            out.append(VSEP)
        out.extend(ids)
        n_visits += 1
    if n_visits == 0:
        raise DataError(f"timeline '{t.patient_id}' has no non-empty visit to encode")
    out.append(EOS)
    return out


def check_layout(ids: list[int], vocab_size: int | None = None) -> None:
    """Validate the BOS/visit/VSEP/EOS layout invariant; raise LayoutError otherwise."""
    if vocab_size is not None:
        for tid in ids:
            if not 0 <= tid < vocab_size:
                raise DataError(f"token id {tid} out of vocabulary range [0, {vocab_size})")
    if len(ids) < 3 or ids[0] != BOS or ids[-1] != EOS:
        raise LayoutError("sequence must begin with BOS, end with EOS, and hold >= 1 token")
    interior = ids[1:-1]
    for tid in interior:
        if tid in (PAD, BOS, EOS):
            raise LayoutError("PAD/BOS/EOS may not appear in the sequence interior")
    if interior[0] == VSEP or interior[-1] == VSEP:
        raise LayoutError("visit segments must be non-empty")
    for a, b in zip(interior, interior[1:]):
        if a == VSEP and b == VSEP:
            raise LayoutError("adjacent visit separators imply an empty visit")


def decode(tok: Tokenizer, ids: list[int]) -> list[list[str]]:
    """Expand a well-formed sequence back to per-visit code lists.

    Merged tokens expand recursively to their base codes in order; UNK decodes
    to the literal '[UNK]'.
    """
    check_layout(ids, tok.vocab_size)

    base_end = N_SPECIALS + len(tok.vocab.base_codes)
    table: dict[int, list[str]] = {UNK: [UNK_SURFACE]}

    def expand(tid: int) -> list[str]:
        got = table.get(tid)
        if got is None:
            if tid < base_end:
                got = [tok.vocab.base_codes[tid - N_SPECIALS]]
            else:
                m = tok.vocab.merged[tid - base_end]
                got = expand(m.left) + expand(m.right)
            table[tid] = got
        return got

    visits: list[list[str]] = []
    current: list[str] = []
    for tid in ids[1:-1]:
        if tid == VSEP:
            visits.append(current)
            current = []
        else:
            current.extend(expand(tid))
    visits.append(current)
    return visits


# ---------------------------------------------------------------------------
# Serialization: UTF-8 JSON with a checksum over the canonical payload
# ---------------------------------------------------------------------------

def _canonical_payload(tok: Tokenizer) -> str:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "specials": SPECIALS,
        "base_codes": list(tok.vocab.base_codes),
        "merges": [[m.left, m.right] for m in tok.merges],
    }
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def _checksum(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def serialize(tok: Tokenizer) -> str:
    payload = _canonical_payload(tok)
    # checksum appended as the last key of the same object
    return payload[:-1] + f',"checksum":"{_checksum(payload)}"}}'


def save(tok: Tokenizer, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(tok) + "\n")


def load(path) -> Tokenizer:
    """Load a tokenizer file; verifies format name, version, and checksum."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise TokenizerFormatError(f"{path}: malformed tokenizer JSON: {e.msg}") from None
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_NAME:
        raise TokenizerFormatError(f"{path}: not a {FORMAT_NAME} file")
    if obj.get("version") != FORMAT_VERSION:
        raise TokenizerFormatError(
            f"{path}: unsupported version {obj.get('version')!r} (expected {FORMAT_VERSION})"
        )
    for key in ("specials", "base_codes", "merges", "checksum"):
        if key not in obj:
            raise TokenizerFormatError(f"{path}: missing field '{key}'")
    if obj["specials"] != SPECIALS:
        raise TokenizerFormatError(f"{path}: unexpected special-token table")

    base_codes = tuple(obj["base_codes"])
    if list(base_codes) != sorted(set(base_codes)):
        raise TokenizerFormatError(f"{path}: base_codes must be sorted and unique")
    vocab = Vocabulary(base_codes=base_codes)
    merges: list[MergeRule] = []
    expansions: dict[int, list[str]] = {}

    def expand(tid: int) -> list[str]:
        if tid >= N_SPECIALS + len(base_codes):
            return expansions[tid]
        return [base_codes[tid - N_SPECIALS]]

    for k, pair in enumerate(obj["merges"]):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise TokenizerFormatError(f"{path}: merge {k} must be a [left,right] pair")
        left, right = pair
        new_id = N_SPECIALS + len(base_codes) + k
        if not all(isinstance(x, int) and UNK < x < new_id for x in (left, right)):
            raise TokenizerFormatError(f"{path}: merge {k} references invalid token ids")
        expansions[new_id] = expand(left) + expand(right)
        vocab.merged.append(
            MergedToken(id=new_id, left=left, right=right, surface=" ".join(expansions[new_id]))
        )
        merges.append(MergeRule(left=left, right=right, result=new_id))

    tok = Tokenizer(vocab=vocab, merges=merges)
    expected = _checksum(_canonical_payload(tok))
    if obj["checksum"] != expected:
        raise TokenizerFormatError(f"{path}: checksum mismatch")
    return tok
