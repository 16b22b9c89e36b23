#!/usr/bin/env python3
"""Visit-aware BPE on synthetic patient timelines.

Generates a small corpus with planted co-occurrence groups, trains merge
rules, and walks through what the tokenizer learned: which code groups became
single tokens, how a timeline encodes in BPE vs element mode, and that
decoding inverts encoding.
"""

from structok import tokenizer as T
from structok.corpus import SynthConfig, generate_synthetic

cfg = SynthConfig(n_patients=300, n_codes=120, n_conditions=10, seed=42)
corpus, truth = generate_synthetic(cfg)
print(f"corpus: {len(corpus.patients)} patients, {len(corpus.code_universe)} distinct codes")
print(f"planted: {len(truth.conditions)} condition groups of size {cfg.group_size}\n")

budget = 2 * cfg.n_conditions
tok = T.train(corpus, T.TrainerConfig(target_vocab_size=5 + 120 + budget))
print(f"trained {len(tok.merges)} merges (budget {budget}); vocab size {tok.vocab_size}")

planted = {" ".join(c.codes): c.id for c in truth.conditions}
print("\nmerged tokens that are exactly a planted group:")
for m in tok.vocab.merged:
    if m.surface in planted:
        print(f"  id {m.id}: [{m.surface}]  = condition {planted[m.surface]}")

recovered = sum(1 for s in planted if s in {m.surface for m in tok.vocab.merged})
print(f"\nrecovered {recovered}/{len(planted)} groups as single tokens")

patient = corpus.patients[0]
print(f"\npatient {patient.patient_id}: {len(patient.visits)} visits")
for v in patient.visits[:3]:
    print(f"  {v.date}: {' '.join(v.codes)}")

bpe_ids = T.encode(tok, patient, mode="bpe")
el_ids = T.encode(tok, patient, mode="element")
print(f"\nBPE encoding      ({len(bpe_ids):3d} ids): {bpe_ids[:18]} ...")
print(f"element encoding  ({len(el_ids):3d} ids): {el_ids[:18]} ...")
print(f"compression: {len(el_ids) / len(bpe_ids):.2f}x")

assert T.decode(tok, bpe_ids) == T.decode(tok, el_ids)
print("\ndecode(encode(t)) reproduces the canonicalized visits in both modes")
