#!/usr/bin/env python3
"""Regenerate the golden parity fixtures from the reference CLI.

Run from the frontend/ directory:  python3 scripts/make_golden.py
"""

import json
import pathlib
import subprocess
import sys

HERE = pathlib.Path(__file__).resolve().parent.parent
GOLDEN = HERE / "golden"
GOLDEN.mkdir(exist_ok=True)


def cli(*args):
    subprocess.run([sys.executable, "-m", "structok", "--threads", "1", *map(str, args)],
                   check=True, capture_output=True)


def main():
    corpus = GOLDEN / "corpus.jsonl"
    cli("synth", "--patients", 50, "--codes", 60, "--conditions", 5,
        "--seed", 13, "--out", corpus, "--truth", GOLDEN / "truth.json")
    cli("train-tokenizer", "--input", corpus, "--vocab-size", 75,
        "--min-pair-freq", 2, "--out", GOLDEN / "tok.json")
    cli("train-tokenizer", "--input", corpus, "--vocab-size", 75,
        "--max-merges", 0, "--out", GOLDEN / "tok_element.json")
    cli("encode", "--tokenizer", GOLDEN / "tok.json", "--mode", "bpe",
        "--input", corpus, "--out", GOLDEN / "tokens_bpe.jsonl")
    cli("encode", "--tokenizer", GOLDEN / "tok.json", "--mode", "element",
        "--input", corpus, "--out", GOLDEN / "tokens_element.jsonl")

    # single-token group case: one recurring 3-code visit merges to one id
    group_corpus = GOLDEN / "corpus_group.jsonl"
    lines = [
        {"patient_id": f"g{i}", "visits": [{"date": 20200101 + i,
                                            "codes": ["32147", "32369", "32906"]}]}
        for i in range(6)
    ]
    group_corpus.write_text("".join(json.dumps(o, separators=(",", ":")) + "\n" for o in lines))
    cli("train-tokenizer", "--input", group_corpus, "--vocab-size", 20,
        "--out", GOLDEN / "tok_group.json")
    cli("encode", "--tokenizer", GOLDEN / "tok_group.json", "--mode", "bpe",
        "--input", group_corpus, "--out", GOLDEN / "tokens_group.jsonl")

    # decode expectations, produced by the reference implementation
    from structok import tokenizer as T

    tok = T.load(GOLDEN / "tok.json")
    decoded = {}
    with open(GOLDEN / "tokens_bpe.jsonl", encoding="utf-8") as f:
        for line in f:
            obj = json.loads(line)
            decoded[obj["patient_id"]] = T.decode(tok, obj["ids"])
    (GOLDEN / "decoded_bpe.json").write_text(
        json.dumps(decoded, ensure_ascii=False, separators=(",", ":")) + "\n")
    print(f"golden fixtures written to {GOLDEN}")


if __name__ == "__main__":
    main()
