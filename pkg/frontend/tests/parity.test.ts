// Byte-level parity with the reference CLI on the committed golden fixtures.
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import {
  BOS,
  EOS,
  TokenizerError,
  bindDecode,
  bindEncode,
  bindLoad,
  bindSave,
  bindTrain,
  canonicalizeCodes,
  parseCorpus,
} from "../src/index.js";

const GOLDEN = join(dirname(fileURLToPath(import.meta.url)), "..", "golden");

function goldenText(name: string): string {
  return readFileSync(join(GOLDEN, name), "utf8");
}

function corpusVisits(): Map<string, string[][]> {
  const out = new Map<string, string[][]>();
  for (const t of parseCorpus(goldenText("corpus.jsonl"))) {
    out.set(
      t.patientId,
      t.visits.map((v) => v.codes),
    );
  }
  return out;
}

describe("tokenizer file parity", () => {
  it("loads the CLI tokenizer and re-serializes byte-identically", () => {
    const tok = bindLoad(join(GOLDEN, "tok.json"));
    expect(tok.serialize() + "\n").toBe(goldenText("tok.json"));
  });

  it("save(load(x)) is a byte fixpoint", () => {
    const tok = bindLoad(join(GOLDEN, "tok.json"));
    const dir = mkdtempSync(join(tmpdir(), "structok-"));
    const out = join(dir, "roundtrip.json");
    bindSave(tok, out);
    expect(readFileSync(out, "utf8")).toBe(goldenText("tok.json"));
  });

  it("training from the corpus reproduces the CLI tokenizer bytes", () => {
    const tok = bindTrain(join(GOLDEN, "corpus.jsonl"), {
      targetVocabSize: 75,
      minPairFrequency: 2,
    });
    expect(tok.serialize() + "\n").toBe(goldenText("tok.json"));
  });

  it("training with zero merges reproduces the element tokenizer", () => {
    const tok = bindTrain(join(GOLDEN, "corpus.jsonl"), {
      targetVocabSize: 75,
      maxMerges: 0,
    });
    expect(tok.serialize() + "\n").toBe(goldenText("tok_element.json"));
  });

  it("rejects corrupted files without dying", () => {
    expect(() => bindLoad(join(GOLDEN, "corpus.jsonl"))).toThrow(TokenizerError);
    // still alive and usable afterwards
    const tok = bindLoad(join(GOLDEN, "tok.json"));
    expect(tok.vocabSize).toBeGreaterThan(5);
  });
});

describe("encode parity", () => {
  for (const mode of ["bpe", "element"] as const) {
    it(`matches CLI encode --mode ${mode} byte-for-byte`, () => {
      const tok = bindLoad(join(GOLDEN, "tok.json"));
      const visits = corpusVisits();
      const lines: string[] = [];
      for (const [patientId, vs] of visits) {
        const ids = bindEncode(tok, vs, mode);
        lines.push(JSON.stringify({ patient_id: patientId, ids }));
      }
      expect(lines.join("\n") + "\n").toBe(goldenText(`tokens_${mode}.jsonl`));
    });
  }

  it("encodes the recurring 3-code visit as a single token", () => {
    const tok = bindLoad(join(GOLDEN, "tok_group.json"));
    const ids = bindEncode(tok, [["32147", "32369", "32906"]], "bpe");
    expect(ids).toHaveLength(3);
    expect(ids[0]).toBe(BOS);
    expect(ids[2]).toBe(EOS);
    expect(ids[1]).toBeGreaterThanOrEqual(5 + 3); // a merged id, not a base code
    const golden = goldenText("tokens_group.jsonl")
      .trim()
      .split("\n")
      .map((l) => JSON.parse(l));
    for (const row of golden) {
      expect(ids).toEqual(row.ids);
    }
  });
});

describe("decode parity", () => {
  it("matches the reference decode expectations", () => {
    const tok = bindLoad(join(GOLDEN, "tok.json"));
    const expected = JSON.parse(goldenText("decoded_bpe.json"));
    for (const line of goldenText("tokens_bpe.jsonl").trim().split("\n")) {
      const { patient_id, ids } = JSON.parse(line);
      expect(bindDecode(tok, ids)).toEqual(expected[patient_id]);
    }
  });

  it("round-trips encode->decode to canonicalized visits", () => {
    const tok = bindLoad(join(GOLDEN, "tok.json"));
    for (const [, vs] of corpusVisits()) {
      const canon = vs.map((v) => canonicalizeCodes(v)).filter((v) => v.length > 0);
      for (const mode of ["bpe", "element"] as const) {
        expect(bindDecode(tok, bindEncode(tok, vs, mode))).toEqual(canon);
      }
    }
  });

  it("rejects malformed layouts", () => {
    const tok = bindLoad(join(GOLDEN, "tok.json"));
    expect(() => bindDecode(tok, [BOS, EOS, EOS])).toThrow(TokenizerError);
    expect(() => bindDecode(tok, [BOS, 10_000, EOS])).toThrow(TokenizerError);
  });
});
