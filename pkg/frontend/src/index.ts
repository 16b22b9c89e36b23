/**
 * Binding surface: five operations over an opaque tokenizer handle, matching
 * the CLI byte-for-byte on shared tokenizer files and encoded sequences.
 */

import { readFileSync } from "node:fs";
import {
  Timeline,
  Tokenizer,
  TokenizerError,
  TrainerOptions,
  loadTokenizerFile,
  parseCorpus,
  saveTokenizerFile,
  trainTokenizer,
} from "./tokenizer.js";

export {
  BOS,
  EOS,
  PAD,
  UNK,
  VSEP,
  Tokenizer,
  TokenizerError,
  canonicalizeCodes,
  checkLayout,
  parseCorpus,
} from "./tokenizer.js";
export type { MergeRule, Timeline, TrainerOptions, Visit } from "./tokenizer.js";

export type BoundTokenizer = Tokenizer;

/** Load a tokenizer file produced by this package or the CLI. */
export function bindLoad(path: string): BoundTokenizer {
  return loadTokenizerFile(path);
}

/** Train merge rules over a JSONL corpus file; equals `train-tokenizer`. */
export function bindTrain(corpusPath: string, opts: TrainerOptions): BoundTokenizer {
  const timelines: Timeline[] = parseCorpus(readFileSync(corpusPath, "utf8"));
  return trainTokenizer(timelines, opts);
}

/** Encode one timeline (list of visits, each a list of code strings). */
export function bindEncode(
  handle: BoundTokenizer,
  visits: string[][],
  mode: "bpe" | "element" = "bpe",
): number[] {
  return handle.encodeTimeline(visits, mode);
}

/** Expand an encoded sequence back to per-visit code lists. */
export function bindDecode(handle: BoundTokenizer, ids: number[]): string[][] {
  return handle.decode(ids);
}

/** Serialize a handle; byte-identical to the file it was loaded from. */
export function bindSave(handle: BoundTokenizer, path: string): void {
  saveTokenizerFile(handle, path);
}
