/** Local checkpoint files for the detector and the text embedder.
 *
 * The adapter never learns anything itself: it consumes whatever projection
 * and prototype weights a checkpoint provides.  A real detector backend can
 * be slotted in by emitting the same JSON interface.
 */

import { existsSync, readFileSync } from "node:fs";
import { join } from "node:path";

import { gaussian, hashString, mulberry32 } from "./prng.js";

export interface DetectorCheckpoint {
  dObj: number;
  patch: number;               // descriptor patch edge (pixels)
  descriptorDim: number;
  projection: number[][];      // descriptorDim x dObj
  classNames: string[];
  classPrototypes: number[][]; // classNames.length x descriptorDim
  confidenceScale: number;
  confidenceBias: number;
}

export interface EmbedderCheckpoint {
  dWord: number;
  dCaption: number;
  vectors: Record<string, number[]>;
}

export function loadDetector(checkpointDir: string): DetectorCheckpoint {
  const path = join(checkpointDir, "detector.json");
  if (!existsSync(path)) {
    throw new Error(
      `detector checkpoint missing at ${path}; generate one with "npm run fixture" ` +
      `or point --checkpoint-dir at a directory containing detector.json`,
    );
  }
  const ck = JSON.parse(readFileSync(path, "utf-8")) as DetectorCheckpoint;
  if (!ck.projection || ck.projection.length !== ck.descriptorDim) {
    throw new Error(`detector checkpoint ${path} has a malformed projection`);
  }
  return ck;
}

export function loadEmbedder(checkpointDir: string): EmbedderCheckpoint {
  const path = join(checkpointDir, "embedder.json");
  if (!existsSync(path)) {
    throw new Error(
      `text-embedder checkpoint missing at ${path}; generate one with "npm run fixture"`,
    );
  }
  return JSON.parse(readFileSync(path, "utf-8")) as EmbedderCheckpoint;
}

/** Embed one word: checkpoint vector when present, hash-seeded otherwise. */
export function embedWord(ck: EmbedderCheckpoint, word: string): Float32Array {
  const stored = ck.vectors[word];
  if (stored) return Float32Array.from(stored.slice(0, ck.dWord));
  const rand = mulberry32(hashString(word));
  const out = new Float32Array(ck.dWord);
  for (let i = 0; i < ck.dWord; i++) out[i] = 0.1 * gaussian(rand);
  return out;
}

/** Embed one caption: mean of its word embeddings lifted to dCaption. */
export function embedCaption(ck: EmbedderCheckpoint, caption: string): Float32Array {
  const words = caption.toLowerCase().split(/[^a-z0-9]+/).filter(Boolean);
  const out = new Float32Array(ck.dCaption);
  if (!words.length) return out;
  for (const word of words) {
    const rand = mulberry32(hashString(word) ^ 0x5eed);
    for (let i = 0; i < ck.dCaption; i++) out[i] += gaussian(rand);
  }
  for (let i = 0; i < ck.dCaption; i++) out[i] /= words.length;
  return out;
}
