/** Feature-export command line.
 *
 *   node dist/cli.js --frames-dir clip/frames --checkpoint-dir clip/checkpoints \
 *     --out video.vgf [--fps 3] [--sample-fps 2] [--objects 6] \
 *     [--query-mode word|sentence|none] [--words 4] [--captions clip/captions.txt]
 *
 * --fps falls back to the clip's meta.json when omitted.
 */

import { existsSync, readFileSync } from "node:fs";
import { join } from "node:path";
import { parseArgs } from "node:util";

import { runExport } from "./export.js";
import type { QueryMode } from "./container.js";

function main(): number {
  const { values } = parseArgs({
    options: {
      "frames-dir": { type: "string" },
      "checkpoint-dir": { type: "string" },
      out: { type: "string" },
      fps: { type: "string" },
      "sample-fps": { type: "string", default: "2" },
      objects: { type: "string", default: "6" },
      "query-mode": { type: "string", default: "word" },
      words: { type: "string", default: "4" },
      captions: { type: "string" },
    },
  });
  const framesDir = values["frames-dir"];
  const checkpointDir = values["checkpoint-dir"];
  const outPath = values.out;
  if (!framesDir || !checkpointDir || !outPath) {
    console.error("usage: --frames-dir DIR --checkpoint-dir DIR --out FILE [...]");
    return 2;
  }
  let fps = values.fps ? parseFloat(values.fps) : NaN;
  if (!Number.isFinite(fps)) {
    const metaPath = join(framesDir, "meta.json");
    if (existsSync(metaPath)) {
      fps = JSON.parse(readFileSync(metaPath, "utf-8")).fps;
    }
  }
  if (!Number.isFinite(fps) || fps <= 0) {
    console.error("source fps unknown: pass --fps or provide meta.json");
    return 2;
  }
  const queryMode = values["query-mode"] as QueryMode;
  if (!["none", "word", "sentence"].includes(queryMode)) {
    console.error(`unknown query mode ${queryMode}`);
    return 2;
  }
  try {
    const result = runExport({
      framesDir,
      fps,
      sampleFps: parseFloat(values["sample-fps"]!),
      topN: parseInt(values.objects!, 10),
      queryMode,
      words: parseInt(values.words!, 10),
      captionsPath: values.captions,
      checkpointDir,
      outPath,
    });
    console.log(
      `wrote ${result.outPath} (${result.frames} frames, sha256 ${result.sha256.slice(0, 12)}..., ` +
      `${result.paddedFrames.length} padded frame(s))`,
    );
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

process.exit(main());
