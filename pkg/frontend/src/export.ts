/** Export orchestration: sample frames, detect, embed queries, write the
 * container plus a sidecar with the payload digest and run metadata. */

import { readFileSync, readdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { embedCaption, embedWord, loadDetector, loadEmbedder } from "./checkpoints.js";
import { encodeContainer, sha256Hex, type FeatureContainer, type QueryMode } from "./container.js";
import { detectObjects, type Detection } from "./detect.js";
import { decodePpm } from "./ppm.js";

export interface ExportJob {
  framesDir: string;
  fps: number;               // source frame rate of the clip
  sampleFps: number;         // default 2
  topN: number;
  queryMode: QueryMode;
  words: number;             // word-query slots W
  captionsPath?: string;     // sentence mode: text file, one caption per line
  checkpointDir: string;
  outPath: string;
}

export interface ExportResult {
  outPath: string;
  sidecarPath: string;
  sha256: string;
  frames: number;
  paddedFrames: number[];
}

export function runExport(job: ExportJob): ExportResult {
  const detector = loadDetector(job.checkpointDir);
  const embedder = loadEmbedder(job.checkpointDir);
  const frameFiles = readdirSync(job.framesDir)
    .filter((f) => f.endsWith(".ppm"))
    .sort();
  if (!frameFiles.length) throw new Error(`no .ppm frames in ${job.framesDir}`);

  // uniform sampling at sampleFps from the source clock; picks stay
  // strictly increasing even when rates do not divide evenly
  const picks: number[] = [];
  for (let k = 0; ; k++) {
    const index = Math.floor((k * job.fps) / job.sampleFps);
    if (index >= frameFiles.length) break;
    if (!picks.length || index > picks[picks.length - 1]) picks.push(index);
  }

  const t = picks.length;
  const n = job.topN;
  const d = detector.dObj;
  const objects = new Float32Array(t * n * d);
  const classIds = new Uint16Array(t * n);
  const paddedFrames: number[] = [];
  const confidences: number[][] = [];
  const classCounts = new Map<string, number>();

  picks.forEach((frameIndex, ti) => {
    const image = decodePpm(readFileSync(join(job.framesDir, frameFiles[frameIndex])));
    const { detections, padded } = detectObjects(image, detector, n);
    if (padded) paddedFrames.push(ti);
    confidences.push(detections.map((det) => det.confidence));
    detections.forEach((det: Detection, oi) => {
      objects.set(det.feature, (ti * n + oi) * d);
      classIds[ti * n + oi] = det.classId;
      const name = detector.classNames[det.classId];
      classCounts.set(name, (classCounts.get(name) ?? 0) + 1);
    });
    // zero-feature padding rows keep class id 0; the sidecar carries the flag
  });

  let queryVectors: FeatureContainer["queryVectors"] = null;
  if (job.queryMode === "word") {
    // frequency-ranked words, ties alphabetical; row i of the query matrix
    // is the i-th ranked word (the convention query overrides rely on)
    const ranked = [...classCounts.entries()]
      .sort((a, b) => b[1] - a[1] || (a[0] < b[0] ? -1 : 1))
      .slice(0, job.words)
      .map(([name]) => name);
    const data = new Float32Array(ranked.length * embedder.dWord);
    ranked.forEach((word, i) => data.set(embedWord(embedder, word), i * embedder.dWord));
    queryVectors = { rows: ranked.length, dim: embedder.dWord, data };
  } else if (job.queryMode === "sentence") {
    if (!job.captionsPath) throw new Error("sentence mode needs --captions");
    const captions = readFileSync(job.captionsPath, "utf-8")
      .split("\n").map((line) => line.trim()).filter(Boolean);
    if (!captions.length) throw new Error(`no captions in ${job.captionsPath}`);
    const data = new Float32Array(captions.length * embedder.dCaption);
    captions.forEach((cap, i) => data.set(embedCaption(embedder, cap), i * embedder.dCaption));
    queryVectors = { rows: captions.length, dim: embedder.dCaption, data };
  }

  const container: FeatureContainer = {
    framesOriginal: frameFiles.length,
    picks: Uint32Array.from(picks),
    objects,
    frames: t,
    objectsPerFrame: n,
    dObj: d,
    classIds,
    classNames: detector.classNames,
    queryMode: job.queryMode,
    queryVectors,
    gtBinary: null,
    gtScores: null,
  };
  const blob = encodeContainer(container);
  writeFileSync(job.outPath, blob);
  const digest = sha256Hex(blob);
  const sidecarPath = `${job.outPath}.meta.json`;
  writeFileSync(sidecarPath, JSON.stringify({
    sha256: digest,
    frames: t,
    frames_original: frameFiles.length,
    fps: job.fps,
    sample_fps: job.sampleFps,
    objects_per_frame: n,
    d_obj: d,
    query_mode: job.queryMode,
    padded_frames: paddedFrames,
    confidences,
  }, null, 2) + "\n");
  return { outPath: job.outPath, sidecarPath, sha256: digest, frames: t, paddedFrames };
}
