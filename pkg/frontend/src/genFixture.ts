/** Deterministic test assets: a 10-second clip (3 fps, 64x48 frames with
 * moving colored blobs on a textured background) plus detector/embedder
 * checkpoint files.
 *
 *   node dist/genFixture.js <output-dir> [seed]
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { gaussian, mulberry32 } from "./prng.js";
import { encodePpm, type Image } from "./ppm.js";

const WIDTH = 64;
const HEIGHT = 48;
const FPS = 3;
const SECONDS = 10;
const PATCH = 8;
const DESCRIPTOR_DIM = PATCH * PATCH + 5;
const D_OBJ = 64;
const CLASS_NAMES = ["ball", "box", "cone", "floor"];

function renderFrame(t: number, rand: () => number): Image {
  const pixels = new Uint8Array(WIDTH * HEIGHT * 3);
  for (let y = 0; y < HEIGHT; y++) {
    for (let x = 0; x < WIDTH; x++) {
      const base = (y * WIDTH + x) * 3;
      const shade = 40 + 20 * (y / HEIGHT) + 6 * rand();
      pixels[base] = shade;
      pixels[base + 1] = shade + 5;
      pixels[base + 2] = shade + 10;
    }
  }
  const blobs = [
    { cx: 10 + ((t * 1.5) % 40), cy: 12, size: 9, color: [220, 60, 50] },
    { cx: 48 - ((t * 1.1) % 36), cy: 30, size: 11, color: [60, 200, 80] },
    { cx: 22 + 14 * Math.sin(t / 4), cy: 22 + 8 * Math.cos(t / 5), size: 7, color: [70, 90, 230] },
  ];
  for (const blob of blobs) {
    const half = Math.floor(blob.size / 2);
    for (let dy = -half; dy <= half; dy++) {
      for (let dx = -half; dx <= half; dx++) {
        const x = Math.round(blob.cx + dx);
        const y = Math.round(blob.cy + dy);
        if (x < 0 || y < 0 || x >= WIDTH || y >= HEIGHT) continue;
        const base = (y * WIDTH + x) * 3;
        pixels[base] = blob.color[0];
        pixels[base + 1] = blob.color[1];
        pixels[base + 2] = blob.color[2];
      }
    }
  }
  return { width: WIDTH, height: HEIGHT, pixels };
}

export function generateFixture(outDir: string, seed = 11): void {
  const framesDir = join(outDir, "frames");
  const checkpointDir = join(outDir, "checkpoints");
  mkdirSync(framesDir, { recursive: true });
  mkdirSync(checkpointDir, { recursive: true });

  const rand = mulberry32(seed);
  const total = FPS * SECONDS;
  for (let t = 0; t < total; t++) {
    const image = renderFrame(t, rand);
    writeFileSync(join(framesDir, `frame_${String(t).padStart(4, "0")}.ppm`), encodePpm(image));
  }
  writeFileSync(join(framesDir, "meta.json"), JSON.stringify({
    fps: FPS, seconds: SECONDS, title: "bundled test clip",
  }, null, 2) + "\n");

  const ckRand = mulberry32(seed ^ 0xc0ffee);
  const projection: number[][] = [];
  for (let i = 0; i < DESCRIPTOR_DIM; i++) {
    const row: number[] = [];
    for (let j = 0; j < D_OBJ; j++) row.push(gaussian(ckRand) / Math.sqrt(DESCRIPTOR_DIM));
    projection.push(row);
  }
  const classPrototypes: number[][] = CLASS_NAMES.map(() => {
    const proto: number[] = [];
    for (let i = 0; i < DESCRIPTOR_DIM; i++) proto.push(gaussian(ckRand) * 0.3);
    return proto;
  });
  writeFileSync(join(checkpointDir, "detector.json"), JSON.stringify({
    dObj: D_OBJ, patch: PATCH, descriptorDim: DESCRIPTOR_DIM,
    projection, classNames: CLASS_NAMES, classPrototypes,
    confidenceScale: 6.0, confidenceBias: -1.0,
  }) + "\n");

  const vectors: Record<string, number[]> = {};
  for (const name of CLASS_NAMES) {
    const wordRand = mulberry32(seed ^ name.length);
    vectors[name] = Array.from({ length: 16 }, () => gaussian(wordRand));
  }
  writeFileSync(join(checkpointDir, "embedder.json"), JSON.stringify({
    dWord: 16, dCaption: 64, vectors,
  }) + "\n");

  writeFileSync(join(outDir, "captions.txt"),
    "a red ball rolls across the floor\na green box slides past a blue cone\n");
}

const invokedDirectly = process.argv[1]?.endsWith("genFixture.js");
if (invokedDirectly) {
  const outDir = process.argv[2];
  if (!outDir) {
    console.error("usage: node dist/genFixture.js <output-dir> [seed]");
    process.exit(2);
  }
  generateFixture(outDir, process.argv[3] ? parseInt(process.argv[3], 10) : 11);
  console.log(`fixture written to ${outDir}`);
}
