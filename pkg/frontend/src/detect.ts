/** Saliency-window region proposals with checkpoint-driven scoring.
 *
 * Windows slide over the frame at two scales; each window gets a pooled
 * descriptor (downsampled grey patch + color moments + geometry), a class
 * from the checkpoint prototypes, and a confidence from window saliency.
 * Overlapping detections are suppressed at IoU 0.7 and the top-N survivors
 * are kept in descending confidence order.
 */

import type { DetectorCheckpoint } from "./checkpoints.js";
import type { Image } from "./ppm.js";

export interface Detection {
  x: number;
  y: number;
  w: number;
  h: number;
  confidence: number;
  classId: number;
  feature: Float32Array;
}

const IOU_THRESHOLD = 0.7;

export function detectObjects(image: Image, ck: DetectorCheckpoint, topN: number): {
  detections: Detection[];
  padded: boolean;
} {
  const proposals: Detection[] = [];
  const scales = [
    Math.max(8, Math.floor(Math.min(image.width, image.height) / 4)),
    Math.max(12, Math.floor(Math.min(image.width, image.height) / 2)),
  ];
  const globalMean = channelMeans(image, 0, 0, image.width, image.height);
  for (const size of scales) {
    const stride = Math.max(4, Math.floor(size / 2));
    for (let y = 0; y + size <= image.height; y += stride) {
      for (let x = 0; x + size <= image.width; x += stride) {
        const saliency = windowSaliency(image, x, y, size, size, globalMean);
        const confidence = 1 / (1 + Math.exp(-(ck.confidenceScale * saliency + ck.confidenceBias)));
        const descriptor = windowDescriptor(image, x, y, size, size, ck);
        const classId = nearestPrototype(descriptor, ck);
        proposals.push({
          x, y, w: size, h: size, confidence, classId,
          feature: project(descriptor, ck),
        });
      }
    }
  }
  proposals.sort((a, b) => b.confidence - a.confidence || a.y - b.y || a.x - b.x);
  const kept: Detection[] = [];
  for (const candidate of proposals) {
    if (kept.length >= topN) break;
    if (kept.every((k) => iou(k, candidate) < IOU_THRESHOLD)) kept.push(candidate);
  }
  return { detections: kept, padded: kept.length < topN };
}

function channelMeans(image: Image, x: number, y: number, w: number, h: number): number[] {
  const sums = [0, 0, 0];
  for (let yy = y; yy < y + h; yy++) {
    for (let xx = x; xx < x + w; xx++) {
      const base = (yy * image.width + xx) * 3;
      sums[0] += image.pixels[base];
      sums[1] += image.pixels[base + 1];
      sums[2] += image.pixels[base + 2];
    }
  }
  return sums.map((s) => s / (w * h));
}

function windowSaliency(image: Image, x: number, y: number, w: number, h: number, globalMean: number[]): number {
  const mean = channelMeans(image, x, y, w, h);
  let variance = 0;
  for (let yy = y; yy < y + h; yy++) {
    for (let xx = x; xx < x + w; xx++) {
      const base = (yy * image.width + xx) * 3;
      for (let c = 0; c < 3; c++) {
        const dv = image.pixels[base + c] - mean[c];
        variance += dv * dv;
      }
    }
  }
  variance /= w * h * 3;
  const contrast = Math.hypot(
    mean[0] - globalMean[0], mean[1] - globalMean[1], mean[2] - globalMean[2],
  );
  return (Math.sqrt(variance) + contrast) / 255;
}

function windowDescriptor(image: Image, x: number, y: number, w: number, h: number, ck: DetectorCheckpoint): Float32Array {
  const p = ck.patch;
  const out = new Float32Array(ck.descriptorDim);
  // downsampled grey patch
  for (let gy = 0; gy < p; gy++) {
    for (let gx = 0; gx < p; gx++) {
      const sx = x + Math.floor((gx + 0.5) * (w / p));
      const sy = y + Math.floor((gy + 0.5) * (h / p));
      const base = (sy * image.width + sx) * 3;
      const grey = (image.pixels[base] + image.pixels[base + 1] + image.pixels[base + 2]) / 3;
      out[gy * p + gx] = grey / 255 - 0.5;
    }
  }
  const mean = channelMeans(image, x, y, w, h);
  const extra = p * p;
  out[extra] = mean[0] / 255 - 0.5;
  out[extra + 1] = mean[1] / 255 - 0.5;
  out[extra + 2] = mean[2] / 255 - 0.5;
  out[extra + 3] = w / image.width - 0.5;
  out[extra + 4] = h / image.height - 0.5;
  return out;
}

function nearestPrototype(descriptor: Float32Array, ck: DetectorCheckpoint): number {
  let best = 0;
  let bestScore = -Infinity;
  ck.classPrototypes.forEach((proto, idx) => {
    let score = 0;
    for (let i = 0; i < descriptor.length; i++) score += descriptor[i] * proto[i];
    if (score > bestScore) {
      bestScore = score;
      best = idx;
    }
  });
  return best;
}

function project(descriptor: Float32Array, ck: DetectorCheckpoint): Float32Array {
  const out = new Float32Array(ck.dObj);
  for (let i = 0; i < ck.descriptorDim; i++) {
    const row = ck.projection[i];
    const v = descriptor[i];
    if (v === 0) continue;
    for (let j = 0; j < ck.dObj; j++) out[j] += v * row[j];
  }
  return out;
}

export function iou(a: { x: number; y: number; w: number; h: number }, b: { x: number; y: number; w: number; h: number }): number {
  const x1 = Math.max(a.x, b.x);
  const y1 = Math.max(a.y, b.y);
  const x2 = Math.min(a.x + a.w, b.x + b.w);
  const y2 = Math.min(a.y + a.h, b.y + b.h);
  const inter = Math.max(0, x2 - x1) * Math.max(0, y2 - y1);
  const union = a.w * a.h + b.w * b.h - inter;
  return union > 0 ? inter / union : 0;
}
