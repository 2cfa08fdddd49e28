import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { beforeAll, describe, expect, it } from "vitest";

import { decodeContainer, encodeContainer, sha256Hex } from "../src/container.js";
import { iou } from "../src/detect.js";
import { generateFixture } from "../src/genFixture.js";
import { runExport } from "../src/export.js";
import { decodePpm, encodePpm } from "../src/ppm.js";

let fixtureDir: string;

beforeAll(() => {
  fixtureDir = mkdtempSync(join(tmpdir(), "vgf-fixture-"));
  generateFixture(fixtureDir, 11);
});

function exportClip(overrides: Partial<Parameters<typeof runExport>[0]> = {}) {
  const out = join(mkdtempSync(join(tmpdir(), "vgf-out-")), "clip.vgf");
  return runExport({
    framesDir: join(fixtureDir, "frames"),
    fps: 3,
    sampleFps: 2,
    topN: 6,
    queryMode: "word",
    words: 4,
    checkpointDir: join(fixtureDir, "checkpoints"),
    outPath: out,
    ...overrides,
  });
}

describe("ppm codec", () => {
  it("round-trips an image", () => {
    const image = { width: 4, height: 3, pixels: new Uint8Array(36).map((_, i) => i * 7 % 256) };
    const decoded = decodePpm(encodePpm(image));
    expect(decoded.width).toBe(4);
    expect(decoded.height).toBe(3);
    expect([...decoded.pixels]).toEqual([...image.pixels]);
  });
});

describe("iou", () => {
  it("matches hand values", () => {
    expect(iou({ x: 0, y: 0, w: 10, h: 10 }, { x: 0, y: 0, w: 10, h: 10 })).toBe(1);
    expect(iou({ x: 0, y: 0, w: 10, h: 10 }, { x: 10, y: 10, w: 5, h: 5 })).toBe(0);
    expect(iou({ x: 0, y: 0, w: 10, h: 10 }, { x: 5, y: 0, w: 10, h: 10 }))
      .toBeCloseTo(50 / 150, 12);
  });
});

describe("export", () => {
  it("samples a 10-second 3fps clip at 2fps into 20 frames", () => {
    const result = exportClip();
    expect(result.frames).toBe(20);
    const container = decodeContainer(readFileSync(result.outPath));
    expect(container.frames).toBe(20);
    expect(container.framesOriginal).toBe(30);
    expect(container.objectsPerFrame).toBe(6);
    expect(container.dObj).toBe(64);
    for (let i = 1; i < container.picks.length; i++) {
      expect(container.picks[i]).toBeGreaterThan(container.picks[i - 1]);
    }
  });

  it("writes a sha256 sidecar matching the file", () => {
    const result = exportClip();
    const sidecar = JSON.parse(readFileSync(result.sidecarPath, "utf-8"));
    expect(sidecar.sha256).toBe(sha256Hex(readFileSync(result.outPath)));
    expect(sidecar.query_mode).toBe("word");
  });

  it("orders detections by descending confidence", () => {
    const result = exportClip();
    const sidecar = JSON.parse(readFileSync(result.sidecarPath, "utf-8"));
    for (const row of sidecar.confidences) {
      for (let i = 1; i < row.length; i++) {
        expect(row[i]).toBeLessThanOrEqual(row[i - 1]);
      }
    }
  });

  it("pads and flags frames with fewer detections than requested", () => {
    const result = exportClip({ topN: 90 });
    expect(result.paddedFrames.length).toBeGreaterThan(0);
    const container = decodeContainer(readFileSync(result.outPath));
    const { frames: t, objectsPerFrame: n, dObj: d } = container;
    const sidecar = JSON.parse(readFileSync(result.sidecarPath, "utf-8"));
    const ti = result.paddedFrames[0];
    const found = sidecar.confidences[ti].length;
    const padRow = container.objects.slice(
      (ti * n + found) * d, (ti * n + found + 1) * d,
    );
    expect([...padRow].every((v) => v === 0)).toBe(true);
  });

  it("word queries carry W x d_word vectors", () => {
    const result = exportClip();
    const container = decodeContainer(readFileSync(result.outPath));
    expect(container.queryMode).toBe("word");
    expect(container.queryVectors!.dim).toBe(16);
    expect(container.queryVectors!.rows).toBeLessThanOrEqual(4);
  });

  it("sentence queries embed one row per caption", () => {
    const result = exportClip({
      queryMode: "sentence",
      captionsPath: join(fixtureDir, "captions.txt"),
    });
    const container = decodeContainer(readFileSync(result.outPath));
    expect(container.queryMode).toBe("sentence");
    expect(container.queryVectors!.rows).toBe(2);
    expect(container.queryVectors!.dim).toBe(64);
  });

  it("is deterministic for identical inputs", () => {
    const a = exportClip();
    const b = exportClip();
    expect(sha256Hex(readFileSync(a.outPath))).toBe(sha256Hex(readFileSync(b.outPath)));
  });

  it("fails actionably when checkpoints are missing", () => {
    expect(() => exportClip({ checkpointDir: join(fixtureDir, "nowhere") }))
      .toThrowError(/checkpoint missing/);
  });

  it("container encoder round-trips through the decoder", () => {
    const result = exportClip();
    const container = decodeContainer(readFileSync(result.outPath));
    const reencoded = encodeContainer(container);
    expect(sha256Hex(reencoded)).toBe(sha256Hex(readFileSync(result.outPath)));
  });
});
