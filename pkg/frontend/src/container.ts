/** VGF1 feature-container writer (and a reader used by the tests).
 *
 * Layout, all little-endian:
 *   "VGF1" | u16 version | u32 T | u32 T_original | u16 N | u16 d_obj
 *   | u8 query_mode | u16 query_rows | u16 query_dim
 *   | picks u32*T | objects f32*T*N*d_obj | class_ids u16*T*N
 *   | class table (u16 count, then u16 byte-length + utf-8 per name)
 *   | query matrix f32 | u8 has_binary [u8*T] | u8 has_scores [u16 users, f32]
 */

import { createHash } from "node:crypto";

export const QUERY_MODES = { none: 0, word: 1, sentence: 2 } as const;
export type QueryMode = keyof typeof QUERY_MODES;

export interface FeatureContainer {
  framesOriginal: number;
  picks: Uint32Array;
  /** frames x objects x dObj, flattened row-major. */
  objects: Float32Array;
  frames: number;
  objectsPerFrame: number;
  dObj: number;
  classIds: Uint16Array;
  classNames: string[];
  queryMode: QueryMode;
  queryVectors: { rows: number; dim: number; data: Float32Array } | null;
  gtBinary: Uint8Array | null;
  gtScores: { users: number; data: Float32Array } | null;
}

export function encodeContainer(c: FeatureContainer): Buffer {
  const { frames: t, objectsPerFrame: n, dObj } = c;
  if (c.picks.length !== t) throw new Error("picks length mismatch");
  if (c.objects.length !== t * n * dObj) throw new Error("objects length mismatch");
  if (c.classIds.length !== t * n) throw new Error("class ids length mismatch");
  const parts: Buffer[] = [];
  parts.push(Buffer.from("VGF1", "ascii"));
  const head = Buffer.alloc(19);
  head.writeUInt16LE(1, 0);
  head.writeUInt32LE(t, 2);
  head.writeUInt32LE(c.framesOriginal, 6);
  head.writeUInt16LE(n, 10);
  head.writeUInt16LE(dObj, 12);
  head.writeUInt8(QUERY_MODES[c.queryMode], 14);
  head.writeUInt16LE(c.queryVectors ? c.queryVectors.rows : 0, 15);
  head.writeUInt16LE(c.queryVectors ? c.queryVectors.dim : 0, 17);
  parts.push(head);
  parts.push(bufferOf(c.picks));
  parts.push(bufferOf(c.objects));
  parts.push(bufferOf(c.classIds));
  const count = Buffer.alloc(2);
  count.writeUInt16LE(c.classNames.length, 0);
  parts.push(count);
  for (const name of c.classNames) {
    const raw = Buffer.from(name, "utf-8");
    const len = Buffer.alloc(2);
    len.writeUInt16LE(raw.length, 0);
    parts.push(len, raw);
  }
  if (c.queryVectors) parts.push(bufferOf(c.queryVectors.data));
  if (c.gtBinary) {
    parts.push(Buffer.from([1]), Buffer.from(c.gtBinary));
  } else {
    parts.push(Buffer.from([0]));
  }
  if (c.gtScores) {
    const users = Buffer.alloc(3);
    users.writeUInt8(1, 0);
    users.writeUInt16LE(c.gtScores.users, 1);
    parts.push(users, bufferOf(c.gtScores.data));
  } else {
    parts.push(Buffer.from([0]));
  }
  return Buffer.concat(parts);
}

function bufferOf(arr: Uint32Array | Float32Array | Uint16Array): Buffer {
  // typed arrays are already little-endian on every supported platform
  return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength);
}

export function sha256Hex(data: Buffer): string {
  return createHash("sha256").update(data).digest("hex");
}

export function decodeContainer(data: Buffer): FeatureContainer {
  let pos = 0;
  const take = (nBytes: number, what: string): Buffer => {
    if (pos + nBytes > data.length) throw new Error(`truncated while reading ${what} at ${pos}`);
    const out = data.subarray(pos, pos + nBytes);
    pos += nBytes;
    return out;
  };
  if (take(4, "magic").toString("ascii") !== "VGF1") throw new Error("bad magic");
  const head = take(19, "header");
  const version = head.readUInt16LE(0);
  if (version !== 1) throw new Error(`unsupported version ${version}`);
  const t = head.readUInt32LE(2);
  const framesOriginal = head.readUInt32LE(6);
  const n = head.readUInt16LE(10);
  const dObj = head.readUInt16LE(12);
  const modeCode = head.readUInt8(14);
  const rows = head.readUInt16LE(15);
  const dim = head.readUInt16LE(17);
  if (t === 0) throw new Error("container declares zero frames");
  const mode = (Object.keys(QUERY_MODES) as QueryMode[]).find(
    (k) => QUERY_MODES[k] === modeCode,
  );
  if (!mode) throw new Error(`unknown query mode code ${modeCode}`);
  const picks = new Uint32Array(copy(take(4 * t, "picks")));
  const objects = new Float32Array(copy(take(4 * t * n * dObj, "objects")));
  const classIds = new Uint16Array(copy(take(2 * t * n, "class ids")));
  const nameCount = take(2, "table size").readUInt16LE(0);
  const classNames: string[] = [];
  for (let i = 0; i < nameCount; i++) {
    const len = take(2, "name length").readUInt16LE(0);
    classNames.push(take(len, "name").toString("utf-8"));
  }
  let queryVectors: FeatureContainer["queryVectors"] = null;
  if (rows > 0) {
    queryVectors = { rows, dim, data: new Float32Array(copy(take(4 * rows * dim, "query"))) };
  }
  const hasBinary = take(1, "binary flag").readUInt8(0);
  const gtBinary = hasBinary ? new Uint8Array(copy(take(t, "binary"))) : null;
  const hasScores = take(1, "score flag").readUInt8(0);
  let gtScores: FeatureContainer["gtScores"] = null;
  if (hasScores) {
    const users = take(2, "user count").readUInt16LE(0);
    gtScores = { users, data: new Float32Array(copy(take(4 * users * t, "scores"))) };
  }
  if (pos !== data.length) throw new Error(`${data.length - pos} trailing bytes`);
  return {
    framesOriginal, picks, objects, frames: t, objectsPerFrame: n, dObj,
    classIds, classNames, queryMode: mode, queryVectors, gtBinary, gtScores,
  };
}

function copy(buf: Buffer): ArrayBuffer {
  const out = new ArrayBuffer(buf.length);
  new Uint8Array(out).set(buf);
  return out;
}
