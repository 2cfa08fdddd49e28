/** Minimal binary PPM (P6) image reader/writer for the bundled test clip. */

export interface Image {
  width: number;
  height: number;
  /** RGB interleaved, length width * height * 3. */
  pixels: Uint8Array;
}

export function encodePpm(image: Image): Buffer {
  const header = Buffer.from(`P6\n${image.width} ${image.height}\n255\n`, "ascii");
  return Buffer.concat([header, Buffer.from(image.pixels)]);
}

export function decodePpm(data: Buffer): Image {
  // header: magic, width, height, maxval, separated by whitespace/comments
  let pos = 0;
  const token = (): string => {
    while (pos < data.length && /\s/.test(String.fromCharCode(data[pos]))) pos++;
    if (data[pos] === 0x23) {
      // comment line
      while (pos < data.length && data[pos] !== 0x0a) pos++;
      return token();
    }
    let start = pos;
    while (pos < data.length && !/\s/.test(String.fromCharCode(data[pos]))) pos++;
    return data.subarray(start, pos).toString("ascii");
  };
  const magic = token();
  if (magic !== "P6") throw new Error(`unsupported PPM magic ${magic}`);
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  if (!(width > 0 && height > 0) || maxval !== 255) {
    throw new Error(`bad PPM header ${width}x${height} max ${maxval}`);
  }
  pos++; // single whitespace after maxval
  const need = width * height * 3;
  if (data.length - pos < need) throw new Error("truncated PPM payload");
  return { width, height, pixels: new Uint8Array(data.subarray(pos, pos + need)) };
}
