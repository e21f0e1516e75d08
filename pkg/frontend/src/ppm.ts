// Minimal binary PPM/PGM (P6/P5, maxval 255) decoder for canvas rendering.

export interface DecodedImage {
  width: number;
  height: number;
  rgba: Uint8ClampedArray<ArrayBuffer>;
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d || b === 0x0b || b === 0x0c;
}

export function decodePpm(bytes: Uint8Array): DecodedImage {
  if (bytes.length < 2) throw new Error("not a PPM: too short");
  const magic = String.fromCharCode(bytes[0], bytes[1]);
  if (magic !== "P6" && magic !== "P5") throw new Error(`not a binary PPM/PGM: ${magic}`);
  const channels = magic === "P6" ? 3 : 1;

  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      // '#' comment to end of line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    const token = String.fromCharCode(...bytes.slice(start, pos));
    if (!/^\d+$/.test(token)) throw new Error(`malformed header token: ${token}`);
    fields.push(parseInt(token, 10));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`);
  if (width < 1 || height < 1) throw new Error("bad dimensions");
  const need = width * height * channels;
  if (bytes.length - pos < need) throw new Error("truncated payload");

  const rgba = new Uint8ClampedArray(new ArrayBuffer(width * height * 4));
  for (let i = 0; i < width * height; i++) {
    const src = pos + i * channels;
    const r = bytes[src];
    const g = channels === 3 ? bytes[src + 1] : r;
    const b = channels === 3 ? bytes[src + 2] : r;
    rgba[i * 4] = r;
    rgba[i * 4 + 1] = g;
    rgba[i * 4 + 2] = b;
    rgba[i * 4 + 3] = 255;
  }
  return { width, height, rgba };
}
