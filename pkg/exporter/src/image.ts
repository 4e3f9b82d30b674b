/**
 * Minimal image input: binary PPM (P6) and PGM (P5), which keeps the
 * exporter dependency-free and bit-deterministic. Images are converted
 * to a grayscale float grid in [0, 1], short-side resized and centre
 * cropped to a square so every export in a job shares one geometry.
 */

import { readFileSync } from "fs";

import { Rng } from "./rng";

export interface GrayImage {
  width: number;
  height: number;
  /** row-major grayscale, length width * height, values in [0, 1] */
  pixels: Float64Array;
}

export class ImageFormatError extends Error {}

function parseHeader(buf: Buffer): { magic: string; width: number; height: number; maxval: number; offset: number } {
  // header tokens separated by whitespace, # comments allowed
  let pos = 0;
  const tokens: string[] = [];
  while (tokens.length < 4 && pos < buf.length) {
    while (pos < buf.length && /\s/.test(String.fromCharCode(buf[pos]))) pos++;
    if (buf[pos] === 0x23) {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) pos++;
    tokens.push(buf.toString("ascii", start, pos));
  }
  if (tokens.length < 4) throw new ImageFormatError("truncated PNM header");
  pos++; // single whitespace after maxval
  const [magic, w, h, maxval] = tokens;
  return {
    magic,
    width: parseInt(w, 10),
    height: parseInt(h, 10),
    maxval: parseInt(maxval, 10),
    offset: pos,
  };
}

export function loadImage(path: string): GrayImage {
  const buf = readFileSync(path);
  const { magic, width, height, maxval, offset } = parseHeader(buf);
  if (!Number.isFinite(width) || !Number.isFinite(height) || width < 1 || height < 1) {
    throw new ImageFormatError(`${path}: bad dimensions`);
  }
  if (maxval !== 255) throw new ImageFormatError(`${path}: only maxval 255 supported`);
  const pixels = new Float64Array(width * height);
  if (magic === "P5") {
    if (buf.length - offset < width * height) {
      throw new ImageFormatError(`${path}: truncated pixel data`);
    }
    for (let i = 0; i < width * height; i++) pixels[i] = buf[offset + i] / 255;
  } else if (magic === "P6") {
    if (buf.length - offset < width * height * 3) {
      throw new ImageFormatError(`${path}: truncated pixel data`);
    }
    for (let i = 0; i < width * height; i++) {
      const r = buf[offset + 3 * i];
      const g = buf[offset + 3 * i + 1];
      const b = buf[offset + 3 * i + 2];
      pixels[i] = (0.299 * r + 0.587 * g + 0.114 * b) / 255;
    }
  } else {
    throw new ImageFormatError(`${path}: unsupported magic ${magic} (want P5/P6)`);
  }
  return { width, height, pixels };
}

function bilinear(img: GrayImage, x: number, y: number): number {
  const x0 = Math.min(Math.floor(x), img.width - 1);
  const y0 = Math.min(Math.floor(y), img.height - 1);
  const x1 = Math.min(x0 + 1, img.width - 1);
  const y1 = Math.min(y0 + 1, img.height - 1);
  const fx = x - x0;
  const fy = y - y0;
  const p = img.pixels;
  const top = p[y0 * img.width + x0] * (1 - fx) + p[y0 * img.width + x1] * fx;
  const bottom = p[y1 * img.width + x0] * (1 - fx) + p[y1 * img.width + x1] * fx;
  return top * (1 - fy) + bottom * fy;
}

/** short-side resize to `size`, then centre crop to size x size */
export function resizeCropSquare(img: GrayImage, size: number): GrayImage {
  const scale = size / Math.min(img.width, img.height);
  const scaledW = img.width * scale;
  const scaledH = img.height * scale;
  const offX = (scaledW - size) / 2;
  const offY = (scaledH - size) / 2;
  const out = new Float64Array(size * size);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      out[y * size + x] = bilinear(img, (x + offX + 0.5) / scale - 0.5, (y + offY + 0.5) / scale - 0.5);
    }
  }
  return { width: size, height: size, pixels: out };
}

export function writePgm(path: string, img: GrayImage): void {
  const { writeFileSync } = require("fs");
  const header = Buffer.from(`P5\n${img.width} ${img.height}\n255\n`, "ascii");
  const body = Buffer.alloc(img.width * img.height);
  for (let i = 0; i < body.length; i++) {
    body[i] = Math.max(0, Math.min(255, Math.round(img.pixels[i] * 255)));
  }
  writeFileSync(path, Buffer.concat([header, body]));
}

/**
 * Procedural demo scene: a textured background with a few bright
 * rectangles and blobs, deterministic per seed. Used for the committed
 * golden fixtures and for tests, so no binary fixtures are needed.
 */
export function demoImage(seed: number, width = 160, height = 120): GrayImage {
  const rng = new Rng(0xd0 + seed * 101);
  const pixels = new Float64Array(width * height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const wave =
        0.25 * Math.sin((x / width) * 6.0 + seed) +
        0.2 * Math.cos((y / height) * 5.0 - seed * 0.7);
      pixels[y * width + x] = 0.45 + wave * 0.3;
    }
  }
  for (let box = 0; box < 5; box++) {
    const bx = Math.floor(rng.next() * (width - 30));
    const by = Math.floor(rng.next() * (height - 24));
    const bw = 12 + Math.floor(rng.next() * 18);
    const bh = 10 + Math.floor(rng.next() * 14);
    const shade = 0.15 + rng.next() * 0.7;
    for (let y = by; y < Math.min(by + bh, height); y++) {
      for (let x = bx; x < Math.min(bx + bw, width); x++) {
        pixels[y * width + x] = shade;
      }
    }
  }
  for (let i = 0; i < pixels.length; i++) {
    pixels[i] = Math.max(0, Math.min(1, pixels[i] + 0.04 * rng.normal()));
  }
  return { width, height, pixels };
}
