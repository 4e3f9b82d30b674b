/**
 * Harris-corner keypoints with patch intensity descriptors.
 *
 * The detector is intentionally classical: image gradients, a smoothed
 * structure tensor, corner response with 3x3 non-max suppression, then
 * the strongest corners win. Descriptors are mean-subtracted 5x5
 * intensity patches, L2-normalized on export as the file format
 * requires.
 */

import { GrayImage } from "./image";

export interface Keypoint {
  x: number;
  y: number;
  descriptor: Float32Array;
}

const DESCRIPTOR_RADIUS = 2;
export const DESCRIPTOR_DIM = (2 * DESCRIPTOR_RADIUS + 1) ** 2;

function gradient(img: GrayImage): { ix: Float64Array; iy: Float64Array } {
  const { width, height, pixels } = img;
  const ix = new Float64Array(width * height);
  const iy = new Float64Array(width * height);
  const at = (x: number, y: number) =>
    pixels[Math.min(Math.max(y, 0), height - 1) * width + Math.min(Math.max(x, 0), width - 1)];
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      ix[y * width + x] = (at(x + 1, y) - at(x - 1, y)) / 2;
      iy[y * width + x] = (at(x, y + 1) - at(x, y - 1)) / 2;
    }
  }
  return { ix, iy };
}

function boxSmooth(src: Float64Array, width: number, height: number): Float64Array {
  const out = new Float64Array(width * height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      let acc = 0;
      for (let dy = -1; dy <= 1; dy++) {
        const sy = Math.min(Math.max(y + dy, 0), height - 1);
        for (let dx = -1; dx <= 1; dx++) {
          const sx = Math.min(Math.max(x + dx, 0), width - 1);
          acc += src[sy * width + sx];
        }
      }
      out[y * width + x] = acc / 9;
    }
  }
  return out;
}

export function detectKeypoints(img: GrayImage, maxPoints = 64): Keypoint[] {
  const { width, height } = img;
  const { ix, iy } = gradient(img);
  const ixx = new Float64Array(width * height);
  const iyy = new Float64Array(width * height);
  const ixy = new Float64Array(width * height);
  for (let i = 0; i < ix.length; i++) {
    ixx[i] = ix[i] * ix[i];
    iyy[i] = iy[i] * iy[i];
    ixy[i] = ix[i] * iy[i];
  }
  const sxx = boxSmooth(ixx, width, height);
  const syy = boxSmooth(iyy, width, height);
  const sxy = boxSmooth(ixy, width, height);
  const response = new Float64Array(width * height);
  for (let i = 0; i < response.length; i++) {
    const det = sxx[i] * syy[i] - sxy[i] * sxy[i];
    const trace = sxx[i] + syy[i];
    response[i] = det - 0.05 * trace * trace;
  }

  const border = DESCRIPTOR_RADIUS + 1;
  const corners: { x: number; y: number; r: number }[] = [];
  for (let y = border; y < height - border; y++) {
    for (let x = border; x < width - border; x++) {
      const r = response[y * width + x];
      if (r <= 0) continue;
      let isMax = true;
      for (let dy = -1; dy <= 1 && isMax; dy++) {
        for (let dx = -1; dx <= 1; dx++) {
          if (dx === 0 && dy === 0) continue;
          if (response[(y + dy) * width + x + dx] > r) {
            isMax = false;
            break;
          }
        }
      }
      if (isMax) corners.push({ x, y, r });
    }
  }
  corners.sort((a, b) => b.r - a.r || a.y - b.y || a.x - b.x);

  const points: Keypoint[] = [];
  for (const corner of corners.slice(0, maxPoints)) {
    const desc = new Float64Array(DESCRIPTOR_DIM);
    let mean = 0;
    let k = 0;
    for (let dy = -DESCRIPTOR_RADIUS; dy <= DESCRIPTOR_RADIUS; dy++) {
      for (let dx = -DESCRIPTOR_RADIUS; dx <= DESCRIPTOR_RADIUS; dx++) {
        const v = img.pixels[(corner.y + dy) * width + corner.x + dx];
        desc[k++] = v;
        mean += v;
      }
    }
    mean /= DESCRIPTOR_DIM;
    let norm = 0;
    for (let i = 0; i < desc.length; i++) {
      desc[i] -= mean;
      norm += desc[i] * desc[i];
    }
    norm = Math.sqrt(norm);
    if (norm < 1e-9) continue; // flat patch, nothing to describe
    const out = new Float32Array(DESCRIPTOR_DIM);
    for (let i = 0; i < desc.length; i++) out[i] = desc[i] / norm;
    // renormalize in float32 so the stored vector is unit within 1e-4
    let n32 = 0;
    for (let i = 0; i < out.length; i++) n32 += out[i] * out[i];
    n32 = Math.sqrt(n32);
    for (let i = 0; i < out.length; i++) out[i] /= n32;
    points.push({ x: corner.x, y: corner.y, descriptor: out });
  }
  return points;
}
