/**
 * Binary writers (and readers, used by the tests) for the engine's
 * on-disk contract: PNVF feature maps, PNVK keypoint sets, and the
 * comma-separated manifest lines. Everything is little-endian and all
 * reals are float32, matching the consumer exactly.
 */

import { readFileSync, writeFileSync } from "fs";

import { FeatureTensor } from "./backbone";
import { Keypoint } from "./keypoints";

export const FEATURE_MAGIC = "PNVF";
export const KEYPOINT_MAGIC = "PNVK";
export const FORMAT_VERSION = 1;

export function writeFeatureMap(path: string, tensor: FeatureTensor): void {
  const header = Buffer.alloc(20);
  header.write(FEATURE_MAGIC, 0, "ascii");
  header.writeUInt32LE(FORMAT_VERSION, 4);
  header.writeUInt32LE(tensor.height, 8);
  header.writeUInt32LE(tensor.width, 12);
  header.writeUInt32LE(tensor.depth, 16);
  const body = Buffer.alloc(tensor.data.length * 4);
  for (let i = 0; i < tensor.data.length; i++) body.writeFloatLE(tensor.data[i], i * 4);
  writeFileSync(path, Buffer.concat([header, body]));
}

export function readFeatureMap(path: string): FeatureTensor {
  const buf = readFileSync(path);
  if (buf.toString("ascii", 0, 4) !== FEATURE_MAGIC) throw new Error(`${path}: bad magic`);
  if (buf.readUInt32LE(4) !== FORMAT_VERSION) throw new Error(`${path}: bad version`);
  const height = buf.readUInt32LE(8);
  const width = buf.readUInt32LE(12);
  const depth = buf.readUInt32LE(16);
  const count = height * width * depth;
  if (buf.length !== 20 + count * 4) throw new Error(`${path}: bad payload size`);
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) data[i] = buf.readFloatLE(20 + i * 4);
  return { height, width, depth, data };
}

export function writeKeypoints(
  path: string,
  imageHeight: number,
  imageWidth: number,
  points: Keypoint[]
): void {
  const dim = points.length ? points[0].descriptor.length : 0;
  const header = Buffer.alloc(24);
  header.write(KEYPOINT_MAGIC, 0, "ascii");
  header.writeUInt32LE(FORMAT_VERSION, 4);
  header.writeUInt32LE(imageHeight, 8);
  header.writeUInt32LE(imageWidth, 12);
  header.writeUInt32LE(points.length, 16);
  header.writeUInt32LE(dim, 20);
  const body = Buffer.alloc(points.length * (2 + dim) * 4);
  let off = 0;
  for (const p of points) {
    body.writeFloatLE(p.x, off);
    body.writeFloatLE(p.y, off + 4);
    for (let i = 0; i < dim; i++) body.writeFloatLE(p.descriptor[i], off + 8 + i * 4);
    off += (2 + dim) * 4;
  }
  writeFileSync(path, Buffer.concat([header, body]));
}

export function readKeypoints(path: string): {
  imageHeight: number;
  imageWidth: number;
  points: Keypoint[];
} {
  const buf = readFileSync(path);
  if (buf.toString("ascii", 0, 4) !== KEYPOINT_MAGIC) throw new Error(`${path}: bad magic`);
  if (buf.readUInt32LE(4) !== FORMAT_VERSION) throw new Error(`${path}: bad version`);
  const imageHeight = buf.readUInt32LE(8);
  const imageWidth = buf.readUInt32LE(12);
  const count = buf.readUInt32LE(16);
  const dim = buf.readUInt32LE(20);
  if (buf.length !== 24 + count * (2 + dim) * 4) throw new Error(`${path}: bad payload size`);
  const points: Keypoint[] = [];
  for (let i = 0; i < count; i++) {
    const off = 24 + i * (2 + dim) * 4;
    const descriptor = new Float32Array(dim);
    for (let d = 0; d < dim; d++) descriptor[d] = buf.readFloatLE(off + 8 + d * 4);
    points.push({ x: buf.readFloatLE(off), y: buf.readFloatLE(off + 4), descriptor });
  }
  return { imageHeight, imageWidth, points };
}

export interface ManifestRow {
  imageId: string;
  featurePath: string;
  keypointPath: string;
  latitude: number;
  longitude: number;
  split: string;
}

export function manifestLine(row: ManifestRow): string {
  return [
    row.imageId,
    row.featurePath,
    row.keypointPath,
    row.latitude,
    row.longitude,
    row.split,
  ].join(",");
}
