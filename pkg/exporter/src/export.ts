/**
 * Export job runner: images in, PNVF + PNVK + manifest fragment out.
 *
 * The resize policy (short-side resize to `size`, centre crop to a
 * square) fixes one output geometry per job; an image whose export
 * would drift from it aborts the job, while unreadable images are
 * skipped with a log line so a batch survives stray bad files.
 */

import { appendFileSync, mkdirSync, writeFileSync } from "fs";
import { join } from "path";

import { Backbone } from "./backbone";
import { ImageFormatError, loadImage, resizeCropSquare } from "./image";
import { DESCRIPTOR_DIM, detectKeypoints } from "./keypoints";
import { manifestLine, writeFeatureMap, writeKeypoints } from "./formats";

export interface ImageEntry {
  imageId: string;
  path: string;
  latitude?: number;
  longitude?: number;
  split?: string;
}

export interface ExportJob {
  images: ImageEntry[];
  outDir: string;
  /** square side after resize + crop; feature grid is size / 4 */
  size?: number;
  depth?: number;
  maxKeypoints?: number;
  seed?: number;
  log?: (line: string) => void;
}

export interface ExportResult {
  exported: string[];
  skipped: string[];
  manifestPath: string;
  featureHeight: number;
  featureWidth: number;
  depth: number;
}

export function runExport(job: ExportJob): ExportResult {
  const size = job.size ?? 64;
  const depth = job.depth ?? 16;
  const maxKeypoints = job.maxKeypoints ?? 64;
  const log = job.log ?? ((line: string) => console.error(line));
  if (size % 4 !== 0) throw new Error(`size must be divisible by 4, got ${size}`);
  mkdirSync(job.outDir, { recursive: true });

  const backbone = new Backbone(depth, job.seed ?? 0x5eed);
  const exported: string[] = [];
  const skipped: string[] = [];
  const lines: string[] = [];
  const expected = { height: size / 4, width: size / 4 };

  for (const entry of job.images) {
    let square;
    try {
      square = resizeCropSquare(loadImage(entry.path), size);
    } catch (err) {
      if (err instanceof ImageFormatError || (err as NodeJS.ErrnoException).code === "ENOENT") {
        log(`skip ${entry.imageId}: ${(err as Error).message}`);
        skipped.push(entry.imageId);
        continue;
      }
      throw err;
    }
    const tensor = backbone.extract(square.pixels, square.height, square.width);
    if (tensor.height !== expected.height || tensor.width !== expected.width) {
      throw new Error(
        `${entry.imageId}: feature geometry ${tensor.height}x${tensor.width} drifts from job ${expected.height}x${expected.width}`
      );
    }
    const featureName = `${entry.imageId}.pnvf`;
    const keypointName = `${entry.imageId}.pnvk`;
    writeFeatureMap(join(job.outDir, featureName), tensor);
    const points = detectKeypoints(square, maxKeypoints);
    writeKeypoints(join(job.outDir, keypointName), square.height, square.width, points);
    lines.push(
      manifestLine({
        imageId: entry.imageId,
        featurePath: featureName,
        keypointPath: keypointName,
        latitude: entry.latitude ?? 0,
        longitude: entry.longitude ?? 0,
        split: entry.split ?? "database",
      })
    );
    exported.push(entry.imageId);
  }

  const manifestPath = join(job.outDir, "manifest.csv");
  writeFileSync(manifestPath, lines.length ? lines.join("\n") + "\n" : "");
  // provenance note for downstream debugging: records the resize policy
  appendFileSync(
    join(job.outDir, "export-info.txt"),
    `size=${size} policy=short-side-resize+center-crop depth=${depth} ` +
      `layer=${backbone.layerName} keypoint_dim=${DESCRIPTOR_DIM} seed=${job.seed ?? 0x5eed}\n`
  );
  return {
    exported,
    skipped,
    manifestPath,
    featureHeight: expected.height,
    featureWidth: expected.width,
    depth,
  };
}
