import { mkdtempSync, readFileSync } from "fs";
import { tmpdir } from "os";
import { join } from "path";
import { describe, expect, it } from "vitest";

import { FeatureTensor } from "../src/backbone";
import {
  readFeatureMap,
  readKeypoints,
  writeFeatureMap,
  writeKeypoints,
  manifestLine,
} from "../src/formats";
import { Keypoint } from "../src/keypoints";

function tmp(): string {
  return mkdtempSync(join(tmpdir(), "exporter-"));
}

describe("feature map format", () => {
  it("round-trips bit-exactly", () => {
    const tensor: FeatureTensor = {
      height: 3,
      width: 4,
      depth: 2,
      data: Float32Array.from({ length: 24 }, (_, i) => Math.fround(Math.sin(i) * 3)),
    };
    const path = join(tmp(), "t.pnvf");
    writeFeatureMap(path, tensor);
    const back = readFeatureMap(path);
    expect(back.height).toBe(3);
    expect(back.width).toBe(4);
    expect(back.depth).toBe(2);
    expect(Array.from(back.data)).toEqual(Array.from(tensor.data));
  });

  it("writes the documented header layout", () => {
    const path = join(tmp(), "h.pnvf");
    writeFeatureMap(path, { height: 2, width: 5, depth: 3, data: new Float32Array(30) });
    const buf = readFileSync(path);
    expect(buf.toString("ascii", 0, 4)).toBe("PNVF");
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(2);
    expect(buf.readUInt32LE(12)).toBe(5);
    expect(buf.readUInt32LE(16)).toBe(3);
    expect(buf.length).toBe(20 + 30 * 4);
  });
});

describe("keypoint format", () => {
  it("round-trips points with coordinates and descriptors", () => {
    const points: Keypoint[] = [
      { x: 4.5, y: 7.25, descriptor: Float32Array.from([1, 0, 0]) },
      { x: 10, y: 3, descriptor: Float32Array.from([0, 0.6, 0.8]) },
    ];
    const path = join(tmp(), "k.pnvk");
    writeKeypoints(path, 64, 48, points);
    const back = readKeypoints(path);
    expect(back.imageHeight).toBe(64);
    expect(back.imageWidth).toBe(48);
    expect(back.points).toHaveLength(2);
    expect(back.points[0].x).toBeCloseTo(4.5, 6);
    expect(Array.from(back.points[1].descriptor)).toEqual(
      Array.from(Float32Array.from([0, 0.6, 0.8]))
    );
  });

  it("writes the documented header layout", () => {
    const path = join(tmp(), "h.pnvk");
    writeKeypoints(path, 100, 90, [{ x: 1, y: 2, descriptor: Float32Array.from([1, 0]) }]);
    const buf = readFileSync(path);
    expect(buf.toString("ascii", 0, 4)).toBe("PNVK");
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(100);
    expect(buf.readUInt32LE(12)).toBe(90);
    expect(buf.readUInt32LE(16)).toBe(1);
    expect(buf.readUInt32LE(20)).toBe(2);
  });
});

describe("manifest lines", () => {
  it("emits the six comma-separated columns", () => {
    const line = manifestLine({
      imageId: "img7",
      featurePath: "img7.pnvf",
      keypointPath: "img7.pnvk",
      latitude: 12.5,
      longitude: -3.25,
      split: "query",
    });
    expect(line).toBe("img7,img7.pnvf,img7.pnvk,12.5,-3.25,query");
  });
});
