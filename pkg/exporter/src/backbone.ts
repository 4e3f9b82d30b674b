/**
 * Fixed convolutional feature extractor.
 *
 * Three 3x3 convolution blocks with ReLU and 2x2 average pooling after
 * the first two, so a size x size input yields a (size/4) x (size/4) x
 * depth feature map. Weights are frozen at construction from a seeded
 * generator and ship with the tool; the engine only requires that the
 * same exporter build always produces the same tensors.
 */

import { Rng } from "./rng";

export interface FeatureTensor {
  height: number;
  width: number;
  depth: number;
  /** row-major (y, x, channel) */
  data: Float32Array;
}

interface ConvLayer {
  inChannels: number;
  outChannels: number;
  /** [out][in][9] 3x3 kernels */
  kernels: Float64Array;
  bias: Float64Array;
}

function makeLayer(rng: Rng, inChannels: number, outChannels: number): ConvLayer {
  const kernels = new Float64Array(outChannels * inChannels * 9);
  const scale = Math.sqrt(2.0 / (inChannels * 9));
  for (let i = 0; i < kernels.length; i++) kernels[i] = rng.normal() * scale;
  const bias = new Float64Array(outChannels);
  for (let i = 0; i < outChannels; i++) bias[i] = 0.1 * rng.normal();
  return { inChannels, outChannels, kernels, bias };
}

function convRelu(
  input: Float64Array,
  height: number,
  width: number,
  layer: ConvLayer
): Float64Array {
  const out = new Float64Array(height * width * layer.outChannels);
  const cin = layer.inChannels;
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      for (let oc = 0; oc < layer.outChannels; oc++) {
        let acc = layer.bias[oc];
        for (let ky = -1; ky <= 1; ky++) {
          const sy = Math.min(Math.max(y + ky, 0), height - 1);
          for (let kx = -1; kx <= 1; kx++) {
            const sx = Math.min(Math.max(x + kx, 0), width - 1);
            const kBase = (oc * cin * 9) + (ky + 1) * 3 + (kx + 1);
            const pBase = (sy * width + sx) * cin;
            for (let ic = 0; ic < cin; ic++) {
              acc += layer.kernels[kBase + ic * 9] * input[pBase + ic];
            }
          }
        }
        out[(y * width + x) * layer.outChannels + oc] = acc > 0 ? acc : 0;
      }
    }
  }
  return out;
}

function avgPool2(input: Float64Array, height: number, width: number, channels: number): Float64Array {
  const oh = height >> 1;
  const ow = width >> 1;
  const out = new Float64Array(oh * ow * channels);
  for (let y = 0; y < oh; y++) {
    for (let x = 0; x < ow; x++) {
      for (let c = 0; c < channels; c++) {
        const a = input[((2 * y) * width + 2 * x) * channels + c];
        const b = input[((2 * y) * width + 2 * x + 1) * channels + c];
        const d = input[((2 * y + 1) * width + 2 * x) * channels + c];
        const e = input[((2 * y + 1) * width + 2 * x + 1) * channels + c];
        out[(y * ow + x) * channels + c] = (a + b + d + e) / 4;
      }
    }
  }
  return out;
}

export class Backbone {
  readonly depth: number;
  readonly layerName: string;
  private layers: ConvLayer[];

  constructor(depth = 16, seed = 0x5eed, layerName = "conv3") {
    this.depth = depth;
    this.layerName = layerName;
    const rng = new Rng(seed);
    const mid = Math.max(8, depth >> 1);
    this.layers = [makeLayer(rng, 1, 8), makeLayer(rng, 8, mid), makeLayer(rng, mid, depth)];
  }

  /** grayscale [0,1] pixels -> (h/4) x (w/4) x depth features */
  extract(pixels: Float64Array, height: number, width: number): FeatureTensor {
    if (height % 4 !== 0 || width % 4 !== 0) {
      throw new Error(`backbone needs dimensions divisible by 4, got ${height}x${width}`);
    }
    let act = convRelu(pixels, height, width, this.layers[0]);
    act = avgPool2(act, height, width, 8);
    let h = height >> 1;
    let w = width >> 1;
    act = convRelu(act, h, w, this.layers[1]);
    act = avgPool2(act, h, w, this.layers[1].outChannels);
    h >>= 1;
    w >>= 1;
    act = convRelu(act, h, w, this.layers[2]);
    return { height: h, width: w, depth: this.depth, data: Float32Array.from(act) };
  }
}
