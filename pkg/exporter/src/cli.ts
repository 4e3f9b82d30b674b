/**
 * Command line: export feature maps + keypoints for a list of images.
 *
 *   node dist/cli.js --list images.csv --out exports/ [--size 64] [--depth 16]
 *   node dist/cli.js --demo 3 --out exports/
 *
 * The list file has one `image_id,path[,lat,lon,split]` record per
 * line. `--demo N` synthesizes N procedural PGM images into the output
 * directory first, which is how the committed golden fixtures were
 * produced.
 */

import { readFileSync } from "fs";
import { join } from "path";

import { demoImage, writePgm } from "./image";
import { ExportJob, ImageEntry, runExport } from "./export";

function parseArgs(argv: string[]): Map<string, string> {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    if (!argv[i].startsWith("--")) throw new Error(`unexpected argument ${argv[i]}`);
    const key = argv[i].slice(2);
    const value = i + 1 < argv.length && !argv[i + 1].startsWith("--") ? argv[++i] : "true";
    args.set(key, value);
  }
  return args;
}

function loadList(path: string): ImageEntry[] {
  const entries: ImageEntry[] = [];
  for (const line of readFileSync(path, "utf-8").split("\n")) {
    if (!line.trim()) continue;
    const cols = line.split(",");
    if (cols.length < 2) throw new Error(`${path}: bad record: ${line}`);
    entries.push({
      imageId: cols[0],
      path: cols[1],
      latitude: cols.length > 2 ? parseFloat(cols[2]) : 0,
      longitude: cols.length > 3 ? parseFloat(cols[3]) : 0,
      split: cols.length > 4 ? cols[4] : "database",
    });
  }
  return entries;
}

export function main(argv: string[]): number {
  let args: Map<string, string>;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
  const outDir = args.get("out");
  if (!outDir) {
    console.error("usage: cli --out DIR (--list images.csv | --demo N) [--size N] [--depth N] [--keypoints N] [--seed N]");
    return 2;
  }

  let images: ImageEntry[];
  if (args.has("demo")) {
    const n = parseInt(args.get("demo") ?? "3", 10);
    require("fs").mkdirSync(outDir, { recursive: true });
    images = [];
    for (let i = 0; i < n; i++) {
      const path = join(outDir, `demo${String(i).padStart(2, "0")}.pgm`);
      writePgm(path, demoImage(i));
      images.push({ imageId: `demo${String(i).padStart(2, "0")}`, path, latitude: i * 0.01 });
    }
  } else if (args.has("list")) {
    images = loadList(args.get("list")!);
  } else {
    console.error("error: need --list or --demo");
    return 2;
  }

  const job: ExportJob = {
    images,
    outDir,
    size: args.has("size") ? parseInt(args.get("size")!, 10) : undefined,
    depth: args.has("depth") ? parseInt(args.get("depth")!, 10) : undefined,
    maxKeypoints: args.has("keypoints") ? parseInt(args.get("keypoints")!, 10) : undefined,
    seed: args.has("seed") ? parseInt(args.get("seed")!, 10) : undefined,
  };
  const result = runExport(job);
  console.log(
    `exported ${result.exported.length} image(s) at ` +
      `${result.featureHeight}x${result.featureWidth}x${result.depth}` +
      (result.skipped.length ? `, skipped ${result.skipped.length}` : "")
  );
  return result.exported.length > 0 ? 0 : 1;
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
