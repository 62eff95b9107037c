/** Batch inference: turn a checkpoint plus image tiles into mask tiles.
 *
 * Output masks mirror the dataset convention the evaluator expects:
 * mask_{tile_id}_{tag}.png, single channel, class ids as pixel values,
 * world file copied from the source image so georeferencing survives.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { initBackend } from "./backend.js";
import { SegModel } from "./model.js";
import { copyWorldFile, readImageRGB, writeMask } from "./png.js";

export interface PredictOptions {
  checkpoint: string;
  imagesDir: string;
  outDir: string;
  /** only predict tiles whose filename tag matches */
  tag?: string;
  weightsDir: string;
  log?: (message: string) => void;
}

const IMAGE_RE = /^img_(\d+)_(.+)\.png$/;

export async function predict(opts: PredictOptions): Promise<number> {
  await initBackend();
  const log = opts.log ?? ((m: string) => process.stderr.write(m + "\n"));
  if (!fs.existsSync(opts.imagesDir)) {
    throw new Error(`image directory not found: ${opts.imagesDir}`);
  }
  const entries = fs.readdirSync(opts.imagesDir).sort()
    .map((name) => ({ name, m: IMAGE_RE.exec(name) }))
    .filter((e): e is { name: string; m: RegExpExecArray } => e.m !== null)
    .filter((e) => opts.tag === undefined || e.m[2] === opts.tag);
  if (entries.length === 0) {
    throw new Error(
      `no img_*.png tiles in ${opts.imagesDir}` +
      (opts.tag !== undefined ? ` with tag ${opts.tag}` : ""));
  }

  const { model, meta } = SegModel.fromCheckpoint(opts.checkpoint, opts.weightsDir);
  const px = meta.inputPx;
  // logit channel 0 is background (class id 0), channel c >= 1 is classIds[c-1]
  const lut = new Uint8Array(meta.classIds.length + 1);
  lut[0] = 0;
  meta.classIds.forEach((id, i) => { lut[i + 1] = id; });

  fs.mkdirSync(opts.outDir, { recursive: true });
  let written = 0;
  for (const { name, m } of entries) {
    const imagePath = path.join(opts.imagesDir, name);
    const img = readImageRGB(imagePath);
    if (img.width !== px || img.height !== px) {
      throw new Error(
        `${name}: tile is ${img.width}x${img.height} but the checkpoint ` +
        `was trained on ${px}px inputs`);
    }
    const floats = new Float32Array(img.data.length);
    for (let i = 0; i < img.data.length; i++) floats[i] = img.data[i] / 255;
    const classes = tf.tidy(() => {
      const input = tf.tensor4d(floats, [1, px, px, 3]);
      const logits = model.forward(input);
      return logits.argMax(-1);
    });
    const channelIdx = classes.dataSync();
    classes.dispose();
    const maskData = new Uint8Array(px * px);
    for (let i = 0; i < maskData.length; i++) maskData[i] = lut[channelIdx[i]];
    const maskPath = path.join(opts.outDir, `mask_${m[1]}_${m[2]}.png`);
    writeMask(maskPath, { width: px, height: px, data: maskData });
    copyWorldFile(imagePath, maskPath);
    written++;
  }
  model.dispose();
  log(`predicted ${written} tiles into ${opts.outDir}`);
  return written;
}
