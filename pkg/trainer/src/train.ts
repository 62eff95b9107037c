/** Training loop: frozen encoder, decoder-only gradient steps.
 *
 * Tiles are decoded once and kept in a bounded cache; every epoch draws
 * the manifest's repetition-weighted shuffle. Only the decoder variables
 * are handed to the optimizer, so the encoder cannot move even in
 * principle, and the result records the encoder checksum before and
 * after as proof.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { initBackend } from "./backend.js";
import { TrainingConfig } from "./config.js";
import { oneHotTarget, unifiedFocalLoss } from "./loss.js";
import {
  Manifest, ManifestError, classIds, loadManifest, resolveTilePath,
  trainRecords,
} from "./manifest.js";
import { SegModel } from "./model.js";
import { readImageRGB, readMask } from "./png.js";
import { epochTileIds, makeBatches } from "./sampler.js";

export interface TrainOptions {
  outDir: string;
  maxSteps?: number;
  /** seeded single-worker run; the loop is deterministic either way */
  deterministic?: boolean;
  log?: (message: string) => void;
  logEvery?: number;
}

export interface TrainResult {
  checkpoint: string;
  steps: number;
  finalLoss: number;
  encoderSha256Before: string;
  encoderSha256After: string;
}

interface DecodedTile {
  image: Float32Array; // H*W*3 in [0,1]
  target: Int32Array; // H*W channel indices
}

const TILE_CACHE_CAP = 256;

class TileLoader {
  private readonly cache = new Map<number, DecodedTile>();
  private readonly classToChannel: Int32Array;

  constructor(
    private readonly manifestPath: string,
    private readonly manifest: Manifest,
    private readonly inputPx: number,
  ) {
    this.classToChannel = new Int32Array(256).fill(-1);
    this.classToChannel[0] = 0;
    classIds(manifest).forEach((id, i) => {
      this.classToChannel[id] = i + 1;
    });
  }

  get(tileId: number): DecodedTile {
    const hit = this.cache.get(tileId);
    if (hit) return hit;
    const rec = this.manifest.records.find((r) => r.tile_id === tileId);
    if (!rec) throw new ManifestError(`no record for tile ${tileId}`);
    const img = readImageRGB(resolveTilePath(this.manifestPath, rec.image_path));
    const mask = readMask(resolveTilePath(this.manifestPath, rec.mask_path));
    for (const r of [img, mask]) {
      if (r.width !== this.inputPx || r.height !== this.inputPx) {
        throw new ManifestError(
          `tile ${tileId}: raster is ${r.width}x${r.height} but the model ` +
          `input is ${this.inputPx}; set inputPx to the dataset tile size`);
      }
    }
    const image = new Float32Array(img.data.length);
    for (let i = 0; i < img.data.length; i++) image[i] = img.data[i] / 255;
    const target = new Int32Array(mask.data.length);
    for (let i = 0; i < mask.data.length; i++) {
      const ch = this.classToChannel[mask.data[i]];
      if (ch < 0) {
        throw new ManifestError(
          `tile ${tileId}: mask contains class id ${mask.data[i]} which is ` +
          `not in the manifest class table`);
      }
      target[i] = ch;
    }
    const tile = { image, target };
    if (this.cache.size >= TILE_CACHE_CAP) {
      const oldest = this.cache.keys().next().value as number;
      this.cache.delete(oldest);
    }
    this.cache.set(tileId, tile);
    return tile;
  }
}

function isOomError(e: unknown): boolean {
  const msg = String((e as Error)?.message ?? e).toLowerCase();
  return msg.includes("memory") || msg.includes("alloc") || msg.includes("oom");
}

export async function train(cfg: TrainingConfig, opts: TrainOptions): Promise<TrainResult> {
  const backend = await initBackend();
  const log = opts.log ?? ((m: string) => process.stderr.write(m + "\n"));
  log(`backend: ${backend}`);
  const manifest = loadManifest(cfg.manifest);
  const records = trainRecords(manifest);
  if (records.length === 0) {
    throw new ManifestError(`manifest ${cfg.manifest}: train split is empty`);
  }
  const ids = classIds(manifest);
  const model = SegModel.build({
    encoder: cfg.encoder,
    inputPx: cfg.inputPx,
    classIds: ids,
    decoderWidths: cfg.decoderWidths,
    seed: cfg.seed,
  }, cfg.weightsDir);
  const encoderSha256Before = model.encoderSha256();
  log(`model: encoder ${cfg.encoder} (${model.encoderParamCount()} params, ` +
      `frozen), decoder ${model.decoderParamCount()} params, ` +
      `${ids.length} foreground classes`);

  const loader = new TileLoader(cfg.manifest, manifest, cfg.inputPx);
  const optimizer = tf.train.adam(cfg.learningRate);
  const px = cfg.inputPx;
  const channels = ids.length + 1;
  const maxSteps = opts.maxSteps ?? cfg.maxSteps ?? Infinity;
  const logEvery = opts.logEvery ?? 25;
  const trainable = model.trainableVariables();

  let step = 0;
  let lastLoss = NaN;
  const logRows: string[] = [];
  outer:
  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    const order = epochTileIds(records, cfg.seed, epoch);
    for (const batch of makeBatches(order, cfg.batchSize)) {
      const b = batch.tileIds.length;
      const imageBuf = new Float32Array(b * px * px * 3);
      const targetBuf = new Int32Array(b * px * px);
      batch.tileIds.forEach((tid, i) => {
        const tile = loader.get(tid);
        imageBuf.set(tile.image, i * px * px * 3);
        targetBuf.set(tile.target, i * px * px);
      });
      const padded = batch.weights.some((w) => w === 0);
      try {
        const images = tf.tensor4d(imageBuf, [b, px, px, 3]);
        const target = tf.tensor3d(targetBuf, [b, px, px], "int32");
        const weights = padded
          ? tf.tensor1d(batch.weights, "float32") : undefined;
        const lossFn = () => tf.tidy(() => {
          const logits = model.forward(images);
          const y = oneHotTarget(target, channels);
          return unifiedFocalLoss(logits, y, cfg.loss, weights);
        });
        const { value, grads } = tf.variableGrads(lossFn, trainable);
        // variableGrads hands back plain tensors keyed by variable name,
        // which is what applyGradients consumes at runtime
        optimizer.applyGradients(grads as Record<string, tf.Variable>);
        lastLoss = value.dataSync()[0];
        value.dispose();
        for (const g of Object.values(grads)) g.dispose();
        images.dispose();
        target.dispose();
        weights?.dispose();
      } catch (e) {
        if (isOomError(e)) {
          throw new Error(
            `out of memory during training step ${step}; ` +
            `retry with a smaller batchSize (currently ${cfg.batchSize}) ` +
            `or a smaller inputPx`, { cause: e });
        }
        throw e;
      }
      step++;
      if (step % logEvery === 0 || step === 1) {
        log(`step ${step} epoch ${epoch} loss ${lastLoss.toFixed(5)}`);
        logRows.push(JSON.stringify({ step, epoch, loss: lastLoss }));
      }
      if (step >= maxSteps) break outer;
    }
  }
  optimizer.dispose();

  const encoderSha256After = model.encoderSha256();
  fs.mkdirSync(opts.outDir, { recursive: true });
  const checkpoint = path.join(opts.outDir, "checkpoint.bin");
  model.saveCheckpoint(checkpoint, {
    step,
    loss: cfg.loss,
    manifestName: manifest.name,
    manifestConfigHash: manifest.config_hash,
  });
  fs.writeFileSync(path.join(opts.outDir, "train_log.jsonl"),
                   logRows.join("\n") + (logRows.length ? "\n" : ""));
  const result: TrainResult = {
    checkpoint, steps: step, finalLoss: lastLoss,
    encoderSha256Before, encoderSha256After,
  };
  fs.writeFileSync(path.join(opts.outDir, "result.json"),
                   JSON.stringify({ ...result, config: cfg }, null, 2) + "\n");
  model.dispose();
  if (encoderSha256Before !== encoderSha256After) {
    throw new Error(
      "frozen-encoder contract violated: encoder weights changed during " +
      "training");
  }
  log(`trained ${step} steps, final loss ${lastLoss.toFixed(5)}, ` +
      `checkpoint ${checkpoint}`);
  return result;
}
