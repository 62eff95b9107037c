/** Segmentation model: frozen vision-transformer encoder, trainable
 * convolutional decoder.
 *
 * The encoder patch-embeds the image, adds fixed sinusoidal positions,
 * and runs pre-norm transformer blocks. Its weights load from the
 * pretrained artifact as non-trainable variables, so no optimizer step
 * can touch them. The decoder upsamples the token grid back to pixel
 * resolution with one transposed-convolution stage per factor of two
 * (log2(patch) stages), each fed by a projected skip from an
 * intermediate encoder block, and ends in a 1x1 conv producing
 * per-pixel logits over background + foreground classes.
 */

import * as tf from "@tensorflow/tfjs";
import {
  ENCODER_PRESETS, EncoderPreset, NamedTensor, TensorMap,
  decoderStageCount, decoderTensorSpecs, defaultDecoderWidths,
  encoderTensorSpecs, ensureEncoderWeights, generateTensors, paramCount,
  parseTensors, serializeTensors, sha256Hex,
} from "./weights.js";
import { Rng } from "./rng.js";
import * as fs from "node:fs";
import * as path from "node:path";

export interface ModelConfig {
  encoder: string;
  inputPx: number;
  /** foreground class ids, ascending; logit channel c is classIds[c-1] */
  classIds: number[];
  decoderWidths?: number[];
  seed: string;
}

export interface CheckpointMeta {
  encoder: string;
  inputPx: number;
  classIds: number[];
  decoderWidths: number[];
  seed: string;
  step: number;
  [key: string]: unknown;
}

function layerNorm(x: tf.Tensor, g: tf.Tensor, b: tf.Tensor): tf.Tensor {
  const m = tf.mean(x, -1, true);
  const v = tf.mean(tf.square(tf.sub(x, m)), -1, true);
  return tf.add(tf.mul(tf.div(tf.sub(x, m), tf.sqrt(tf.add(v, 1e-6))), g), b);
}

function gelu(x: tf.Tensor): tf.Tensor {
  // tanh approximation; exactness does not matter for a frozen encoder
  const c = Math.sqrt(2 / Math.PI);
  const inner = tf.mul(c, tf.add(x, tf.mul(0.044715, tf.mul(x, tf.mul(x, x)))));
  return tf.mul(tf.mul(0.5, x), tf.add(1, tf.tanh(inner)));
}

/** Fixed 2-D sinusoidal position table for an h x w token grid. */
export function positionalEncoding(h: number, w: number, dim: number): tf.Tensor2D {
  const half = dim / 2;
  const table = new Float32Array(h * w * dim);
  for (let r = 0; r < h; r++) {
    for (let c = 0; c < w; c++) {
      const base = (r * w + c) * dim;
      for (let i = 0; i < half / 2; i++) {
        const freq = 1 / Math.pow(10000, (2 * i) / half);
        table[base + 2 * i] = Math.sin(r * freq);
        table[base + 2 * i + 1] = Math.cos(r * freq);
        table[base + half + 2 * i] = Math.sin(c * freq);
        table[base + half + 2 * i + 1] = Math.cos(c * freq);
      }
    }
  }
  return tf.tensor2d(table, [h * w, dim]);
}

/** Encoder block indices feeding the decoder skips, evenly spaced and
 * ending at the last block. */
export function skipBlockIndices(depth: number, stages: number): number[] {
  const idx: number[] = [];
  for (let i = 0; i < stages; i++) {
    idx.push(Math.ceil(((i + 1) * depth) / stages) - 1);
  }
  return idx;
}

export class SegModel {
  readonly config: Required<ModelConfig>;
  readonly preset: EncoderPreset;
  readonly numChannels: number;
  private readonly enc: Map<string, tf.Variable>;
  private readonly dec: Map<string, tf.Variable>;
  private readonly pos: tf.Tensor2D;

  private constructor(config: Required<ModelConfig>, encWeights: TensorMap,
                      decWeights: TensorMap) {
    const preset = ENCODER_PRESETS[config.encoder];
    if (!preset) {
      throw new Error(`unknown encoder ${JSON.stringify(config.encoder)}`);
    }
    if (config.inputPx % preset.patchPx !== 0 || config.inputPx <= 0) {
      throw new Error(
        `input size ${config.inputPx} is not a multiple of the ` +
        `${preset.patchPx} px patch`);
    }
    if (config.classIds.length === 0) {
      throw new Error("model needs at least one foreground class");
    }
    this.config = config;
    this.preset = preset;
    this.numChannels = config.classIds.length + 1;
    // no explicit tf names: the engine requires global uniqueness and
    // several models can live in one process (train then predict)
    const mkVars = (weights: TensorMap, trainable: boolean) => {
      const vars = new Map<string, tf.Variable>();
      for (const [name, t] of weights) {
        vars.set(name, tf.variable(tf.tensor(t.data, t.shape), trainable));
      }
      return vars;
    };
    this.enc = mkVars(encWeights, false);
    this.dec = mkVars(decWeights, true);
    const side = config.inputPx / preset.patchPx;
    this.pos = positionalEncoding(side, side, preset.dim);
  }

  static build(config: ModelConfig, weightsDir: string): SegModel {
    const preset = ENCODER_PRESETS[config.encoder];
    if (!preset) {
      throw new Error(`unknown encoder ${JSON.stringify(config.encoder)}`);
    }
    const full: Required<ModelConfig> = {
      ...config,
      decoderWidths: config.decoderWidths ?? defaultDecoderWidths(preset),
    };
    const encWeights = ensureEncoderWeights(weightsDir, config.encoder);
    const decWeights = generateTensors(
      decoderTensorSpecs(preset, full.classIds.length + 1, full.decoderWidths),
      new Rng(`${config.seed}/decoder`));
    return new SegModel(full, encWeights, decWeights);
  }

  /** Images [B, H, W, 3] in [0, 1] to logits [B, H, W, C+1]. */
  forward(images: tf.Tensor4D): tf.Tensor4D {
    const [b, h, w] = [images.shape[0], images.shape[1], images.shape[2]];
    if (h !== this.config.inputPx || w !== this.config.inputPx) {
      throw new Error(
        `model expects ${this.config.inputPx} px inputs, got ${h}x${w}`);
    }
    const p = this.preset;
    const side = h / p.patchPx;
    const n = side * side;
    const ev = (name: string) => this.enc.get(name)!;
    const dv = (name: string) => this.dec.get(name)!;
    return tf.tidy(() => {
      const embedded = tf.add(
        tf.conv2d(images, ev("patch/kernel") as unknown as tf.Tensor4D,
                  p.patchPx, "valid"),
        ev("patch/bias"));
      let x = tf.add(embedded.reshape([b, n, p.dim]), this.pos);
      const blockOuts: tf.Tensor[] = [];
      const dh = p.dim / p.heads;
      for (let i = 0; i < p.depth; i++) {
        const pre = `b${i}`;
        const a = layerNorm(x, ev(`${pre}/ln1/g`), ev(`${pre}/ln1/b`));
        const qkv = tf.add(
          tf.matMul(a as tf.Tensor3D, ev(`${pre}/attn/qkv_w`) as unknown as tf.Tensor2D),
          ev(`${pre}/attn/qkv_b`));
        const heads = (t: tf.Tensor) =>
          t.reshape([b, n, p.heads, dh]).transpose([0, 2, 1, 3]);
        const q = heads(tf.slice(qkv, [0, 0, 0], [b, n, p.dim]));
        const k = heads(tf.slice(qkv, [0, 0, p.dim], [b, n, p.dim]));
        const v = heads(tf.slice(qkv, [0, 0, 2 * p.dim], [b, n, p.dim]));
        const att = tf.softmax(
          tf.mul(tf.matMul(q as tf.Tensor4D, k as tf.Tensor4D, false, true),
                 1 / Math.sqrt(dh)), -1);
        const ctx = tf.matMul(att as tf.Tensor4D, v as tf.Tensor4D)
          .transpose([0, 2, 1, 3]).reshape([b, n, p.dim]);
        const proj = tf.add(
          tf.matMul(ctx as tf.Tensor3D, ev(`${pre}/attn/proj_w`) as unknown as tf.Tensor2D),
          ev(`${pre}/attn/proj_b`));
        x = tf.add(x, proj);
        const m = layerNorm(x, ev(`${pre}/ln2/g`), ev(`${pre}/ln2/b`));
        const h1 = gelu(tf.add(
          tf.matMul(m as tf.Tensor3D, ev(`${pre}/mlp/fc1_w`) as unknown as tf.Tensor2D),
          ev(`${pre}/mlp/fc1_b`)));
        const h2 = tf.add(
          tf.matMul(h1 as tf.Tensor3D, ev(`${pre}/mlp/fc2_w`) as unknown as tf.Tensor2D),
          ev(`${pre}/mlp/fc2_b`));
        x = tf.add(x, h2);
        blockOuts.push(x);
      }
      const feat = layerNorm(x, ev("ln_f/g"), ev("ln_f/b"));

      const widths = this.config.decoderWidths;
      const skips = skipBlockIndices(p.depth, widths.length);
      let cur = feat.reshape([b, side, side, p.dim]) as tf.Tensor4D;
      let size = side;
      let ch = p.dim;
      for (let i = 0; i < widths.length; i++) {
        // 2x upsample: per-pixel linear map onto a 2x2 block, cells then
        // interleaved into the spatial grid. Expressed as matMul rather
        // than conv2dTranspose so every backend can take its gradient.
        const blocks = tf.matMul(
          cur.reshape([b * size * size, ch]) as tf.Tensor2D,
          dv(`dec/s${i}/convt_w`) as unknown as tf.Tensor2D);
        const up = tf.add(
          blocks.reshape([b, size, size, 2, 2, widths[i]])
            .transpose([0, 1, 3, 2, 4, 5])
            .reshape([b, size * 2, size * 2, widths[i]]),
          dv(`dec/s${i}/convt_b`));
        // flatten tokens before projecting: the engine cannot backprop a
        // batch-broadcast matMul into the rank-2 weight
        const flatTok = blockOuts[skips[i]].reshape([b * n, p.dim]) as tf.Tensor2D;
        const skipTok = tf.add(
          tf.matMul(flatTok, dv(`dec/s${i}/skip_w`) as unknown as tf.Tensor2D),
          dv(`dec/s${i}/skip_b`));
        const skip = tf.image.resizeBilinear(
          skipTok.reshape([b, side, side, widths[i]]) as tf.Tensor4D,
          [size * 2, size * 2]);
        cur = tf.relu(tf.add(up, skip)) as tf.Tensor4D;
        size *= 2;
        ch = widths[i];
      }
      const logits = tf.add(
        tf.matMul(cur.reshape([b * size * size, ch]) as tf.Tensor2D,
                  dv("dec/head_w") as unknown as tf.Tensor2D)
          .reshape([b, size, size, this.numChannels]),
        dv("dec/head_b"));
      return logits as tf.Tensor4D;
    });
  }

  trainableVariables(): tf.Variable[] {
    return [...this.dec.values()];
  }

  /** Encoder weights as raw little-endian float32 bytes in spec order. */
  encoderBytes(): Buffer {
    const specs = encoderTensorSpecs(this.preset);
    const parts: Buffer[] = [];
    for (const s of specs) {
      const data = this.enc.get(s.name)!.dataSync() as Float32Array;
      parts.push(Buffer.from(data.buffer, data.byteOffset, data.length * 4));
    }
    return Buffer.concat(parts);
  }

  encoderSha256(): string {
    return sha256Hex(this.encoderBytes());
  }

  encoderParamCount(): number {
    return paramCount(encoderTensorSpecs(this.preset));
  }

  decoderParamCount(): number {
    return paramCount(decoderTensorSpecs(
      this.preset, this.numChannels, this.config.decoderWidths));
  }

  decoderTensors(): TensorMap {
    const out: TensorMap = new Map();
    for (const [name, v] of this.dec) {
      out.set(name, {
        shape: v.shape.slice(),
        data: v.dataSync() as Float32Array,
      } as NamedTensor);
    }
    return out;
  }

  saveCheckpoint(file: string, meta: Omit<CheckpointMeta, keyof ModelConfig | "decoderWidths"> & { step: number }): void {
    const fullMeta: CheckpointMeta = {
      ...meta,
      encoder: this.config.encoder,
      inputPx: this.config.inputPx,
      classIds: this.config.classIds,
      decoderWidths: this.config.decoderWidths,
      seed: this.config.seed,
    };
    fs.mkdirSync(path.dirname(file), { recursive: true });
    fs.writeFileSync(file, serializeTensors(this.decoderTensors(), fullMeta));
  }

  static fromCheckpoint(file: string, weightsDir: string): { model: SegModel; meta: CheckpointMeta } {
    if (!fs.existsSync(file)) {
      throw new Error(`checkpoint not found: ${file}`);
    }
    const { tensors, meta } = parseTensors(fs.readFileSync(file));
    const m = meta as unknown as CheckpointMeta;
    for (const key of ["encoder", "inputPx", "classIds", "decoderWidths", "seed"]) {
      if (!(key in m)) {
        throw new Error(`checkpoint ${file} is missing meta key ${key}`);
      }
    }
    const encWeights = ensureEncoderWeights(weightsDir, m.encoder);
    const config: Required<ModelConfig> = {
      encoder: m.encoder, inputPx: m.inputPx, classIds: m.classIds,
      decoderWidths: m.decoderWidths, seed: m.seed,
    };
    const model = new SegModel(config, encWeights, tensors);
    return { model, meta: m };
  }

  dispose(): void {
    for (const v of this.enc.values()) v.dispose();
    for (const v of this.dec.values()) v.dispose();
    this.pos.dispose();
  }
}
