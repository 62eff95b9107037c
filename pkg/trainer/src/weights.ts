/** Encoder presets, deterministic pretrained-weight artifacts, and the
 * binary tensor container used for both weight artifacts and training
 * checkpoints.
 *
 * The pretrained encoder weights are generated once from a fixed seed
 * (integer PRNG only, see rng.ts) and pinned by sha256, so every
 * machine materializes bit-identical artifacts and loading verifies the
 * checksum the way a downloaded weight file would be verified. Corrupt
 * or tampered files fail loudly.
 *
 * Container layout (little-endian):
 *   "GSWT1\n" | uint32 header length | JSON header | float32 data
 * The header lists tensors as {name, shape, offset, length} with byte
 * offsets into the data section, plus an optional meta object.
 */

import * as crypto from "node:crypto";
import * as fs from "node:fs";
import * as path from "node:path";
import { Rng } from "./rng.js";

export interface EncoderPreset {
  patchPx: number;
  dim: number;
  depth: number;
  heads: number;
  mlpRatio: number;
}

export const ENCODER_PRESETS: Record<string, EncoderPreset> = {
  // base-variant scale: 16 px patches, 12 blocks of width 768
  "vit-b16": { patchPx: 16, dim: 768, depth: 12, heads: 12, mlpRatio: 4 },
  // small scale for tests and the synthetic overfit harness;
  // dim >= patch pixel count (8*8*3) so the patch embedding loses nothing
  "vit-t8": { patchPx: 8, dim: 192, depth: 4, heads: 4, mlpRatio: 2 },
};

/** sha256 of each preset's generated artifact, frozen once. Loading a
 * preset without a pinned hash is an error: silent unverified weights
 * would defeat the point of pinning. */
export const ENCODER_SHA256: Record<string, string> = {
  "vit-b16": "aec31191c96719926208bbc166e508840bdb0b1567727708afff73472e362695",
  "vit-t8": "ca0578e59070ea8411eb7e883efa12e3cea1238542db70be8e5cb963ae8518e3",
};

export interface TensorSpec {
  name: string;
  shape: number[];
  /** normal-init std; 0 means fill with `fill` instead of noise */
  std: number;
  fill?: number;
}

export interface NamedTensor {
  shape: number[];
  data: Float32Array;
}

export type TensorMap = Map<string, NamedTensor>;

export function encoderTensorSpecs(p: EncoderPreset): TensorSpec[] {
  const d = p.dim;
  const specs: TensorSpec[] = [
    { name: "patch/kernel", shape: [p.patchPx, p.patchPx, 3, d],
      std: 1 / Math.sqrt(p.patchPx * p.patchPx * 3) },
    { name: "patch/bias", shape: [d], std: 0, fill: 0 },
  ];
  for (let i = 0; i < p.depth; i++) {
    const b = `b${i}`;
    specs.push(
      { name: `${b}/ln1/g`, shape: [d], std: 0, fill: 1 },
      { name: `${b}/ln1/b`, shape: [d], std: 0, fill: 0 },
      { name: `${b}/attn/qkv_w`, shape: [d, 3 * d], std: 1 / Math.sqrt(d) },
      { name: `${b}/attn/qkv_b`, shape: [3 * d], std: 0, fill: 0 },
      { name: `${b}/attn/proj_w`, shape: [d, d], std: 1 / Math.sqrt(d) },
      { name: `${b}/attn/proj_b`, shape: [d], std: 0, fill: 0 },
      { name: `${b}/ln2/g`, shape: [d], std: 0, fill: 1 },
      { name: `${b}/ln2/b`, shape: [d], std: 0, fill: 0 },
      { name: `${b}/mlp/fc1_w`, shape: [d, p.mlpRatio * d], std: 1 / Math.sqrt(d) },
      { name: `${b}/mlp/fc1_b`, shape: [p.mlpRatio * d], std: 0, fill: 0 },
      { name: `${b}/mlp/fc2_w`, shape: [p.mlpRatio * d, d],
        std: 1 / Math.sqrt(p.mlpRatio * d) },
      { name: `${b}/mlp/fc2_b`, shape: [d], std: 0, fill: 0 },
    );
  }
  specs.push(
    { name: "ln_f/g", shape: [d], std: 0, fill: 1 },
    { name: "ln_f/b", shape: [d], std: 0, fill: 0 },
  );
  return specs;
}

export const DECODER_WIDTH_LADDER = [256, 128, 64, 32];

export function decoderStageCount(p: EncoderPreset): number {
  const n = Math.log2(p.patchPx);
  if (!Number.isInteger(n)) {
    throw new Error(`patch size ${p.patchPx} is not a power of two`);
  }
  return n;
}

export function defaultDecoderWidths(p: EncoderPreset): number[] {
  const n = decoderStageCount(p);
  if (n > DECODER_WIDTH_LADDER.length) {
    throw new Error(`no default widths for ${n} decoder stages`);
  }
  return DECODER_WIDTH_LADDER.slice(0, n);
}

export function decoderTensorSpecs(
  p: EncoderPreset, numChannels: number, widths?: number[],
): TensorSpec[] {
  const w = widths ?? defaultDecoderWidths(p);
  if (w.length !== decoderStageCount(p)) {
    throw new Error(
      `decoder widths ${JSON.stringify(w)}: need ${decoderStageCount(p)} ` +
      `stages for ${p.patchPx} px patches`);
  }
  const specs: TensorSpec[] = [];
  let prev = p.dim;
  for (let i = 0; i < w.length; i++) {
    specs.push(
      // 2x2 stride-2 transposed conv in matMul form: every input pixel
      // scatters one 2x2 output block, so the kernel is a dense map from
      // the input channels to the 4 block cells and fan-in is prev
      { name: `dec/s${i}/convt_w`, shape: [prev, 4 * w[i]],
        std: 1 / Math.sqrt(prev) },
      { name: `dec/s${i}/convt_b`, shape: [w[i]], std: 0, fill: 0 },
      { name: `dec/s${i}/skip_w`, shape: [p.dim, w[i]],
        std: 1 / Math.sqrt(p.dim) },
      { name: `dec/s${i}/skip_b`, shape: [w[i]], std: 0, fill: 0 },
    );
    prev = w[i];
  }
  specs.push(
    // 1x1 conv, likewise a per-pixel matMul
    { name: "dec/head_w", shape: [prev, numChannels],
      std: 1 / Math.sqrt(prev) },
    { name: "dec/head_b", shape: [numChannels], std: 0, fill: 0 },
  );
  return specs;
}

export function paramCount(specs: TensorSpec[]): number {
  return specs.reduce(
    (sum, s) => sum + s.shape.reduce((a, b) => a * b, 1), 0);
}

export function generateTensors(specs: TensorSpec[], rng: Rng): TensorMap {
  const out: TensorMap = new Map();
  for (const spec of specs) {
    const n = spec.shape.reduce((a, b) => a * b, 1);
    const data = new Float32Array(n);
    if (spec.std === 0) {
      data.fill(spec.fill ?? 0);
    } else {
      const r = rng.fork(spec.name);
      for (let i = 0; i < n; i++) data[i] = r.normal() * spec.std;
    }
    out.set(spec.name, { shape: spec.shape.slice(), data });
  }
  return out;
}

const MAGIC = Buffer.from("GSWT1\n", "ascii");

export function serializeTensors(
  tensors: TensorMap, meta: Record<string, unknown> = {},
): Buffer {
  const entries: { name: string; shape: number[]; offset: number; length: number }[] = [];
  let offset = 0;
  for (const [name, t] of tensors) {
    const length = t.data.length * 4;
    entries.push({ name, shape: t.shape, offset, length });
    offset += length;
  }
  const header = Buffer.from(JSON.stringify({ meta, tensors: entries }), "utf-8");
  const lenBuf = Buffer.alloc(4);
  lenBuf.writeUInt32LE(header.length, 0);
  const data = Buffer.alloc(offset);
  for (const [name, t] of tensors) {
    const e = entries.find((x) => x.name === name)!;
    Buffer.from(t.data.buffer, t.data.byteOffset, e.length).copy(data, e.offset);
  }
  return Buffer.concat([MAGIC, lenBuf, header, data]);
}

export function parseTensors(buf: Buffer): { tensors: TensorMap; meta: Record<string, unknown> } {
  if (!buf.subarray(0, MAGIC.length).equals(MAGIC)) {
    throw new Error("not a tensor container (bad magic)");
  }
  const headerLen = buf.readUInt32LE(MAGIC.length);
  const headerStart = MAGIC.length + 4;
  const header = JSON.parse(buf.subarray(headerStart, headerStart + headerLen).toString("utf-8"));
  const dataStart = headerStart + headerLen;
  const tensors: TensorMap = new Map();
  for (const e of header.tensors) {
    const bytes = buf.subarray(dataStart + e.offset, dataStart + e.offset + e.length);
    // copy so the Float32Array is aligned and detached from the file buffer
    const data = new Float32Array(e.length / 4);
    data.set(new Float32Array(Uint8Array.from(bytes).buffer));
    tensors.set(e.name, { shape: e.shape, data });
  }
  return { tensors, meta: header.meta ?? {} };
}

export function sha256Hex(buf: Buffer): string {
  return crypto.createHash("sha256").update(buf).digest("hex");
}

export function encoderWeightsPath(weightsDir: string, presetName: string): string {
  return path.join(weightsDir, `${presetName}.bin`);
}

/** Materialize (if needed) and load the pretrained encoder artifact,
 * verifying its checksum against the pinned value. */
export function ensureEncoderWeights(weightsDir: string, presetName: string): TensorMap {
  const preset = ENCODER_PRESETS[presetName];
  if (!preset) {
    throw new Error(
      `unknown encoder ${JSON.stringify(presetName)}; ` +
      `have: ${Object.keys(ENCODER_PRESETS).join(", ")}`);
  }
  const expected = ENCODER_SHA256[presetName];
  if (!expected) {
    throw new Error(`encoder ${presetName} has no pinned checksum`);
  }
  const file = encoderWeightsPath(weightsDir, presetName);
  if (!fs.existsSync(file)) {
    const tensors = generateTensors(
      encoderTensorSpecs(preset), new Rng(`pretrained/${presetName}`));
    fs.mkdirSync(weightsDir, { recursive: true });
    fs.writeFileSync(file, serializeTensors(tensors, { kind: "encoder", preset: presetName }));
  }
  const buf = fs.readFileSync(file);
  const got = sha256Hex(buf);
  if (got !== expected) {
    throw new Error(
      `pretrained weights ${file}: sha256 mismatch (got ${got}, expected ` +
      `${expected}); the file is corrupt, delete it to regenerate`);
  }
  return parseTensors(buf).tensors;
}
