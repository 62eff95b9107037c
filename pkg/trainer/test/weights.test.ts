import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, describe, expect, test } from "vitest";
import { Rng } from "../src/rng.js";
import {
  DECODER_WIDTH_LADDER, ENCODER_PRESETS, ENCODER_SHA256, decoderStageCount,
  decoderTensorSpecs, defaultDecoderWidths, encoderTensorSpecs,
  encoderWeightsPath, ensureEncoderWeights, generateTensors, paramCount,
  parseTensors, serializeTensors, sha256Hex,
} from "../src/weights.js";

// shared cache so the artifact generates once across the whole suite
const WEIGHTS_DIR = fileURLToPath(new URL("../weights", import.meta.url));
const scratch: string[] = [];

afterAll(() => {
  for (const d of scratch) fs.rmSync(d, { recursive: true, force: true });
});

function tmpdir(): string {
  const d = fs.mkdtempSync(path.join(os.tmpdir(), "weights-test-"));
  scratch.push(d);
  return d;
}

describe("generation", () => {
  test("same seed generates byte-identical tensors", () => {
    const specs = encoderTensorSpecs(ENCODER_PRESETS["vit-t8"]).slice(0, 4);
    const a = generateTensors(specs, new Rng("gen"));
    const b = generateTensors(specs, new Rng("gen"));
    const c = generateTensors(specs, new Rng("other"));
    for (const s of specs) {
      expect(Array.from(a.get(s.name)!.data)).toEqual(Array.from(b.get(s.name)!.data));
    }
    const noisy = specs.find((s) => s.std > 0)!.name;
    expect(Array.from(a.get(noisy)!.data)).not.toEqual(Array.from(c.get(noisy)!.data));
  });

  test("fills and stds land where declared", () => {
    const preset = ENCODER_PRESETS["vit-t8"];
    const tensors = generateTensors(encoderTensorSpecs(preset), new Rng("fill"));
    const ln = tensors.get("b0/ln1/g")!;
    expect(ln.data.every((v) => v === 1)).toBe(true);
    const bias = tensors.get("patch/bias")!;
    expect(bias.data.every((v) => v === 0)).toBe(true);
    const qkv = tensors.get("b0/attn/qkv_w")!;
    const meanAbs = qkv.data.reduce((s, v) => s + Math.abs(v), 0) / qkv.data.length;
    // half-normal mean is std*sqrt(2/pi) ~ 0.8*std; just pin the scale
    const std = 1 / Math.sqrt(preset.dim);
    expect(meanAbs).toBeGreaterThan(0.5 * std);
    expect(meanAbs).toBeLessThan(1.2 * std);
  });
});

describe("container", () => {
  test("serialize/parse round-trips tensors and meta", () => {
    const tensors = generateTensors(
      [{ name: "a/w", shape: [2, 3], std: 0.5 },
       { name: "a/b", shape: [3], std: 0, fill: 7 }],
      new Rng("rt"));
    const buf = serializeTensors(tensors, { kind: "test", step: 3 });
    const back = parseTensors(buf);
    expect(back.meta).toEqual({ kind: "test", step: 3 });
    expect(back.tensors.get("a/w")!.shape).toEqual([2, 3]);
    expect(Array.from(back.tensors.get("a/w")!.data))
      .toEqual(Array.from(tensors.get("a/w")!.data));
    expect(Array.from(back.tensors.get("a/b")!.data)).toEqual([7, 7, 7]);
  });

  test("bad magic is rejected", () => {
    expect(() => parseTensors(Buffer.from("not a container")))
      .toThrow(/magic/);
  });
});

describe("pretrained encoder artifacts", () => {
  test("vit-t8 materializes, verifies, and reloads", () => {
    const tensors = ensureEncoderWeights(WEIGHTS_DIR, "vit-t8");
    const file = encoderWeightsPath(WEIGHTS_DIR, "vit-t8");
    expect(fs.existsSync(file)).toBe(true);
    expect(sha256Hex(fs.readFileSync(file))).toBe(ENCODER_SHA256["vit-t8"]);
    const again = ensureEncoderWeights(WEIGHTS_DIR, "vit-t8");
    expect(again.size).toBe(tensors.size);
    const specs = encoderTensorSpecs(ENCODER_PRESETS["vit-t8"]);
    expect([...tensors.keys()]).toEqual(specs.map((s) => s.name));
  });

  test("a corrupt artifact fails the checksum loudly", () => {
    const dir = tmpdir();
    ensureEncoderWeights(dir, "vit-t8");
    const file = encoderWeightsPath(dir, "vit-t8");
    const buf = fs.readFileSync(file);
    buf[buf.length - 5] ^= 0xff;
    fs.writeFileSync(file, buf);
    expect(() => ensureEncoderWeights(dir, "vit-t8"))
      .toThrow(/sha256 mismatch.*corrupt/);
  });

  test("unknown presets and unpinned checksums are rejected", () => {
    expect(() => ensureEncoderWeights(tmpdir(), "vit-huge"))
      .toThrow(/unknown encoder.*vit-b16/);
  });
});

describe("decoder sizing", () => {
  test("stage count is log2 of the patch size", () => {
    expect(decoderStageCount(ENCODER_PRESETS["vit-b16"])).toBe(4);
    expect(decoderStageCount(ENCODER_PRESETS["vit-t8"])).toBe(3);
    expect(defaultDecoderWidths(ENCODER_PRESETS["vit-b16"]))
      .toEqual(DECODER_WIDTH_LADDER);
    expect(() => decoderStageCount({ ...ENCODER_PRESETS["vit-t8"], patchPx: 6 }))
      .toThrow(/power of two/);
  });

  test("decoder stays far smaller than the encoder on both presets", () => {
    for (const name of Object.keys(ENCODER_PRESETS)) {
      const p = ENCODER_PRESETS[name];
      const dec = paramCount(decoderTensorSpecs(p, 3));
      const enc = paramCount(encoderTensorSpecs(p));
      expect(dec).toBeGreaterThan(0);
      expect(dec).toBeLessThan(enc);
    }
  });
});
