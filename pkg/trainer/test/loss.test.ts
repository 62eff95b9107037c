/** Loss tests: a frozen hand-worked case, float64 reference equivalence,
 * finite-difference gradient checks, blend endpoints, and the batch
 * invariances the sampler relies on.
 */

import * as tf from "@tensorflow/tfjs";
import { beforeAll, describe, expect, test } from "vitest";
import {
  DEFAULT_LOSS, LossOptions, oneHotTarget, pixelTerm, regionTerm,
  unifiedFocalLoss, validateLossOptions,
} from "../src/loss.js";
import { Rng } from "../src/rng.js";
import { gradientCheck } from "./gradcheck.js";
import {
  Dims, LossParams, refLoss, refPixelTerm, refRegionTerm,
} from "./reference.js";

beforeAll(async () => {
  await tf.setBackend("cpu");
});

function tensors(logits: ArrayLike<number>, target: ArrayLike<number>, d: Dims) {
  return {
    logits: tf.tensor4d(Float32Array.from(logits), [d.b, d.h, d.w, d.c]),
    oneHot: oneHotTarget(
      tf.tensor3d(Int32Array.from(target), [d.b, d.h, d.w], "int32"), d.c),
  };
}

function tfLoss(logits: ArrayLike<number>, target: ArrayLike<number>, d: Dims,
                params: LossOptions, weights?: number[]): number {
  return tf.tidy(() => {
    const { logits: lt, oneHot } = tensors(logits, target, d);
    const w = weights ? tf.tensor1d(weights, "float32") : undefined;
    return unifiedFocalLoss(lt, oneHot, params, w).dataSync()[0];
  });
}

function randomCase(seed: string, d: Dims, scale = 1.5) {
  const rng = new Rng(seed);
  const n = d.b * d.h * d.w;
  const logits = new Float64Array(n * d.c);
  for (let i = 0; i < logits.length; i++) logits[i] = rng.normal() * scale;
  const target = new Int32Array(n);
  for (let i = 0; i < n; i++) target[i] = rng.int(d.c);
  return { logits, target };
}

describe("hand-worked single pixel", () => {
  // One pixel, two channels, logits (0, 0), target = foreground.
  // softmax -> p = (0.5, 0.5). With delta=0.6, gamma=0.5, lambda=0.5:
  //
  // pixel term: target is foreground, so weight delta on plain CE:
  //   0.6 * -ln(0.5) = 0.6 * 0.69314718... = 0.41588831
  //
  // region term per channel (tp, fn, fp over the one pixel):
  //   background: tp=0 fn=0 fp=0.5, index ~ 0/(0.4*0.5) ~ 0
  //     -> deficit ~ 1, contributes ~1 (no exponent on background)
  //   foreground: tp=0.5 fn=0.5 fp=0, index = 0.5/(0.5+0.6*0.5) = 0.625
  //     -> deficit 0.375, enhanced: 0.375^(1-0.5) = 0.61237
  //   mean over channels: (1 + 0.61237)/2 = 0.80619
  //
  // total: 0.5*0.80619 + 0.5*0.41589 = 0.61104
  const d: Dims = { b: 1, h: 1, w: 1, c: 2 };
  const logits = [0, 0];
  const target = [1];
  const params = { delta: 0.6, gamma: 0.5, lambda: 0.5 };

  test("reference matches the hand arithmetic", () => {
    expect(refPixelTerm(logits, target, d, params)).toBeCloseTo(0.4158883, 6);
    expect(refRegionTerm(logits, target, d, params)).toBeCloseTo(0.8061859, 6);
    expect(refLoss(logits, target, d, params)).toBeCloseTo(0.6110371, 6);
  });

  test("production loss matches the hand arithmetic", () => {
    expect(tfLoss(logits, target, d, params)).toBeCloseTo(0.6110371, 5);
  });
});

describe("float64 reference equivalence", () => {
  const cases: { seed: string; d: Dims; params: LossOptions }[] = [
    { seed: "ref/a", d: { b: 2, h: 4, w: 4, c: 3 }, params: DEFAULT_LOSS },
    { seed: "ref/b", d: { b: 3, h: 5, w: 2, c: 4 },
      params: { delta: 0.7, gamma: 2.0, lambda: 0.25 } },
    { seed: "ref/c", d: { b: 1, h: 6, w: 6, c: 2 },
      params: { delta: 0.3, gamma: 0.0, lambda: 0.9 } },
  ];
  for (const { seed, d, params } of cases) {
    test(`loss agrees with the reference (${seed})`, () => {
      const { logits, target } = randomCase(seed, d);
      const got = tfLoss(logits, target, d, params);
      const want = refLoss(logits, target, d, params);
      expect(Math.abs(got - want)).toBeLessThan(1e-5 * Math.max(1, Math.abs(want)));
    });
  }

  test("loss is positive for imperfect predictions", () => {
    const d: Dims = { b: 2, h: 4, w: 4, c: 3 };
    const { logits, target } = randomCase("positive", d);
    expect(tfLoss(logits, target, d, DEFAULT_LOSS)).toBeGreaterThan(0);
  });

  test("perfect prediction drives the loss to zero in the margin limit", () => {
    const d: Dims = { b: 1, h: 4, w: 4, c: 3 };
    const rng = new Rng("perfect");
    const target = new Int32Array(d.h * d.w);
    for (let i = 0; i < target.length; i++) target[i] = rng.int(d.c);
    const margin = 40;
    const logits = new Float64Array(d.h * d.w * d.c);
    for (let i = 0; i < target.length; i++) logits[i * d.c + target[i]] = margin;
    const loss = tfLoss(logits, target, d, DEFAULT_LOSS);
    expect(loss).toBeGreaterThanOrEqual(0);
    expect(loss).toBeLessThan(1e-3);
  });
});

describe("blend endpoints", () => {
  const d: Dims = { b: 2, h: 3, w: 3, c: 3 };
  const { logits, target } = randomCase("endpoints", d);

  test("lambda=1 is the region term alone", () => {
    const params = { ...DEFAULT_LOSS, lambda: 1 };
    const got = tfLoss(logits, target, d, params);
    const region = refRegionTerm(logits, target, d, params);
    expect(Math.abs(got - region)).toBeLessThan(1e-5);
    const tfRegion = tf.tidy(() => {
      const { logits: lt, oneHot } = tensors(logits, target, d);
      return regionTerm(lt, oneHot, params).dataSync()[0];
    });
    expect(got).toBeCloseTo(tfRegion, 7);
  });

  test("lambda=0 is the pixel term alone", () => {
    const params = { ...DEFAULT_LOSS, lambda: 0 };
    const got = tfLoss(logits, target, d, params);
    const pixel = refPixelTerm(logits, target, d, params);
    expect(Math.abs(got - pixel)).toBeLessThan(1e-5);
    const tfPixel = tf.tidy(() => {
      const { logits: lt, oneHot } = tensors(logits, target, d);
      return pixelTerm(lt, oneHot, params).dataSync()[0];
    });
    expect(got).toBeCloseTo(tfPixel, 7);
  });
});

describe("finite-difference gradient", () => {
  const configs: { seed: string; d: Dims; params: LossParams }[] = [
    { seed: "fd/default", d: { b: 2, h: 4, w: 4, c: 3 }, params: DEFAULT_LOSS },
    { seed: "fd/asym", d: { b: 2, h: 4, w: 4, c: 3 },
      params: { delta: 0.7, gamma: 2.0, lambda: 0.25 } },
    { seed: "fd/pixel-heavy", d: { b: 2, h: 4, w: 4, c: 4 },
      params: { delta: 0.4, gamma: 1.0, lambda: 0.0 } },
    { seed: "fd/region-heavy", d: { b: 2, h: 4, w: 4, c: 2 },
      params: { delta: 0.6, gamma: 0.5, lambda: 1.0 } },
  ];
  for (const { seed, d, params } of configs) {
    test(`autodiff matches finite differences (${seed})`, () => {
      const r = gradientCheck(seed, d, params);
      expect(r.relError, `vector relative error ${r.relError}`).toBeLessThan(1e-4);
    });
  }
});

describe("batch invariances", () => {
  const d: Dims = { b: 3, h: 3, w: 3, c: 3 };
  const { logits, target } = randomCase("batch", d);
  const px = d.h * d.w;

  test("permuting the batch leaves the loss unchanged", () => {
    const perm = [2, 0, 1];
    const plogits = new Float64Array(logits.length);
    const ptarget = new Int32Array(target.length);
    perm.forEach((src, dst) => {
      plogits.set(logits.subarray(src * px * d.c, (src + 1) * px * d.c),
                  dst * px * d.c);
      ptarget.set(target.subarray(src * px, (src + 1) * px), dst * px);
    });
    const a = tfLoss(logits, target, d, DEFAULT_LOSS);
    const b = tfLoss(plogits, ptarget, d, DEFAULT_LOSS);
    expect(Math.abs(a - b)).toBeLessThan(1e-6);
  });

  test("duplicated background-only padding samples cannot move the loss", () => {
    const base = tfLoss(logits, target, d, DEFAULT_LOSS, [1, 1, 1]);
    // pad with two copies of an all-background tile at weight 0
    const padLogits = new Float64Array((d.b + 2) * px * d.c);
    const padTarget = new Int32Array((d.b + 2) * px); // zeros = background
    padLogits.set(logits, 0);
    padTarget.set(target, 0);
    const pad = randomCase("padding-content", { ...d, b: 1 });
    for (const extra of [d.b, d.b + 1]) {
      padLogits.set(pad.logits, extra * px * d.c);
    }
    const padded = tfLoss(padLogits, padTarget, { ...d, b: d.b + 2 },
                          DEFAULT_LOSS, [1, 1, 1, 0, 0]);
    expect(Math.abs(padded - base)).toBeLessThan(1e-7);
  });

  test("weighted mean normalizes by total weight", () => {
    const uniform = tfLoss(logits, target, d, DEFAULT_LOSS);
    const scaled = tfLoss(logits, target, d, DEFAULT_LOSS, [2, 2, 2]);
    expect(Math.abs(uniform - scaled)).toBeLessThan(1e-6);
  });
});

describe("validation", () => {
  test("hyperparameter ranges are enforced", () => {
    expect(() => validateLossOptions({ delta: 0.6, gamma: 0.5, lambda: 1.5 }))
      .toThrow(/lambda/);
    expect(() => validateLossOptions({ delta: 0.6, gamma: -1, lambda: 0.5 }))
      .toThrow(/gamma/);
    expect(() => validateLossOptions({ delta: 0, gamma: 0.5, lambda: 0.5 }))
      .toThrow(/delta/);
    expect(() => validateLossOptions({ delta: 1, gamma: 0.5, lambda: 0.5 }))
      .toThrow(/delta/);
    expect(() => validateLossOptions(DEFAULT_LOSS)).not.toThrow();
  });

  test("shape mismatch is rejected", () => {
    tf.tidy(() => {
      const logits = tf.zeros([1, 2, 2, 3]) as tf.Tensor4D;
      const target = tf.zeros([1, 2, 2, 2]) as tf.Tensor4D;
      expect(() => unifiedFocalLoss(logits, target, DEFAULT_LOSS))
        .toThrow(/shape mismatch/);
    });
  });
});
