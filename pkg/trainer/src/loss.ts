/** Asymmetric unified focal loss.
 *
 * Blend of a region term (asymmetric focal Tversky) and a pixel term
 * (asymmetric focal cross-entropy):
 *
 *   loss = lambda * region + (1 - lambda) * pixel
 *
 * Channel 0 is background, everything else foreground. The asymmetry:
 * background cross-entropy is focally suppressed by (1-p)^gamma and
 * weighted 1-delta while foreground keeps plain CE weighted delta; in
 * the Tversky index delta weights false negatives and 1-delta false
 * positives, and only foreground deficits get the (1-gamma) exponent
 * enhancement. Optional per-sample weights let the batcher zero out
 * padding samples, so duplicating a padding tile cannot move the loss.
 */

import * as tf from "@tensorflow/tfjs";

export interface LossOptions {
  delta: number;
  gamma: number;
  lambda: number;
}

export const DEFAULT_LOSS: LossOptions = { delta: 0.6, gamma: 0.5, lambda: 0.5 };

// probability clamp for logs and a floor under pow() so its gradient
// stays finite as the Tversky deficit reaches 0
const EPS = 1e-7;
const POW_EPS = 1e-12;

export function validateLossOptions(o: LossOptions): void {
  if (!(o.lambda >= 0 && o.lambda <= 1)) {
    throw new Error(`loss lambda must be in [0, 1], got ${o.lambda}`);
  }
  if (!(o.gamma >= 0)) {
    throw new Error(`loss gamma must be >= 0, got ${o.gamma}`);
  }
  if (!(o.delta > 0 && o.delta < 1)) {
    throw new Error(`loss delta must be in (0, 1), got ${o.delta}`);
  }
}

function clampedSoftmax(logits: tf.Tensor4D): tf.Tensor4D {
  return tf.clipByValue(tf.softmax(logits, -1), EPS, 1 - EPS) as tf.Tensor4D;
}

function weightedMean(perSample: tf.Tensor1D, sampleWeights?: tf.Tensor1D): tf.Scalar {
  if (!sampleWeights) {
    return tf.mean(perSample) as tf.Scalar;
  }
  const num = tf.sum(tf.mul(perSample, sampleWeights));
  return tf.div(num, tf.sum(sampleWeights)) as tf.Scalar;
}

/** Asymmetric focal cross-entropy, per-pixel mean per sample. */
export function pixelTerm(
  logits: tf.Tensor4D, targetOneHot: tf.Tensor4D, opts: LossOptions,
  sampleWeights?: tf.Tensor1D,
): tf.Scalar {
  return tf.tidy(() => {
    const p = clampedSoftmax(logits);
    const ce = tf.mul(tf.neg(targetOneHot), tf.log(p)); // [B,H,W,C]
    const c = logits.shape[3];
    const bgMask = tf.oneHot(0, c).reshape([1, 1, 1, c]);
    const fgMask = tf.sub(1, bgMask);
    const bgFocal = tf.pow(tf.sub(1, p), opts.gamma);
    const weights = tf.add(
      tf.mul(bgMask, tf.mul(1 - opts.delta, bgFocal)),
      tf.mul(fgMask, opts.delta),
    );
    const perPixel = tf.sum(tf.mul(weights, ce), -1); // [B,H,W]
    const perSample = tf.mean(perPixel, [1, 2]) as tf.Tensor1D;
    return weightedMean(perSample, sampleWeights);
  });
}

/** Asymmetric focal Tversky, per-channel mean per sample. */
export function regionTerm(
  logits: tf.Tensor4D, targetOneHot: tf.Tensor4D, opts: LossOptions,
  sampleWeights?: tf.Tensor1D,
): tf.Scalar {
  return tf.tidy(() => {
    const p = clampedSoftmax(logits);
    const y = targetOneHot;
    const tp = tf.sum(tf.mul(p, y), [1, 2]); // [B,C]
    const fn = tf.sum(tf.mul(y, tf.sub(1, p)), [1, 2]);
    const fp = tf.sum(tf.mul(tf.sub(1, y), p), [1, 2]);
    const ti = tf.div(
      tf.add(tp, EPS),
      tf.add(tf.add(tp, tf.mul(opts.delta, fn)),
             tf.add(tf.mul(1 - opts.delta, fp), EPS)),
    );
    const deficit = tf.add(tf.relu(tf.sub(1, ti)), POW_EPS); // [B,C]
    const c = logits.shape[3];
    const bgMask = tf.oneHot(0, c).reshape([1, c]);
    const fgMask = tf.sub(1, bgMask);
    const perChannel = tf.add(
      tf.mul(bgMask, deficit),
      tf.mul(fgMask, tf.pow(deficit, 1 - opts.gamma)),
    );
    const perSample = tf.mean(perChannel, 1) as tf.Tensor1D;
    return weightedMean(perSample, sampleWeights);
  });
}

export function unifiedFocalLoss(
  logits: tf.Tensor4D, targetOneHot: tf.Tensor4D,
  opts: LossOptions = DEFAULT_LOSS, sampleWeights?: tf.Tensor1D,
): tf.Scalar {
  if (logits.shape.join(",") !== targetOneHot.shape.join(",")) {
    throw new Error(
      `loss shape mismatch: logits ${logits.shape} vs target ${targetOneHot.shape}`);
  }
  return tf.tidy(() => {
    const region = regionTerm(logits, targetOneHot, opts, sampleWeights);
    const pixel = pixelTerm(logits, targetOneHot, opts, sampleWeights);
    return tf.add(tf.mul(opts.lambda, region),
                  tf.mul(1 - opts.lambda, pixel)) as tf.Scalar;
  });
}

/** One-hot a [B,H,W] int32 channel-index map to [B,H,W,C] float32. */
export function oneHotTarget(target: tf.Tensor3D, channels: number): tf.Tensor4D {
  return tf.oneHot(target, channels).toFloat() as tf.Tensor4D;
}
