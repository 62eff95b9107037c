/** Training configuration: one JSON file per run.
 *
 * Paths resolve relative to the config file. Unknown keys are rejected
 * so typos surface before a long run starts.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { DEFAULT_LOSS, LossOptions, validateLossOptions } from "./loss.js";
import { ENCODER_PRESETS } from "./weights.js";

export interface TrainingConfig {
  name: string;
  manifest: string;
  encoder: string;
  inputPx: number;
  decoderWidths?: number[];
  loss: LossOptions;
  epochs: number;
  batchSize: number;
  learningRate: number;
  seed: string;
  maxSteps?: number;
  weightsDir: string;
}

export class ConfigError extends Error {}

const KNOWN_KEYS = new Set([
  "name", "manifest", "encoder", "inputPx", "decoderWidths", "loss",
  "epochs", "batchSize", "learningRate", "seed", "maxSteps", "weightsDir",
]);
const KNOWN_LOSS_KEYS = new Set(["delta", "gamma", "lambda"]);

export function loadTrainingConfig(configPath: string): TrainingConfig {
  if (!fs.existsSync(configPath)) {
    throw new ConfigError(`config file not found: ${configPath}`);
  }
  let doc: Record<string, unknown>;
  try {
    doc = JSON.parse(fs.readFileSync(configPath, "utf-8"));
  } catch (e) {
    throw new ConfigError(`${configPath}: invalid JSON: ${(e as Error).message}`);
  }
  const base = path.dirname(configPath);
  return parseTrainingConfig(doc, base, path.basename(configPath, ".json"));
}

export function parseTrainingConfig(
  doc: Record<string, unknown>, baseDir: string, defaultName: string,
): TrainingConfig {
  for (const key of Object.keys(doc)) {
    if (!KNOWN_KEYS.has(key)) {
      throw new ConfigError(`config has unknown key ${JSON.stringify(key)}`);
    }
  }
  if (typeof doc.manifest !== "string" || !doc.manifest) {
    throw new ConfigError("config needs a manifest path");
  }
  const lossDoc = (doc.loss ?? {}) as Record<string, unknown>;
  for (const key of Object.keys(lossDoc)) {
    if (!KNOWN_LOSS_KEYS.has(key)) {
      throw new ConfigError(`config loss has unknown key ${JSON.stringify(key)}`);
    }
  }
  const loss: LossOptions = {
    delta: (lossDoc.delta as number) ?? DEFAULT_LOSS.delta,
    gamma: (lossDoc.gamma as number) ?? DEFAULT_LOSS.gamma,
    lambda: (lossDoc.lambda as number) ?? DEFAULT_LOSS.lambda,
  };
  try {
    validateLossOptions(loss);
  } catch (e) {
    throw new ConfigError((e as Error).message);
  }
  const cfg: TrainingConfig = {
    name: (doc.name as string) ?? defaultName,
    manifest: path.resolve(baseDir, doc.manifest),
    encoder: (doc.encoder as string) ?? "vit-b16",
    inputPx: (doc.inputPx as number) ?? 1024,
    decoderWidths: doc.decoderWidths as number[] | undefined,
    loss,
    epochs: (doc.epochs as number) ?? 10,
    batchSize: (doc.batchSize as number) ?? 2,
    learningRate: (doc.learningRate as number) ?? 1e-4,
    seed: String(doc.seed ?? "0"),
    maxSteps: doc.maxSteps as number | undefined,
    weightsDir: path.resolve(baseDir, (doc.weightsDir as string) ?? "weights"),
  };
  if (!ENCODER_PRESETS[cfg.encoder]) {
    throw new ConfigError(
      `unknown encoder ${JSON.stringify(cfg.encoder)}; ` +
      `have: ${Object.keys(ENCODER_PRESETS).join(", ")}`);
  }
  if (!Number.isInteger(cfg.epochs) || cfg.epochs < 1) {
    throw new ConfigError(`epochs must be a positive integer, got ${cfg.epochs}`);
  }
  if (!Number.isInteger(cfg.batchSize) || cfg.batchSize < 1) {
    throw new ConfigError(`batchSize must be a positive integer, got ${cfg.batchSize}`);
  }
  if (!(cfg.learningRate > 0)) {
    throw new ConfigError(`learningRate must be > 0, got ${cfg.learningRate}`);
  }
  if (cfg.maxSteps !== undefined && (!Number.isInteger(cfg.maxSteps) || cfg.maxSteps < 1)) {
    throw new ConfigError(`maxSteps must be a positive integer, got ${cfg.maxSteps}`);
  }
  return cfg;
}
