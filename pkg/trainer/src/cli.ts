#!/usr/bin/env node
/** geoseg-train command line: train a decoder on a geoseg dataset, then
 * predict masks that feed straight back into `geoseg clean` and
 * `geoseg evaluate`. All logging goes to stderr.
 */

import * as path from "node:path";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";
import { ConfigError, loadTrainingConfig } from "./config.js";
import { ManifestError } from "./manifest.js";
import { predict } from "./predict.js";
import { train } from "./train.js";

function fail(e: unknown): never {
  const err = e as Error;
  process.stderr.write(`error: ${err.message}\n`);
  if (err instanceof ConfigError) process.exit(1);
  if (err instanceof ManifestError) process.exit(3);
  process.exit(1);
}

async function main(): Promise<void> {
  await yargs(hideBin(process.argv))
    .scriptName("geoseg-train")
    .command(
      "train",
      "train a segmentation decoder from a training config",
      (y) => y
        .option("config", { type: "string", demandOption: true,
                            describe: "training config JSON" })
        .option("out", { type: "string",
                         describe: "run directory (default runs/<name>)" })
        .option("max-steps", { type: "number",
                               describe: "stop after this many steps" })
        .option("deterministic", {
          type: "boolean", default: false,
          describe: "seeded single-worker run (training is deterministic " +
                    "either way; accepted for explicitness)",
        }),
      async (argv) => {
        try {
          const cfg = loadTrainingConfig(argv.config);
          const outDir = argv.out ??
            path.join(path.dirname(path.resolve(argv.config)),
                      "runs", cfg.name);
          const result = await train(cfg, {
            outDir,
            maxSteps: argv.maxSteps,
            deterministic: argv.deterministic,
          });
          process.stderr.write(
            `encoder sha256 unchanged: ` +
            `${result.encoderSha256Before === result.encoderSha256After}\n`);
        } catch (e) {
          fail(e);
        }
      })
    .command(
      "predict",
      "write predicted masks for a directory of image tiles",
      (y) => y
        .option("checkpoint", { type: "string", demandOption: true })
        .option("images", { type: "string", demandOption: true,
                            describe: "directory of img_{tile}_{tag}.png" })
        .option("out", { type: "string", demandOption: true,
                         describe: "mask output directory" })
        .option("tag", { type: "string",
                         describe: "only tiles with this acquisition tag" })
        .option("weights-dir", {
          type: "string",
          describe: "pretrained encoder cache (default: weights/ next to " +
                    "the checkpoint's run directory)",
        }),
      async (argv) => {
        try {
          const weightsDir = argv.weightsDir ??
            path.join(path.dirname(path.resolve(argv.checkpoint)),
                      "..", "weights");
          await predict({
            checkpoint: argv.checkpoint,
            imagesDir: argv.images,
            outDir: argv.out,
            tag: argv.tag,
            weightsDir,
          });
        } catch (e) {
          fail(e);
        }
      })
    .demandCommand(1, "pick a command: train or predict")
    .strict()
    .help()
    .parseAsync();
}

main().catch(fail);
