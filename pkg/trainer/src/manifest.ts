/** Reader for the dataset manifest produced by the geoseg pipeline.
 *
 * The manifest is the training-side contract: a flat per-tile table with
 * split assignment, image/mask paths relative to the dataset root, and a
 * diversity-based repetition count the sampler must honor.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export interface ClassRow {
  class_id: number;
  name: string;
  min_width_m: number;
  min_area_m2: number;
  group: string;
  priority: number;
}

export interface TileRecord {
  tile_id: number;
  split: "train" | "test";
  image_path: string;
  mask_path: string;
  acquisition_tag: string;
  diversity_weight: number;
  diversity_raw: number | null;
  repetitions: number;
}

export interface Manifest {
  name: string;
  created_at: string;
  config_hash: string;
  grid: {
    tile_size_px: number;
    resolution_m: number;
    overlap_m: number;
    work_crs: string;
    provider_crs: string;
  };
  provider: Record<string, unknown>;
  classes: ClassRow[];
  records: TileRecord[];
}

export class ManifestError extends Error {}

export function loadManifest(manifestPath: string): Manifest {
  if (!fs.existsSync(manifestPath)) {
    throw new ManifestError(`manifest not found: ${manifestPath}`);
  }
  const doc = JSON.parse(fs.readFileSync(manifestPath, "utf-8")) as Manifest;
  for (const key of ["name", "grid", "classes", "records"] as const) {
    if (!(key in doc)) {
      throw new ManifestError(`manifest is missing ${JSON.stringify(key)}`);
    }
  }
  const seen = new Set<number>();
  for (const rec of doc.records) {
    if (seen.has(rec.tile_id)) {
      throw new ManifestError(`manifest has duplicate tile ${rec.tile_id}`);
    }
    seen.add(rec.tile_id);
    if (rec.split !== "train" && rec.split !== "test") {
      throw new ManifestError(`tile ${rec.tile_id}: bad split ${rec.split}`);
    }
    if (!(rec.repetitions >= 1)) {
      throw new ManifestError(`tile ${rec.tile_id}: repetitions must be >= 1`);
    }
  }
  return doc;
}

/** Foreground class ids, ascending. Logit channel c maps to classIds[c-1]
 * for c >= 1; channel 0 is background. */
export function classIds(manifest: Manifest): number[] {
  return manifest.classes.map((c) => c.class_id).sort((a, b) => a - b);
}

export function trainRecords(manifest: Manifest): TileRecord[] {
  return manifest.records.filter((r) => r.split === "train");
}

export function resolveTilePath(manifestPath: string, relative: string): string {
  return path.join(path.dirname(manifestPath), relative);
}
