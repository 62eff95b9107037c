/** PNG and ESRI world file IO, byte-compatible with the geoseg dataset
 * format: images are RGB PNGs, masks single-channel 8-bit PNGs whose
 * pixel values are class ids, and every raster has a sidecar world file
 * storing pixel size and the center of the top-left pixel.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { PNG } from "pngjs";

/** (origin_x, origin_y, pixel_size_x, pixel_size_y); the origin is the
 * outer corner of the top-left pixel and pixel_size_y is negative. */
export type Geotransform = [number, number, number, number];

/** Sidecar naming: ".png" -> ".pgw" (first + last extension char + w). */
export function worldFilePath(imagePath: string): string {
  const ext = path.extname(imagePath);
  const wext = ext.length >= 3 ? `.${ext[1]}${ext[ext.length - 1]}w` : `${ext}w`;
  return imagePath.slice(0, imagePath.length - ext.length) + wext;
}

export function writeWorldFile(imagePath: string, gt: Geotransform): void {
  const [ox, oy, psx, psy] = gt;
  if (psx <= 0 || psy >= 0) {
    throw new Error(`geotransform must be north-up (psx > 0, psy < 0), got ${gt}`);
  }
  const cx = ox + psx / 2;
  const cy = oy + psy / 2;
  const lines = [psx, 0, 0, psy, cx, cy].map((v) => String(v));
  fs.writeFileSync(worldFilePath(imagePath), lines.join("\n") + "\n");
}

export function readWorldFile(imagePath: string): Geotransform {
  const wf = worldFilePath(imagePath);
  const values = fs.readFileSync(wf, "utf-8").split(/\s+/).filter(Boolean).map(Number);
  if (values.length !== 6 || values.some((v) => Number.isNaN(v))) {
    throw new Error(`world file ${wf} must hold 6 numbers`);
  }
  const [psx, r1, r2, psy, cx, cy] = values;
  if (r1 !== 0 || r2 !== 0) {
    throw new Error(`world file ${wf}: rotation terms not supported`);
  }
  return [cx - psx / 2, cy - psy / 2, psx, psy];
}

export function copyWorldFile(srcImagePath: string, dstImagePath: string): void {
  fs.copyFileSync(worldFilePath(srcImagePath), worldFilePath(dstImagePath));
}

export interface Raster {
  width: number;
  height: number;
  /** RGB interleaved for images, one byte per pixel for masks. */
  data: Uint8Array;
}

export function readImageRGB(filePath: string): Raster {
  const png = PNG.sync.read(fs.readFileSync(filePath));
  const n = png.width * png.height;
  const rgb = new Uint8Array(n * 3);
  for (let i = 0; i < n; i++) {
    rgb[i * 3] = png.data[i * 4];
    rgb[i * 3 + 1] = png.data[i * 4 + 1];
    rgb[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return { width: png.width, height: png.height, data: rgb };
}

export function readMask(filePath: string): Raster {
  const png = PNG.sync.read(fs.readFileSync(filePath));
  const n = png.width * png.height;
  const gray = new Uint8Array(n);
  // grayscale PNGs decode to RGBA with R=G=B
  for (let i = 0; i < n; i++) gray[i] = png.data[i * 4];
  return { width: png.width, height: png.height, data: gray };
}

const GRAY_OPTS = {
  colorType: 0 as const, inputColorType: 0 as const,
  inputHasAlpha: false, bitDepth: 8 as const,
};

export function writeMask(filePath: string, mask: Raster): void {
  if (mask.data.length !== mask.width * mask.height) {
    throw new Error("mask data must be one byte per pixel");
  }
  const png = new PNG({ width: mask.width, height: mask.height, ...GRAY_OPTS });
  png.data = Buffer.from(mask.data);
  fs.writeFileSync(filePath, PNG.sync.write(png, GRAY_OPTS));
}

export function writeImageRGB(filePath: string, image: Raster): void {
  if (image.data.length !== image.width * image.height * 3) {
    throw new Error("image data must be RGB interleaved");
  }
  const png = new PNG({ width: image.width, height: image.height });
  for (let i = 0; i < image.width * image.height; i++) {
    png.data[i * 4] = image.data[i * 3];
    png.data[i * 4 + 1] = image.data[i * 3 + 1];
    png.data[i * 4 + 2] = image.data[i * 3 + 2];
    png.data[i * 4 + 3] = 255;
  }
  fs.writeFileSync(filePath, PNG.sync.write(png, { colorType: 2 }));
}
