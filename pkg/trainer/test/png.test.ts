import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, test } from "vitest";
import {
  Geotransform, copyWorldFile, readImageRGB, readMask, readWorldFile,
  worldFilePath, writeImageRGB, writeMask, writeWorldFile,
} from "../src/png.js";
import { Rng } from "../src/rng.js";

let dir: string;

beforeAll(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), "png-test-"));
});

afterAll(() => {
  fs.rmSync(dir, { recursive: true, force: true });
});

describe("world files", () => {
  test("sidecar naming keeps first and last extension characters", () => {
    expect(worldFilePath("/a/mask_3_2021.png")).toBe("/a/mask_3_2021.pgw");
    expect(worldFilePath("x/img.tif")).toBe("x/img.tfw");
    expect(worldFilePath("plain.jpeg")).toBe("plain.jgw");
  });

  test("write/read round-trips the geotransform", () => {
    const img = path.join(dir, "wf.png");
    const gt: Geotransform = [500000.25, 5300000.75, 0.5, -0.5];
    writeWorldFile(img, gt);
    expect(readWorldFile(img)).toEqual(gt);
    // on disk the 5th and 6th lines are the center of the top-left pixel
    const lines = fs.readFileSync(worldFilePath(img), "utf-8").trim().split("\n");
    expect(Number(lines[4])).toBe(500000.25 + 0.25);
    expect(Number(lines[5])).toBe(5300000.75 - 0.25);
  });

  test("south-up and rotated transforms are rejected", () => {
    const img = path.join(dir, "bad.png");
    expect(() => writeWorldFile(img, [0, 0, 0.5, 0.5])).toThrow(/north-up/);
    fs.writeFileSync(worldFilePath(img), "0.5\n0.1\n0\n-0.5\n1\n2\n");
    expect(() => readWorldFile(img)).toThrow(/rotation/);
    fs.writeFileSync(worldFilePath(img), "0.5\n0\n0\n-0.5\n1\n");
    expect(() => readWorldFile(img)).toThrow(/6 numbers/);
  });

  test("copyWorldFile moves the sidecar alongside a new raster", () => {
    const src = path.join(dir, "src.png");
    const dst = path.join(dir, "dst.png");
    writeWorldFile(src, [10, 20, 1, -1]);
    copyWorldFile(src, dst);
    expect(readWorldFile(dst)).toEqual([10, 20, 1, -1]);
  });
});

describe("rasters", () => {
  test("mask write/read round-trips bytes", () => {
    const rng = new Rng("mask");
    const data = new Uint8Array(32 * 32);
    for (let i = 0; i < data.length; i++) data[i] = rng.int(5);
    const file = path.join(dir, "mask.png");
    writeMask(file, { width: 32, height: 32, data });
    const back = readMask(file);
    expect(back.width).toBe(32);
    expect(back.height).toBe(32);
    expect(Array.from(back.data)).toEqual(Array.from(data));
  });

  test("image write/read round-trips RGB", () => {
    const rng = new Rng("img");
    const data = new Uint8Array(16 * 16 * 3);
    for (let i = 0; i < data.length; i++) data[i] = rng.int(256);
    const file = path.join(dir, "img.png");
    writeImageRGB(file, { width: 16, height: 16, data });
    const back = readImageRGB(file);
    expect(Array.from(back.data)).toEqual(Array.from(data));
  });

  test("size mismatches are rejected", () => {
    expect(() => writeMask(path.join(dir, "x.png"),
                           { width: 4, height: 4, data: new Uint8Array(3) }))
      .toThrow(/one byte per pixel/);
    expect(() => writeImageRGB(path.join(dir, "y.png"),
                               { width: 4, height: 4, data: new Uint8Array(3) }))
      .toThrow(/RGB/);
  });
});
