/** Deterministic seeded randomness for weight generation and sampling.
 *
 * Everything here sticks to integer PRNG state and +,-,* arithmetic so a
 * given seed produces bit-identical streams on every JS engine. That is
 * what lets pretrained weight artifacts be pinned by checksum. Normals
 * come from an Irwin-Hall 12-sum, not Box-Muller, because Math.log and
 * Math.cos are not required to be correctly rounded across engines.
 */

function fnv1a(text: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

/** sfc32: small fast counter PRNG, 128-bit state, period ~2^128. */
function sfc32(a: number, b: number, c: number, d: number): () => number {
  return () => {
    a >>>= 0; b >>>= 0; c >>>= 0; d >>>= 0;
    const t = (a + b) | 0;
    a = b ^ (b >>> 9);
    b = (c + (c << 3)) | 0;
    c = (c << 21) | (c >>> 11);
    d = (d + 1) | 0;
    const out = (t + d) | 0;
    c = (c + out) | 0;
    return (out >>> 0) / 4294967296;
  };
}

export class Rng {
  private readonly next: () => number;
  private readonly seedText: string;

  constructor(seed: string | number) {
    this.seedText = String(seed);
    const h1 = fnv1a(this.seedText);
    const h2 = fnv1a(this.seedText + "");
    const h3 = fnv1a(this.seedText + "");
    const h4 = fnv1a(this.seedText + "");
    this.next = sfc32(h1, h2, h3, h4);
    // burn-in so nearby seeds decorrelate
    for (let i = 0; i < 12; i++) this.next();
  }

  /** Independent stream derived from this seed and a label. */
  fork(label: string): Rng {
    return new Rng(this.seedText + "/" + label);
  }

  /** Uniform in [0, 1). */
  uniform(): number {
    return this.next();
  }

  /** Integer in [0, n). */
  int(n: number): number {
    return Math.floor(this.next() * n);
  }

  /** Approximately standard normal (Irwin-Hall 12-sum), bounded to [-6, 6]. */
  normal(): number {
    let s = 0;
    for (let i = 0; i < 12; i++) s += this.next();
    return s - 6;
  }

  /** In-place Fisher-Yates shuffle. */
  shuffle<T>(arr: T[]): T[] {
    for (let i = arr.length - 1; i > 0; i--) {
      const j = this.int(i + 1);
      const tmp = arr[i];
      arr[i] = arr[j];
      arr[j] = tmp;
    }
    return arr;
  }
}
