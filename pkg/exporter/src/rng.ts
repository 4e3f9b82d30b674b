/**
 * Deterministic PRNG (splitmix32 core) so exported tensors are
 * bit-reproducible across runs and machines.
 */

export class Rng {
  private state: number;

  constructor(seed: number) {
    this.state = seed >>> 0;
  }

  /** uniform in [0, 1) */
  next(): number {
    this.state = (this.state + 0x9e3779b9) >>> 0;
    let z = this.state;
    z ^= z >>> 16;
    z = Math.imul(z, 0x21f0aaad);
    z ^= z >>> 15;
    z = Math.imul(z, 0x735a2d97);
    z ^= z >>> 15;
    return (z >>> 0) / 4294967296;
  }

  /** approximately standard normal (sum of 12 uniforms, variance 1) */
  normal(): number {
    let total = 0;
    for (let i = 0; i < 12; i++) total += this.next();
    return total - 6.0;
  }
}
