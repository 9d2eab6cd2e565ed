/** Sliding-window frame-rate estimate over arrival timestamps. */

export class FpsMeter {
  private readonly windowMs: number;
  private readonly times: number[] = [];

  constructor(windowMs = 2000) {
    this.windowMs = windowMs;
  }

  /** Record a frame arrival at `nowMs` (milliseconds, any monotonic clock). */
  record(nowMs: number): void {
    this.times.push(nowMs);
    const cutoff = nowMs - this.windowMs;
    while (this.times.length > 0 && this.times[0]! < cutoff) {
      this.times.shift();
    }
  }

  /** Frames per second over the window; 0 until two frames have arrived. */
  fps(): number {
    if (this.times.length < 2) return 0;
    const span = this.times[this.times.length - 1]! - this.times[0]!;
    if (span <= 0) return 0;
    return ((this.times.length - 1) * 1000) / span;
  }

  reset(): void {
    this.times.length = 0;
  }
}
