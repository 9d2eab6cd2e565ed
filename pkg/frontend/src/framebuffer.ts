/**
 * Tiny bounded queue: the network thread pushes decoded frames, the paint
 * loop drains the newest. A small capacity keeps latency bounded when the
 * server renders faster than the page paints — old frames are dropped.
 */

export class BoundedQueue<T> {
  private readonly items: T[] = [];
  readonly capacity: number;
  dropped = 0;

  constructor(capacity = 2) {
    if (!Number.isInteger(capacity) || capacity < 1) {
      throw new RangeError(`capacity must be a positive integer, got ${capacity}`);
    }
    this.capacity = capacity;
  }

  get length(): number {
    return this.items.length;
  }

  push(item: T): void {
    if (this.items.length >= this.capacity) {
      this.items.shift();
      this.dropped += 1;
    }
    this.items.push(item);
  }

  /** Remove and return the oldest item, or undefined when empty. */
  shift(): T | undefined {
    return this.items.shift();
  }

  /** Drop everything but the newest item and return it (undefined when empty). */
  takeLatest(): T | undefined {
    if (this.items.length === 0) return undefined;
    this.dropped += this.items.length - 1;
    const latest = this.items[this.items.length - 1];
    this.items.length = 0;
    return latest;
  }

  clear(): void {
    this.items.length = 0;
  }
}
