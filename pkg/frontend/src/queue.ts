/** Single-consumer FIFO: one request in flight, later submissions wait
 * their turn. Worker failures drop the item but never stall the queue. */
export class RequestQueue<T> {
  private readonly items: T[] = [];
  private running = false;

  constructor(private readonly worker: (item: T) => Promise<void>) {}

  get busy(): boolean {
    return this.running;
  }

  get pending(): number {
    return this.items.length;
  }

  push(item: T): void {
    this.items.push(item);
    void this.drain();
  }

  private async drain(): Promise<void> {
    if (this.running) return;
    const item = this.items.shift();
    if (item === undefined) return;
    this.running = true;
    try {
      await this.worker(item);
    } catch {
      // the worker reports its own failures; the queue only moves on
    } finally {
      this.running = false;
      void this.drain();
    }
  }
}
