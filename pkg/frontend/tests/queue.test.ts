import { describe, expect, it } from 'vitest';

import { RequestQueue } from '../src/queue.js';

interface Gate {
  open(): void;
  closed: Promise<void>;
}

function gate(): Gate {
  let open!: () => void;
  const closed = new Promise<void>((resolve) => {
    open = resolve;
  });
  return { open, closed };
}

describe('RequestQueue', () => {
  it('runs exactly one request at a time, in submission order', async () => {
    const gates = [gate(), gate(), gate()];
    const events: string[] = [];
    const queue = new RequestQueue<number>(async (i) => {
      events.push(`start ${i}`);
      await gates[i].closed;
      events.push(`end ${i}`);
    });

    queue.push(0);
    queue.push(1);
    queue.push(2);
    await Promise.resolve();
    expect(queue.busy).toBe(true);
    expect(queue.pending).toBe(2);
    expect(events).toEqual(['start 0']); // 1 and 2 wait their turn

    gates[0].open();
    await Promise.resolve();
    await Promise.resolve();
    expect(events).toContain('end 0');
    expect(events).toContain('start 1');
    expect(events).not.toContain('start 2');

    gates[1].open();
    gates[2].open();
    await new Promise((r) => setTimeout(r, 0));
    expect(events).toEqual(['start 0', 'end 0', 'start 1', 'end 1', 'start 2', 'end 2']);
    expect(queue.busy).toBe(false);
    expect(queue.pending).toBe(0);
  });

  it('keeps draining after a worker failure', async () => {
    const done: number[] = [];
    const queue = new RequestQueue<number>(async (i) => {
      if (i === 1) throw new Error('boom');
      done.push(i);
    });
    queue.push(1);
    queue.push(2);
    await new Promise((r) => setTimeout(r, 0));
    expect(done).toEqual([2]);
    expect(queue.busy).toBe(false);
  });
});
