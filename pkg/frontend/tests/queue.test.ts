import { describe, expect, it } from 'vitest';
import { LabelQueue } from '../src/queue.js';
import type { LabelDto } from '../src/types.js';

function label(i: number): LabelDto {
  return {
    task_id: `t${i}`,
    candidate_id: `m/${i}`,
    verdict: 'positive',
    annotator_id: 'a',
    timestamp_ms: i,
  };
}

class MemoryStorage {
  private data = new Map<string, string>();
  getItem(key: string): string | null {
    return this.data.get(key) ?? null;
  }
  setItem(key: string, value: string): void {
    this.data.set(key, value);
  }
}

describe('LabelQueue', () => {
  it('delivers queued labels and empties on success', async () => {
    const sent: LabelDto[][] = [];
    const queue = new LabelQueue(async (labels) => {
      sent.push(labels);
      return labels.length;
    });
    queue.enqueue([label(1), label(2)]);
    const result = await queue.flush();
    expect(result).toEqual({ sent: 2, accepted: 2 });
    expect(queue.size).toBe(0);
    expect(sent).toHaveLength(1);
  });

  it('keeps labels on network failure and retries once online', async () => {
    let up = false;
    let deliveries = 0;
    const queue = new LabelQueue(async (labels) => {
      if (!up) throw new TypeError('fetch failed');
      deliveries += labels.length;
      return labels.length;
    });
    queue.enqueue([label(1), label(2), label(3)]);
    await expect(queue.flush()).rejects.toThrow('fetch failed');
    expect(queue.size).toBe(3);
    up = true;
    await queue.flush();
    expect(queue.size).toBe(0);
    expect(deliveries).toBe(3); // labels arrive exactly once
  });

  it('is single-flight under concurrent flushes', async () => {
    let inFlight = 0;
    let maxInFlight = 0;
    const queue = new LabelQueue(async (labels) => {
      inFlight += 1;
      maxInFlight = Math.max(maxInFlight, inFlight);
      await new Promise((r) => setTimeout(r, 5));
      inFlight -= 1;
      return labels.length;
    });
    queue.enqueue([label(1)]);
    const [a, b] = await Promise.all([queue.flush(), queue.flush()]);
    expect(maxInFlight).toBe(1);
    expect(a.sent + b.sent).toBe(1);
  });

  it('persists across instances via storage', async () => {
    const storage = new MemoryStorage();
    const q1 = new LabelQueue(async () => 0, storage);
    q1.enqueue([label(7)]);
    const q2 = new LabelQueue(async (labels) => labels.length, storage);
    expect(q2.size).toBe(1);
    await q2.flush();
    expect(q2.size).toBe(0);
  });
});
