import type { LabelDto } from './types.js';

export interface FlushResult {
  sent: number;
  accepted: number;
}

type PostFn = (labels: LabelDto[]) => Promise<number>;

/**
 * Offline-tolerant label queue. Labels enqueue locally (persisted when a
 * Storage is available, so a reload loses nothing) and flush single-flight:
 * a batch leaves the queue only after the server acknowledged it, and
 * duplicate acknowledgements are harmless because the server dedups by
 * (task, candidate, annotator).
 */
export class LabelQueue {
  private pending: LabelDto[] = [];
  private flushing = false;

  constructor(
    private post: PostFn,
    private storage: Pick<Storage, 'getItem' | 'setItem'> | null = null,
    private storageKey = 'modbind.labelQueue',
  ) {
    this.restore();
  }

  private restore(): void {
    if (!this.storage) return;
    try {
      const raw = this.storage.getItem(this.storageKey);
      if (raw) this.pending = JSON.parse(raw) as LabelDto[];
    } catch {
      this.pending = [];
    }
  }

  private persist(): void {
    if (!this.storage) return;
    try {
      this.storage.setItem(this.storageKey, JSON.stringify(this.pending));
    } catch {
      // storage full or unavailable; queue still lives in memory
    }
  }

  get size(): number {
    return this.pending.length;
  }

  enqueue(labels: LabelDto[]): void {
    this.pending.push(...labels);
    this.persist();
  }

  /**
   * Try to deliver everything queued. On network failure the batch stays
   * queued; concurrent calls collapse into one in-flight attempt.
   */
  async flush(): Promise<FlushResult> {
    if (this.flushing || this.pending.length === 0) {
      return { sent: 0, accepted: 0 };
    }
    this.flushing = true;
    try {
      const batch = this.pending.slice();
      const accepted = await this.post(batch);
      this.pending = this.pending.slice(batch.length);
      this.persist();
      return { sent: batch.length, accepted };
    } finally {
      this.flushing = false;
    }
  }
}
