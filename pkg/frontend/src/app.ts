import { ApiClient, ApiError } from './api.js';
import { mediaKind } from './media.js';
import { LabelQueue } from './queue.js';
import {
  labelsFor,
  toView,
  VERDICT_CYCLE,
  viewComplete,
  type TaskView,
  type Verdict,
} from './types.js';

export interface AppConfig {
  project: string;
  annotator: string;
  batchSize?: number;
  now?: () => number;
}

/**
 * Single-annotator task runner: fetches a batch of tasks, shows one at a
 * time (caption + three candidate cards in served order), cycles verdicts
 * with keys 1/2/3, and submits all three labels at once. Failed submits park
 * labels in the offline queue; reconnecting flushes them exactly once.
 */
export class AnnotatorApp {
  readonly queue: LabelQueue;
  private views: TaskView[] = [];
  private index = 0;
  private progress = 0;
  private offline = false;
  private message = '';
  private submitting = false;

  constructor(
    private root: HTMLElement,
    private cfg: AppConfig,
    private api: ApiClient,
    storage: Pick<Storage, 'getItem' | 'setItem'> | null = null,
  ) {
    this.queue = new LabelQueue((labels) => this.api.submitLabels(labels), storage);
  }

  get currentView(): TaskView | null {
    return this.views[this.index] ?? null;
  }

  get progressCount(): number {
    return this.progress;
  }

  get isOffline(): boolean {
    return this.offline;
  }

  async start(): Promise<void> {
    await this.fetchMore();
    this.render();
  }

  async fetchMore(): Promise<void> {
    try {
      const tasks = await this.api.getTasks(
        this.cfg.project,
        this.cfg.annotator,
        this.cfg.batchSize ?? 10,
      );
      this.views.push(...tasks.map(toView));
      this.offline = false;
    } catch (err) {
      if (err instanceof ApiError) throw err;
      this.offline = true; // network failure: show retry banner, keep state
    }
  }

  cycleVerdict(cardIndex: number): void {
    const view = this.currentView;
    if (!view || cardIndex < 0 || cardIndex >= view.cards.length) return;
    const card = view.cards[cardIndex];
    const pos = card.verdict === null ? -1 : VERDICT_CYCLE.indexOf(card.verdict);
    card.verdict = VERDICT_CYCLE[(pos + 1) % VERDICT_CYCLE.length] as Verdict;
    this.render();
  }

  handleKey(event: Pick<KeyboardEvent, 'key'>): void {
    if (event.key === '1' || event.key === '2' || event.key === '3') {
      this.cycleVerdict(Number(event.key) - 1);
    } else if (event.key === 'Enter') {
      void this.submitCurrent();
    }
  }

  /**
   * Queue the current task's three labels, advance optimistically, then
   * flush. Duplicate rejections (server accepted=0) pass silently.
   */
  async submitCurrent(): Promise<void> {
    const view = this.currentView;
    if (!view || !viewComplete(view) || this.submitting) return;
    this.submitting = true;
    try {
      const now = this.cfg.now ?? Date.now;
      this.queue.enqueue(labelsFor(view, this.cfg.annotator, now));
      this.index += 1;
      this.message = '';
      if (this.index >= this.views.length) await this.fetchMore();
      await this.flushQueue();
    } finally {
      this.submitting = false;
      this.render();
    }
  }

  /** Deliver queued labels; on success the badge reflects the server count. */
  async flushQueue(): Promise<void> {
    try {
      const result = await this.queue.flush();
      if (result.sent > 0 || this.offline) {
        this.progress = await this.api.labeledPairCount(this.cfg.project);
        this.offline = false;
      }
    } catch (err) {
      if (err instanceof ApiError) {
        // validation failure: surface inline, labels stay queued for triage
        this.message = `${err.code}: ${err.message}`;
      } else {
        this.offline = true; // flushed on reconnect
      }
    }
  }

  async reconnect(): Promise<void> {
    await this.flushQueue();
    if (!this.offline && this.currentView === null) {
      await this.fetchMore();
    }
    this.render();
  }

  bindGlobalHandlers(win: Window): void {
    win.addEventListener('keydown', (e) => this.handleKey(e as KeyboardEvent));
    win.addEventListener('online', () => void this.reconnect());
  }

  // -- rendering ------------------------------------------------------------

  render(): void {
    const view = this.currentView;
    this.root.replaceChildren();
    const doc = this.root.ownerDocument;

    if (this.offline) {
      const banner = doc.createElement('div');
      banner.className = 'banner';
      banner.textContent = 'Connection lost. Labels are queued locally.';
      const retry = doc.createElement('button');
      retry.className = 'retry';
      retry.textContent = 'Retry';
      retry.addEventListener('click', () => void this.reconnect());
      banner.appendChild(retry);
      this.root.appendChild(banner);
    }

    const badge = doc.createElement('div');
    badge.className = 'progress';
    badge.textContent = `${this.progress} labels`;
    this.root.appendChild(badge);

    if (this.message) {
      const msg = doc.createElement('div');
      msg.className = 'message';
      msg.textContent = this.message;
      this.root.appendChild(msg);
    }

    if (!view) {
      const empty = doc.createElement('div');
      empty.className = 'empty';
      empty.textContent = this.offline ? 'Reconnect to continue.' : 'No tasks left. Well done!';
      this.root.appendChild(empty);
      return;
    }

    const caption = doc.createElement('div');
    caption.className = 'caption';
    caption.textContent = view.captionText;
    this.root.appendChild(caption);

    const cards = doc.createElement('div');
    cards.className = 'cards';
    view.cards.forEach((card, i) => {
      const el = doc.createElement('div');
      el.className = 'card';
      el.dataset.candidate = card.id;
      el.appendChild(this.renderMedia(doc, card.uri));
      const verdict = doc.createElement('div');
      verdict.className = 'verdict';
      verdict.dataset.verdict = card.verdict ?? 'none';
      verdict.textContent = card.verdict ?? `press ${i + 1}`;
      el.appendChild(verdict);
      el.addEventListener('click', () => this.cycleVerdict(i));
      cards.appendChild(el);
    });
    this.root.appendChild(cards);

    const submit = doc.createElement('button');
    submit.className = 'submit';
    submit.textContent = 'Submit';
    submit.disabled = !viewComplete(view) || this.submitting;
    submit.addEventListener('click', () => void this.submitCurrent());
    this.root.appendChild(submit);
  }

  private renderMedia(doc: Document, uri: string | null): HTMLElement {
    const kind = mediaKind(uri);
    const src = uri ?? '';
    if (kind === 'audio') {
      const el = doc.createElement('audio');
      el.setAttribute('controls', '');
      el.setAttribute('src', src);
      return el;
    }
    if (kind === 'video') {
      const el = doc.createElement('video');
      el.setAttribute('controls', '');
      el.setAttribute('src', src);
      return el;
    }
    const el = doc.createElement('img');
    el.className = kind === 'thumbnail' ? 'thumbnail' : 'photo';
    el.setAttribute('src', src);
    return el;
  }
}
