// Wire types mirror the annotation service API verbatim; the UI never
// remaps verdict strings.

export type Verdict = 'positive' | 'partial' | 'negative';

export const VERDICT_CYCLE: readonly Verdict[] = ['positive', 'partial', 'negative'];

export interface CandidateDto {
  id: string;
  uri: string | null;
}

export interface TaskDto {
  task_id: string;
  project: string;
  caption_id: string;
  caption_text: string;
  candidates: CandidateDto[];
}

export interface LabelDto {
  task_id: string;
  candidate_id: string;
  verdict: Verdict;
  annotator_id: string;
  timestamp_ms: number;
}

export interface CandidateCard {
  id: string;
  uri: string | null;
  verdict: Verdict | null;
}

/** One task as shown on screen: caption plus three cards in served order. */
export interface TaskView {
  taskId: string;
  captionText: string;
  cards: CandidateCard[];
}

export function toView(task: TaskDto): TaskView {
  return {
    taskId: task.task_id,
    captionText: task.caption_text,
    // card order is exactly the served order; no client-side sorting
    cards: task.candidates.map((c) => ({ id: c.id, uri: c.uri, verdict: null })),
  };
}

export function viewComplete(view: TaskView): boolean {
  return view.cards.every((c) => c.verdict !== null);
}

export function labelsFor(view: TaskView, annotator: string, now: () => number): LabelDto[] {
  return view.cards.map((c) => ({
    task_id: view.taskId,
    candidate_id: c.id,
    verdict: c.verdict as Verdict,
    annotator_id: annotator,
    timestamp_ms: now(),
  }));
}
