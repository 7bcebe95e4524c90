/**
 * Session flow: strictly sequential item presentation with the server as
 * the source of truth.
 *
 * The service's next-item endpoint always returns the first unanswered
 * item for the rater, so a page reload naturally resumes the session with
 * no duplicate submissions; a duplicate rejected by the server is treated
 * as already answered and the flow simply advances.
 */

import { DuplicateResponseError, StudyApiClient } from './api';
import type { ItemPayload, Progress, TaskName, TaskSpec } from './types';

/** One pending question: an item plus the specific task to answer. */
export interface PendingTask {
  item: ItemPayload;
  task: TaskSpec;
  progress: Progress;
}

export type SessionEvent =
  | { kind: 'task'; pending: PendingTask }
  | { kind: 'done'; progress: Progress }
  | { kind: 'skipped'; itemId: string; task: TaskName; reason: string };

export class SessionController {
  private submitting = false;
  private current: PendingTask | null = null;
  private taskQueue: TaskSpec[] = [];
  private currentItem: ItemPayload | null = null;
  private lastProgress: Progress = { answered: 0, total: 0 };
  private readonly skipped: Array<{ itemId: string; task: TaskName; reason: string }> = [];

  constructor(
    private readonly api: StudyApiClient,
    readonly raterId: string,
  ) {}

  /** Items with tasks the client cannot pose (e.g. helpfulness without an overlay). */
  get skipReport(): ReadonlyArray<{ itemId: string; task: TaskName; reason: string }> {
    return this.skipped;
  }

  get progress(): Progress {
    return this.lastProgress;
  }

  /** Advance to the next answerable task, fetching new items as needed. */
  async advance(): Promise<SessionEvent> {
    while (true) {
      const task = this.taskQueue.shift();
      if (task !== undefined && this.currentItem !== null) {
        if (task.task === 'helpfulness' && this.currentItem.overlay_url === null) {
          const skip = {
            itemId: this.currentItem.item_id,
            task: task.task,
            reason: 'missing overlay',
          };
          this.skipped.push(skip);
          return { kind: 'skipped', ...skip };
        }
        this.current = { item: this.currentItem, task, progress: this.lastProgress };
        return { kind: 'task', pending: this.current };
      }
      const next = await this.api.nextItem(this.raterId);
      this.lastProgress = next.progress;
      if (next.done || next.item === null) {
        this.current = null;
        this.currentItem = null;
        return { kind: 'done', progress: next.progress };
      }
      // Guard against a server that re-serves an item whose only remaining
      // task the client just skipped: drop skipped tasks from the queue.
      this.currentItem = next.item;
      this.taskQueue = next.item.tasks.filter(
        (task) =>
          !this.skipped.some(
            (skip) => skip.itemId === next.item!.item_id && skip.task === task.task,
          ),
      );
      if (this.taskQueue.length === 0) {
        this.currentItem = null;
        return { kind: 'done', progress: next.progress };
      }
    }
  }

  /**
   * Submit the answer for the currently presented task. Returns the next
   * session event; re-entrant calls while a submit is in flight are
   * rejected to keep presentation strictly sequential.
   */
  async submitCurrent(value: number): Promise<SessionEvent> {
    if (this.current === null) {
      throw new Error('no task is currently presented');
    }
    if (this.submitting) {
      throw new Error('a submission is already in flight');
    }
    this.submitting = true;
    const { item, task } = this.current;
    try {
      await this.api.submit(this.raterId, item.item_id, task.task, value);
    } catch (error) {
      if (!(error instanceof DuplicateResponseError)) {
        throw error;
      }
      // already answered (e.g. resubmission after reload): advance normally
    } finally {
      this.submitting = false;
    }
    this.current = null;
    return this.advance();
  }
}
