/**
 * Headless annotation-session logic: fetch the next pending task, submit a
 * yes/no/skip decision, keep a progress counter. A lost race (someone else
 * labeled the task first) is surfaced as a non-blocking notice and the
 * session advances.
 */

import { HubClient, HubError, Task } from "./api.js";

export type Decision = { kind: "yes" } | { kind: "no"; reason?: FailureReason } | { kind: "skip" };

/** Failure taxonomy recorded on negative labels. */
export type FailureReason = "incomplete-removal" | "blurry-region" | "wrong-content";

export const FAILURE_REASONS: FailureReason[] = [
  "incomplete-removal",
  "blurry-region",
  "wrong-content",
];

export interface SessionEvent {
  kind: "labeled" | "skipped" | "conflict" | "drained" | "error";
  taskId?: string;
  message?: string;
}

export class AnnotationSession {
  current: Task | null = null;
  pending = 0;
  done = 0;
  conflicts = 0;

  constructor(
    private readonly client: HubClient,
    public readonly annotator: string,
    public readonly round?: number,
  ) {}

  /** Load the next pending task; null means the queue is drained. */
  async fetchNext(): Promise<Task | null> {
    const res = await this.client.nextTask(this.annotator, this.round);
    this.current = res.task;
    this.pending = res.pending;
    return res.task;
  }

  /**
   * Submit the decision for the current task and advance. Conflicts do not
   * abort the session: the task was labeled by someone else, so it is
   * reported and the next task is fetched.
   */
  async decide(decision: Decision): Promise<SessionEvent> {
    if (!this.current) {
      return { kind: "drained" };
    }
    const task = this.current;
    try {
      if (decision.kind === "skip") {
        await this.client.skipTask(task.id, this.annotator);
        this.done += 1;
        return { kind: "skipped", taskId: task.id };
      }
      const label = decision.kind === "yes" ? 1 : 0;
      const reason = decision.kind === "no" ? decision.reason : undefined;
      await this.client.submitLabel(task.id, label, this.annotator, reason);
      this.done += 1;
      return { kind: "labeled", taskId: task.id };
    } catch (err) {
      if (err instanceof HubError && err.status === 409) {
        this.conflicts += 1;
        return { kind: "conflict", taskId: task.id, message: err.message };
      }
      throw err;
    }
  }

  /** Label an entire queue with a fixed decision function; used by tests. */
  async drain(decide: (task: Task) => Decision): Promise<SessionEvent[]> {
    const events: SessionEvent[] = [];
    for (;;) {
      const task = await this.fetchNext();
      if (!task) {
        events.push({ kind: "drained" });
        return events;
      }
      events.push(await this.decide(decide(task)));
    }
  }
}
