/**
 * Headless study-session logic for blind method comparison.
 *
 * The hub serves each item's result panes in a hidden, seed-derived random
 * order; the client records selections as display positions only, so method
 * identities never reach the annotator. Submission of the whole session is
 * blocked until every item is answered or explicitly skipped.
 */

import { HubClient, StudyItem } from "./api.js";

export interface ItemAnswer {
  itemIndex: number;
  /** display positions judged successful; empty set means "all failed" */
  selectedPositions: number[];
  skipped: boolean;
}

export class StudySession {
  items: StudyItem[] = [];
  private answers = new Map<number, ItemAnswer>();

  constructor(
    private readonly client: HubClient,
    public readonly studyId: string,
    public readonly annotator: string,
  ) {}

  async load(): Promise<StudyItem[]> {
    const res = await this.client.studyItems(this.studyId);
    this.items = res.items;
    return this.items;
  }

  /** Record the checkbox state for one item (not yet sent to the hub). */
  answer(itemIndex: number, selectedPositions: number[]): void {
    const item = this.items.find((i) => i.item_index === itemIndex);
    if (!item) throw new Error(`unknown study item ${itemIndex}`);
    const bad = selectedPositions.filter((p) => p < 0 || p >= item.panes.length);
    if (bad.length) throw new Error(`positions out of range: ${bad}`);
    this.answers.set(itemIndex, {
      itemIndex,
      selectedPositions: [...new Set(selectedPositions)].sort((a, b) => a - b),
      skipped: false,
    });
  }

  skip(itemIndex: number): void {
    this.answers.set(itemIndex, { itemIndex, selectedPositions: [], skipped: true });
  }

  get unanswered(): number[] {
    return this.items.map((i) => i.item_index).filter((i) => !this.answers.has(i));
  }

  get complete(): boolean {
    return this.items.length > 0 && this.unanswered.length === 0;
  }

  /**
   * Push all recorded selections to the hub. Refuses partial sessions:
   * every item must be answered or skipped first.
   */
  async submit(): Promise<number> {
    if (!this.complete) {
      throw new Error(`session incomplete: items ${this.unanswered.join(", ")} unanswered`);
    }
    let sent = 0;
    for (const answer of [...this.answers.values()].sort((a, b) => a.itemIndex - b.itemIndex)) {
      if (answer.skipped) continue;
      await this.client.submitSelection(
        this.studyId,
        answer.itemIndex,
        this.annotator,
        answer.selectedPositions,
      );
      sent += 1;
    }
    return sent;
  }
}
