/**
 * DOM views. No framework: the hub serves this as a static bundle, so the
 * whole UI is plain elements and listeners.
 */

import { HubClient, StudyItem, Task } from "./api.js";
import { AnnotationSession, Decision, FAILURE_REASONS, FailureReason } from "./annotation.js";
import { StudySession } from "./study.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (HTMLElement | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) {
    if (k === "class") node.className = v;
    else node.setAttribute(k, v);
  }
  for (const child of children) {
    node.append(typeof child === "string" ? document.createTextNode(child) : child);
  }
  return node;
}

/** Resolves when the image element has finished loading (or errored). */
function trackLoad(img: HTMLImageElement, onSettled: (ok: boolean) => void): void {
  img.addEventListener("load", () => onSettled(true), { once: true });
  img.addEventListener("error", () => onSettled(false), { once: true });
}

export class AnnotationView {
  readonly root: HTMLElement;
  private panes!: HTMLElement;
  private controls!: HTMLElement;
  private status!: HTMLElement;
  private progress!: HTMLElement;
  private reasonSelect!: HTMLSelectElement;
  private buttons: HTMLButtonElement[] = [];
  private loadedCount = 0;
  private overlayMode = true;
  private keyHandler: (ev: KeyboardEvent) => void;

  constructor(
    private readonly client: HubClient,
    private readonly session: AnnotationSession,
  ) {
    this.root = el("div", { class: "annotation-view" });
    this.keyHandler = (ev) => this.onKey(ev);
    document.addEventListener("keydown", this.keyHandler);
    this.render();
  }

  dispose(): void {
    document.removeEventListener("keydown", this.keyHandler);
  }

  private render(): void {
    this.root.replaceChildren();
    this.progress = el("div", { class: "progress" });
    this.status = el("div", { class: "status" });
    this.panes = el("div", { class: "panes" });
    this.reasonSelect = el("select", { class: "reason" }) as HTMLSelectElement;
    this.reasonSelect.append(el("option", { value: "" }, "reason (optional)"));
    for (const reason of FAILURE_REASONS) {
      this.reasonSelect.append(el("option", { value: reason }, reason));
    }
    const yes = el("button", { class: "yes", title: "shortcut: y" }, "Yes (y)") as HTMLButtonElement;
    const no = el("button", { class: "no", title: "shortcut: n" }, "No (n)") as HTMLButtonElement;
    const skip = el("button", { class: "skip", title: "shortcut: s" }, "Skip (s)") as HTMLButtonElement;
    const overlay = el("button", { class: "toggle-overlay" }, "Toggle mask overlay") as HTMLButtonElement;
    yes.addEventListener("click", () => void this.decide({ kind: "yes" }));
    no.addEventListener("click", () =>
      void this.decide({
        kind: "no",
        reason: (this.reasonSelect.value || undefined) as FailureReason | undefined,
      }),
    );
    skip.addEventListener("click", () => void this.decide({ kind: "skip" }));
    overlay.addEventListener("click", () => {
      this.overlayMode = !this.overlayMode;
      void this.showCurrent();
    });
    this.buttons = [yes, no, skip];
    this.controls = el("div", { class: "controls" }, yes, no, this.reasonSelect, skip, overlay);
    this.root.append(this.progress, this.panes, this.controls, this.status);
  }

  private setControlsEnabled(enabled: boolean): void {
    for (const b of this.buttons) b.disabled = !enabled;
  }

  private onKey(ev: KeyboardEvent): void {
    if (this.buttons.some((b) => b.disabled)) return;
    if (ev.key === "y") void this.decide({ kind: "yes" });
    else if (ev.key === "n") void this.decide({ kind: "no" });
    else if (ev.key === "s") void this.decide({ kind: "skip" });
  }

  async start(): Promise<void> {
    await this.showNext();
  }

  private async decide(decision: Decision): Promise<void> {
    this.setControlsEnabled(false);
    const event = await this.session.decide(decision);
    if (event.kind === "conflict") {
      this.status.textContent = `Task ${event.taskId} was labeled by someone else; moving on.`;
    } else {
      this.status.textContent = "";
    }
    await this.showNext();
  }

  private async showNext(): Promise<void> {
    try {
      const task = await this.session.fetchNext();
      if (!task) {
        this.renderDrained();
        return;
      }
      await this.showCurrent();
    } catch (err) {
      this.status.textContent = `Network trouble: ${String(err)}. Retry?`;
      const retry = el("button", { class: "retry" }, "Retry") as HTMLButtonElement;
      retry.addEventListener("click", () => void this.showNext(), { once: true });
      this.status.append(" ", retry);
    }
  }

  private async showCurrent(): Promise<void> {
    const task = this.session.current;
    if (!task) return;
    // decisions stay disabled until every pane has loaded
    this.loadedCount = 0;
    this.setControlsEnabled(false);
    this.progress.textContent = `Task ${task.id} (${task.class_label}) — ${this.session.pending} pending, ${this.session.done} done`;
    this.panes.replaceChildren();

    const settle = (ok: boolean) => {
      if (!ok) {
        this.status.textContent = "An image failed to load; skip is safest.";
      }
      this.loadedCount += 1;
      if (this.loadedCount >= 3) this.setControlsEnabled(true);
    };

    const source = el("img", { src: this.client.baseUrl + task.source_url, class: "pane source" }) as HTMLImageElement;
    const edited = el("img", { src: this.client.baseUrl + task.edited_url, class: "pane edited" }) as HTMLImageElement;
    const mask = el("img", {
      src: this.client.baseUrl + task.mask_url,
      class: this.overlayMode ? "pane mask overlay" : "pane mask side",
    }) as HTMLImageElement;
    trackLoad(source, settle);
    trackLoad(mask, settle);
    trackLoad(edited, settle);

    if (this.overlayMode) {
      const stack = el("div", { class: "stack" }, source, mask);
      this.panes.append(
        el("figure", {}, stack, el("figcaption", {}, "source + mask")),
        el("figure", {}, edited, el("figcaption", {}, "edited")),
      );
    } else {
      this.panes.append(
        el("figure", {}, source, el("figcaption", {}, "source")),
        el("figure", {}, mask, el("figcaption", {}, "mask")),
        el("figure", {}, edited, el("figcaption", {}, "edited")),
      );
    }
  }

  private renderDrained(): void {
    this.panes.replaceChildren(el("p", { class: "drained" }, "Queue drained. Thanks!"));
    this.controls.style.display = "none";
    this.progress.textContent = `${this.session.done} tasks handled, ${this.session.conflicts} conflicts.`;
  }
}

export class StudyView {
  readonly root: HTMLElement;
  private checkedByItem = new Map<number, Set<number>>();

  constructor(
    private readonly client: HubClient,
    private readonly session: StudySession,
  ) {
    this.root = el("div", { class: "study-view" });
  }

  async start(): Promise<void> {
    const items = await this.session.load();
    this.root.replaceChildren();
    for (const item of items) {
      this.root.append(this.renderItem(item));
    }
    const submit = el("button", { class: "submit" }, "Submit all") as HTMLButtonElement;
    const status = el("div", { class: "status" });
    submit.addEventListener("click", async () => {
      for (const item of items) {
        const checked = this.checkedByItem.get(item.item_index);
        if (checked) this.session.answer(item.item_index, [...checked]);
      }
      if (!this.session.complete) {
        status.textContent = `Answer or skip items: ${this.session.unanswered.join(", ")}`;
        return;
      }
      const sent = await this.session.submit();
      status.textContent = `Submitted ${sent} items.`;
      submit.disabled = true;
    });
    this.root.append(submit, status);
  }

  private renderItem(item: StudyItem): HTMLElement {
    const fig = el("div", { class: "study-item", "data-item": String(item.item_index) });
    const inputs = el(
      "div",
      { class: "inputs" },
      el("img", { src: this.client.blobUrl(item.source_ref), class: "pane" }),
      el("img", { src: this.client.blobUrl(item.mask_ref), class: "pane mask" }),
    );
    const panes = el("div", { class: "candidates" });
    this.checkedByItem.set(item.item_index, new Set());
    item.panes.forEach((ref, position) => {
      const box = el("input", {
        type: "checkbox",
        id: `item${item.item_index}-pos${position}`,
      }) as HTMLInputElement;
      box.addEventListener("change", () => {
        const set = this.checkedByItem.get(item.item_index)!;
        if (box.checked) set.add(position);
        else set.delete(position);
      });
      panes.append(
        el(
          "label",
          { class: "candidate", for: box.id },
          el("img", { src: this.client.blobUrl(ref), class: "pane" }),
          box,
          `option ${position + 1}`,
        ),
      );
    });
    const skip = el("button", { class: "skip-item" }, "Skip item") as HTMLButtonElement;
    skip.addEventListener("click", () => {
      this.session.skip(item.item_index);
      fig.classList.add("skipped");
    });
    fig.append(inputs, panes, skip);
    return fig;
  }
}
