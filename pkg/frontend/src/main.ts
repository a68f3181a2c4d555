/**
 * Entry point. Mode comes from the query string:
 *   ?annotator=NAME[&round=R]            -> yes/no labeling queue
 *   ?annotator=NAME&study=STUDY_ID       -> blind multi-method study
 * The hub origin defaults to the page origin (the hub serves this bundle).
 */

import { HubClient } from "./api.js";
import { AnnotationSession } from "./annotation.js";
import { StudySession } from "./study.js";
import { AnnotationView, StudyView } from "./views.js";

export async function boot(root: HTMLElement, query: URLSearchParams, baseUrl?: string): Promise<void> {
  const annotator = query.get("annotator") ?? "anonymous";
  const client = new HubClient(baseUrl ?? "");
  const studyId = query.get("study");
  if (studyId) {
    const view = new StudyView(client, new StudySession(client, studyId, annotator));
    root.replaceChildren(view.root);
    await view.start();
    return;
  }
  const roundParam = query.get("round");
  const session = new AnnotationSession(
    client,
    annotator,
    roundParam === null ? undefined : Number(roundParam),
  );
  const view = new AnnotationView(client, session);
  root.replaceChildren(view.root);
  await view.start();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  void boot(document.getElementById("app")!, new URLSearchParams(location.search));
}
