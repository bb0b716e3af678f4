/** Review session state: queue, current item, decisions, and rollback.
 *
 * Decisions are optimistic: the session advances to the next item as
 * soon as a decision is posted, and a 409 from the server rolls the
 * item back into view. Every state the UI shows derives from API
 * responses; nothing is fabricated locally.
 *
 * Keyboard protocol (all decisions reachable by keyboard alone):
 *   review:  A accept / R reject (opens editor) / U unsure / X exclude
 *   edit:    arrows move cursor, Space paint, Backspace erase,
 *            Z undo, Y redo, S submit, Escape cancel (twice to confirm)
 *   six-way: 1-6 choose proposal, D deny
 */

import { ApiClient } from "./api.js";
import { MaskEditor } from "./maskEditor.js";
import { bytesToBase64 } from "./pgm.js";
import type { Decision, Progress, ReviewItem } from "./types.js";

export type SessionMode = "review" | "edit" | "sixway" | "empty";

export interface EditCursor {
  x: number;
  y: number;
  radius: number;
}

export class ReviewSession {
  queue: ReviewItem[] = [];
  totalPending = 0;
  progress: Progress | null = null;
  editor: MaskEditor | null = null;
  cursor: EditCursor = { x: 0, y: 0, radius: 3 };
  note = "";
  lastError: string | null = null;
  /** Item ids with an in-flight submission (double-submit suppression). */
  private inFlight = new Set<string>();
  private escapeArmed = false;
  /** Fallback editor size when an item carries no stored mask yet. */
  defaultMaskSize = 256;

  constructor(
    private api: ApiClient,
    public reviewer: string,
  ) {}

  get current(): ReviewItem | null {
    return this.queue.length ? this.queue[0] : null;
  }

  get mode(): SessionMode {
    if (this.editor) return "edit";
    const item = this.current;
    if (!item) return "empty";
    return item.proposals.length === 6 ? "sixway" : "review";
  }

  get roundComplete(): boolean {
    return this.totalPending === 0 && this.queue.length === 0;
  }

  async refresh(limit = 50): Promise<void> {
    const [queue, progress] = await Promise.all([
      this.api.getQueue(limit),
      this.api.getProgress(),
    ]);
    if (queue.ok) {
      this.queue = queue.data.items.filter((item) => !this.inFlight.has(item.id));
      this.totalPending = queue.data.total_pending;
    }
    if (progress.ok) this.progress = progress.data;
  }

  /** Route one key press according to the current mode. */
  async handleKey(key: string): Promise<void> {
    const mode = this.mode;
    if (mode === "review") {
      const decision = { a: "accept", r: "reject", u: "unsure", x: "exclude" }[
        key.toLowerCase()
      ] as Decision | undefined;
      if (decision) await this.decide(decision);
      return;
    }
    if (mode === "sixway") {
      if (key >= "1" && key <= "6") await this.select(Number(key));
      else if (key.toLowerCase() === "d") await this.select("deny");
      return;
    }
    if (mode === "edit" && this.editor) {
      const editor = this.editor;
      const step = 1;
      switch (key) {
        case "ArrowLeft":
          this.cursor.x = Math.max(0, this.cursor.x - step);
          break;
        case "ArrowRight":
          this.cursor.x = Math.min(editor.width - 1, this.cursor.x + step);
          break;
        case "ArrowUp":
          this.cursor.y = Math.max(0, this.cursor.y - step);
          break;
        case "ArrowDown":
          this.cursor.y = Math.min(editor.height - 1, this.cursor.y + step);
          break;
        case " ":
          editor.stroke(this.cursor.x, this.cursor.y, this.cursor.radius, 1);
          break;
        case "Backspace":
          editor.stroke(this.cursor.x, this.cursor.y, this.cursor.radius, 0);
          break;
        default:
          switch (key.toLowerCase()) {
            case "z":
              editor.undo();
              break;
            case "y":
              editor.redo();
              break;
            case "s":
              await this.submitEdit();
              break;
            case "escape":
              this.cancelEdit();
              break;
          }
      }
    }
  }

  /** Accept/unsure/exclude post immediately; reject opens the editor. */
  async decide(decision: Decision): Promise<boolean> {
    const item = this.current;
    if (!item || this.inFlight.has(item.id)) return false;
    if (decision === "reject") {
      if (!this.editor) {
        await this.openEditor(item);
        return false; // submission blocked until an edited mask exists
      }
      return this.submitEdit();
    }
    if (decision === "unsure" && !this.note.trim()) {
      this.lastError = "unsure requires a note for the MDs";
      return false;
    }
    const body = {
      decision,
      reviewer: this.reviewer,
      ...(decision === "unsure" ? { note: this.note } : {}),
    };
    return this.submit(item, () => this.api.postDecision(item.id, body));
  }

  async openEditor(item: ReviewItem): Promise<void> {
    const bytes = await this.api.getMaskBytes(item.id);
    this.editor = bytes
      ? MaskEditor.fromPgm(bytes)
      : new MaskEditor(this.defaultMaskSize, this.defaultMaskSize);
    this.cursor = {
      x: Math.floor(this.editor.width / 2),
      y: Math.floor(this.editor.height / 2),
      radius: this.cursor.radius,
    };
    this.escapeArmed = false;
  }

  /** Post the reject along with the edited mask. */
  async submitEdit(): Promise<boolean> {
    const item = this.current;
    if (!item || !this.editor) return false;
    if (this.editor.undoDepth === 0) {
      this.lastError = "paint the correction before submitting the reject";
      return false;
    }
    const mask = bytesToBase64(this.editor.exportPgm());
    const ok = await this.submit(item, () =>
      this.api.postDecision(item.id, { decision: "reject", reviewer: this.reviewer, mask }),
    );
    if (ok) this.editor = null;
    return ok;
  }

  /** Local edits are discarded only after a second, confirming Escape. */
  cancelEdit(): boolean {
    if (!this.editor) return true;
    if (this.editor.undoDepth > 0 && !this.escapeArmed) {
      this.escapeArmed = true;
      this.lastError = "press Escape again to discard the edit";
      return false;
    }
    this.editor = null;
    this.escapeArmed = false;
    return true;
  }

  async select(choice: number | "deny"): Promise<boolean> {
    const item = this.current;
    if (!item || this.inFlight.has(item.id)) return false;
    return this.submit(item, () =>
      this.api.postSelect(item.id, { choice, reviewer: this.reviewer }),
    );
  }

  /** Optimistic advance with 409 rollback; refreshes after success. */
  private async submit(
    item: ReviewItem,
    post: () => Promise<{ ok: boolean; status: number; data: unknown }>,
  ): Promise<boolean> {
    this.inFlight.add(item.id);
    const position = this.queue.indexOf(item);
    if (position >= 0) this.queue.splice(position, 1); // advance now
    this.note = "";
    const response = await post();
    this.inFlight.delete(item.id);
    if (response.status === 409) {
      // Server wins: put its version of the item back into view and hold
      // the refresh until the reviewer acts on the conflict.
      const body = response.data as { item?: ReviewItem } | null;
      this.queue.unshift(body?.item ?? item);
      this.lastError = "decision conflicted with server state";
      return false;
    }
    if (!response.ok) {
      this.queue.unshift(item);
      this.lastError = `submission failed (${response.status})`;
      return false;
    }
    this.lastError = null;
    await this.refresh();
    return true;
  }
}
