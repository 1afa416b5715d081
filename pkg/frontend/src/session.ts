/**
 * Session state for the ask/inspect/refine loop.
 *
 * A session holds one active document, an ordered list of turns (each an
 * independent ask — the service is stateless), the k control, and the
 * currently highlighted chunk. Asks are serialized: one in flight at a
 * time, later asks queue behind the active request.
 */
import { AskResponse, Client, describeError } from "./api.js";

export type TurnStatus = "pending" | "done" | "error";

export interface Turn {
  id: number;
  question: string;
  k: number;
  status: TurnStatus;
  response?: AskResponse;
  errorMessage?: string;
}

export const DEFAULT_K = 5;

export function isValidK(k: number): boolean {
  return Number.isInteger(k) && k >= 1;
}

export class Session {
  readonly turns: Turn[] = [];
  highlightedChunk: string | null = null;

  private k = DEFAULT_K;
  private nextId = 1;
  private inFlight: Promise<void> = Promise.resolve();

  constructor(
    private readonly client: Client,
    readonly docId: string,
  ) {}

  get currentK(): number {
    return this.k;
  }

  /** Invalid k (non-integer or < 1) is blocked client-side. */
  setK(k: number): boolean {
    if (!isValidK(k)) return false;
    this.k = k;
    return true;
  }

  highlight(chunkId: string | null): void {
    this.highlightedChunk = chunkId;
  }

  /**
   * Issue an ask as a new turn. Turn history is preserved across asks so
   * evidence sets can be compared between k values. Returns the settled
   * turn.
   */
  ask(question: string, k?: number): Promise<Turn> {
    const turnK = k ?? this.k;
    if (!isValidK(turnK)) {
      return Promise.reject(new Error(`invalid k: ${turnK}`));
    }
    const turn: Turn = {
      id: this.nextId++,
      question,
      k: turnK,
      status: "pending",
    };
    this.turns.push(turn);
    const run = this.inFlight.then(async () => {
      try {
        turn.response = await this.client.ask(this.docId, question, turnK);
        turn.status = "done";
      } catch (err) {
        turn.status = "error";
        turn.errorMessage = describeError(err);
      }
    });
    this.inFlight = run;
    return run.then(() => turn);
  }
}

/** Evidence chunk ids of a finished turn, in server rank order. */
export function evidenceIds(turn: Turn): string[] {
  return (turn.response?.evidence ?? []).map((e) => e.chunk_id);
}

/** True when every evidence chunk of `small` also appears in `big`. */
export function isEvidenceSuperset(big: Turn, small: Turn): boolean {
  const bigIds = new Set(evidenceIds(big));
  return evidenceIds(small).every((id) => bigIds.has(id));
}
