/**
 * DOM rendering for the document pane and conversation turns.
 *
 * The document pane shows the interleaved chunk sequence so evidence
 * highlighting aligns exactly with chunk ids. All displayed numbers are
 * server echoes.
 */
import { Client, DocumentDetail, EvidenceItem } from "./api.js";
import { Session, Turn } from "./session.js";

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/** Render the interleaved chunk sequence into the document pane. */
export function renderDocumentPane(container: HTMLElement, detail: DocumentDetail): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  for (const chunk of detail.chunks) {
    const item =
      chunk.modality === "text"
        ? el(doc, "p", "chunk chunk-text", chunk.text)
        : el(doc, "figure", "chunk chunk-image", chunk.caption);
    item.dataset.chunkId = chunk.chunk_id;
    container.appendChild(item);
  }
}

/** Highlight one chunk in the document pane (clearing any previous one). */
export function highlightChunk(container: HTMLElement, chunkId: string | null): void {
  for (const node of Array.from(container.querySelectorAll<HTMLElement>(".chunk"))) {
    node.classList.toggle("highlighted", node.dataset.chunkId === chunkId);
  }
}

function renderChip(
  doc: Document,
  item: EvidenceItem,
  client: Client,
  docId: string,
  onSelect: (chunkId: string) => void,
): HTMLElement {
  const chip = el(doc, "button", `chip chip-${item.modality}`);
  chip.dataset.chunkId = item.chunk_id;
  chip.dataset.rank = String(item.rank);
  chip.appendChild(el(doc, "span", "chip-rank", `#${item.rank}`));
  chip.appendChild(el(doc, "span", "chip-score", item.score.toFixed(4)));
  if (item.modality === "image" && item.blob_hash) {
    const img = el(doc, "img", "chip-thumb");
    img.src = client.blobUrl(docId, item.blob_hash);
    img.alt = item.content_preview;
    chip.appendChild(img);
    chip.appendChild(el(doc, "span", "chip-caption", item.content_preview));
  } else {
    chip.appendChild(el(doc, "span", "chip-preview", item.content_preview));
  }
  chip.addEventListener("click", () => onSelect(item.chunk_id));
  return chip;
}

/**
 * Render one conversation turn: the question, then either the answer with
 * its evidence chips in server rank order, or an actionable error message.
 * Clicking a chip highlights the chunk in the document pane.
 */
export function renderTurn(
  container: HTMLElement,
  turn: Turn,
  session: Session,
  client: Client,
  documentPane: HTMLElement,
): HTMLElement {
  const doc = container.ownerDocument;
  const root = el(doc, "section", `turn turn-${turn.status}`);
  root.dataset.turnId = String(turn.id);
  root.appendChild(el(doc, "h3", "turn-question", turn.question));
  root.appendChild(el(doc, "span", "turn-k", `k=${turn.k}`));
  if (turn.status === "error") {
    root.appendChild(el(doc, "p", "turn-error", turn.errorMessage ?? "ask failed"));
  } else if (turn.status === "done" && turn.response) {
    root.appendChild(el(doc, "p", "turn-answer", turn.response.answer));
    const panel = el(doc, "div", "evidence-panel");
    for (const item of turn.response.evidence) {
      panel.appendChild(
        renderChip(doc, item, client, session.docId, (chunkId) => {
          session.highlight(chunkId);
          highlightChunk(documentPane, chunkId);
        }),
      );
    }
    root.appendChild(panel);
    const meta = `${turn.response.prompt_tokens} tokens · ${turn.response.latency_ms} ms · ${turn.response.backend_id}`;
    root.appendChild(el(doc, "footer", "turn-meta", meta));
  } else {
    root.appendChild(el(doc, "p", "turn-pending", "…"));
  }
  container.appendChild(root);
  return root;
}
