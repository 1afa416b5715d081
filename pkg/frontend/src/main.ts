/** Page wiring: document picker, ask form, conversation log. */
import { Client } from "./api.js";
import { highlightChunk, renderDocumentPane, renderTurn } from "./render.js";
import { DEFAULT_K, Session, isValidK } from "./session.js";

export async function mount(root: HTMLElement, baseUrl: string): Promise<void> {
  const doc = root.ownerDocument;
  const client = new Client(baseUrl);

  const picker = doc.createElement("select");
  picker.className = "doc-picker";
  const pane = doc.createElement("div");
  pane.className = "document-pane";
  const log = doc.createElement("div");
  log.className = "conversation";
  const form = doc.createElement("form");
  form.className = "ask-form";
  const question = doc.createElement("input");
  question.name = "question";
  question.placeholder = "Ask about this document…";
  const kInput = doc.createElement("input");
  kInput.name = "k";
  kInput.type = "number";
  kInput.min = "1";
  kInput.step = "1";
  kInput.value = String(DEFAULT_K);
  const submit = doc.createElement("button");
  submit.type = "submit";
  submit.textContent = "Ask";
  form.append(question, kInput, submit);
  root.append(picker, form, log, pane);

  let session: Session | null = null;

  async function selectDocument(docId: string): Promise<void> {
    session = new Session(client, docId);
    log.replaceChildren();
    renderDocumentPane(pane, await client.getDocument(docId));
  }

  for (const d of await client.listDocuments()) {
    const opt = doc.createElement("option");
    opt.value = d.doc_id;
    opt.textContent = `${d.doc_id} (${d.n_text} text, ${d.m_image} image)`;
    picker.appendChild(opt);
  }
  picker.addEventListener("change", () => void selectDocument(picker.value));
  if (picker.options.length > 0) await selectDocument(picker.value);

  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    if (!session || !question.value) return;
    const k = Number(kInput.value);
    if (!isValidK(k)) {
      kInput.setCustomValidity("k must be a whole number of at least 1");
      kInput.reportValidity();
      return;
    }
    kInput.setCustomValidity("");
    session.setK(k);
    highlightChunk(pane, null);
    const active = session;
    void active.ask(question.value).then((turn) => {
      if (session === active) renderTurn(log, turn, active, client, pane);
    });
    question.value = "";
  });
}
