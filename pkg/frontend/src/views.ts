/**
 * DOM renderers for the two rating tasks, progress, and the end screen.
 *
 * Option labels always come from the server payload so the scale wording
 * lives in one place; nothing here ever touches or displays provenance.
 */

import type { PendingTask, SessionEvent } from './session';
import type { Progress, TaskOption } from './types';

export interface TaskView {
  root: HTMLElement;
  /** Enabled only once an option is chosen. */
  submitButton: HTMLButtonElement;
  /** The currently selected value, or null before any choice. */
  selectedValue(): number | null;
}

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

function renderOptions(
  doc: Document,
  root: HTMLElement,
  name: string,
  options: TaskOption[],
  submitButton: HTMLButtonElement,
): () => number | null {
  const list = el(doc, 'div', 'options');
  for (const option of options) {
    const label = el(doc, 'label', 'option');
    const radio = el(doc, 'input') as HTMLInputElement;
    radio.type = 'radio';
    radio.name = name;
    radio.value = String(option.value);
    radio.addEventListener('change', () => {
      submitButton.disabled = false;
    });
    label.appendChild(radio);
    label.appendChild(el(doc, 'span', 'option-label', option.label));
    list.appendChild(label);
  }
  root.appendChild(list);
  return () => {
    const checked = root.querySelector<HTMLInputElement>(`input[name="${name}"]:checked`);
    return checked === null ? null : Number(checked.value);
  };
}

/** Five mutually exclusive choices in fixed 1..5 order; submit starts disabled. */
export function renderRealismTask(doc: Document, pending: PendingTask): TaskView {
  const root = el(doc, 'section', 'task task-realism');
  root.appendChild(el(doc, 'h2', 'task-title', 'Does this image appear real or synthesized?'));

  const image = el(doc, 'img', 'study-image') as HTMLImageElement;
  image.src = pending.item.image_url;
  image.alt = 'chest radiograph under review';
  root.appendChild(image);

  const submitButton = el(doc, 'button', 'submit', 'Submit') as HTMLButtonElement;
  submitButton.type = 'button';
  submitButton.disabled = true;
  const ordered = [...pending.task.options].sort((a, b) => a.value - b.value);
  const selectedValue = renderOptions(doc, root, 'realism', ordered, submitButton);
  root.appendChild(submitButton);
  return { root, submitButton, selectedValue };
}

/** Binary choice plus a show/hide toggle for the segmentation overlay. */
export function renderHelpfulnessTask(doc: Document, pending: PendingTask): TaskView {
  if (pending.item.overlay_url === null) {
    throw new Error('helpfulness task requires an overlay');
  }
  const root = el(doc, 'section', 'task task-helpfulness');
  root.appendChild(
    el(doc, 'h2', 'task-title', 'Is the overlaid disease-area segmentation helpful for diagnosis?'),
  );

  const frame = el(doc, 'div', 'image-frame');
  const image = el(doc, 'img', 'study-image') as HTMLImageElement;
  image.src = pending.item.image_url;
  image.alt = 'chest radiograph under review';
  const overlay = el(doc, 'img', 'study-overlay') as HTMLImageElement;
  overlay.src = pending.item.overlay_url;
  overlay.alt = 'segmentation overlay';
  frame.appendChild(image);
  frame.appendChild(overlay);
  root.appendChild(frame);

  const toggle = el(doc, 'button', 'overlay-toggle', 'Hide overlay') as HTMLButtonElement;
  toggle.type = 'button';
  toggle.addEventListener('click', () => {
    const hidden = overlay.style.display === 'none';
    overlay.style.display = hidden ? '' : 'none';
    toggle.textContent = hidden ? 'Hide overlay' : 'Show overlay';
  });
  root.appendChild(toggle);

  const submitButton = el(doc, 'button', 'submit', 'Submit') as HTMLButtonElement;
  submitButton.type = 'button';
  submitButton.disabled = true;
  const ordered = [...pending.task.options].sort((a, b) => a.value - b.value);
  const selectedValue = renderOptions(doc, root, 'helpfulness', ordered, submitButton);
  root.appendChild(submitButton);
  return { root, submitButton, selectedValue };
}

export function renderProgress(doc: Document, progress: Progress): HTMLElement {
  return el(doc, 'div', 'progress', `${progress.answered} of ${progress.total} answered`);
}

/** End screen: totals only, never per-item answers. */
export function renderDone(doc: Document, progress: Progress): HTMLElement {
  const root = el(doc, 'section', 'done');
  root.appendChild(el(doc, 'h2', undefined, 'Session complete'));
  root.appendChild(
    el(doc, 'p', 'done-count', `You answered ${progress.answered} questions. Thank you.`),
  );
  return root;
}

export function renderSetupError(doc: Document, message: string): HTMLElement {
  const root = el(doc, 'section', 'setup-error');
  root.appendChild(el(doc, 'h2', undefined, 'Cannot start session'));
  root.appendChild(el(doc, 'p', undefined, message));
  return root;
}

export function renderEvent(doc: Document, event: SessionEvent): HTMLElement | TaskView {
  if (event.kind === 'done') {
    return renderDone(doc, event.progress);
  }
  if (event.kind === 'skipped') {
    return el(
      doc,
      'div',
      'skip-note',
      `Item ${event.itemId}: ${event.task} skipped (${event.reason})`,
    );
  }
  return event.pending.task.task === 'realism'
    ? renderRealismTask(doc, event.pending)
    : renderHelpfulnessTask(doc, event.pending);
}
