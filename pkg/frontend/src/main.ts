/**
 * Bootstrap: read the rater id, then loop task -> submit -> next until done.
 */

import { StudyApiClient, UnknownRaterError, type FetchLike } from './api';
import { SessionController, type SessionEvent } from './session';
import {
  renderEvent,
  renderProgress,
  renderSetupError,
  type TaskView,
} from './views';

function isTaskView(value: HTMLElement | TaskView): value is TaskView {
  return (value as TaskView).submitButton !== undefined;
}

export interface SessionOptions {
  baseUrl?: string;
  fetchImpl?: FetchLike;
}

export async function runSession(
  doc: Document,
  mount: HTMLElement,
  raterId: string,
  options: SessionOptions = {},
): Promise<void> {
  const api = new StudyApiClient(options.baseUrl ?? '', options.fetchImpl);
  const session = new SessionController(api, raterId);

  let event: SessionEvent;
  try {
    event = await session.advance();
  } catch (error) {
    if (error instanceof UnknownRaterError) {
      mount.replaceChildren(renderSetupError(doc, error.message));
      return;
    }
    throw error;
  }

  const show = (current: SessionEvent): void => {
    mount.replaceChildren(renderProgress(doc, session.progress));
    const rendered = renderEvent(doc, current);
    if (!isTaskView(rendered)) {
      mount.appendChild(rendered);
      if (current.kind === 'skipped') {
        void session.advance().then(show);
      }
      return;
    }
    rendered.submitButton.addEventListener('click', () => {
      const value = rendered.selectedValue();
      if (value === null) {
        return; // button should be disabled; defensive
      }
      rendered.submitButton.disabled = true;
      void session.submitCurrent(value).then(show);
    });
    mount.appendChild(rendered.root);
  };
  show(event);
}

export function boot(doc: Document): void {
  const mount = doc.getElementById('app');
  if (mount === null) {
    return;
  }
  const raterId = new URL(doc.location.href).searchParams.get('rater') ?? '';
  if (raterId === '') {
    mount.replaceChildren(
      renderSetupError(doc, 'Append ?rater=<your id> to the URL to begin.'),
    );
    return;
  }
  void runSession(doc, mount, raterId);
}

if (typeof document !== 'undefined' && typeof process === 'undefined') {
  boot(document);
}
