/** Thin DOM binding over AppCore: renders state, forwards events. */

import { AppCore, ViewState } from './state.js';

export interface Elements {
  commandInput: HTMLInputElement;
  submitButton: HTMLButtonElement;
  undoButton: HTMLButtonElement;
  frameImage: HTMLImageElement;
  frameSlider: HTMLInputElement;
  frameLabel: HTMLElement;
  azimuthSlider: HTMLInputElement;
  elevationSlider: HTMLInputElement;
  radiusSlider: HTMLInputElement;
  historyList: HTMLElement;
  errorBox: HTMLElement;
}

export function bind(core: AppCore, el: Elements): void {
  let objectUrl: string | null = null;

  core.onChange((state: ViewState) => {
    el.frameSlider.max = String(Math.max(0, state.frames - 1));
    el.frameSlider.value = String(state.frame);
    el.frameLabel.textContent = `frame ${state.frame + 1}/${state.frames}`;
    el.errorBox.textContent = state.lastError ?? '';
    el.errorBox.style.display = state.lastError ? 'block' : 'none';
    el.submitButton.disabled = state.busy;

    el.historyList.replaceChildren(
      ...state.history.map((h) => {
        const li = document.createElement('li');
        li.textContent =
          h.status === 'ok'
            ? `${h.command}${h.plan ? ` [${h.plan.module}]` : ''}`
            : `${h.command} — ${h.error}`;
        li.className = h.status;
        return li;
      }),
    );

    if (state.currentImage) {
      const blob = new Blob([state.currentImage.slice().buffer], { type: 'image/png' });
      const next = URL.createObjectURL(blob);
      el.frameImage.src = next;
      if (objectUrl) URL.revokeObjectURL(objectUrl);
      objectUrl = next;
    }
  });

  const submit = () => {
    void core.submitCommand(el.commandInput.value).then((record) => {
      if (record?.status === 'ok') el.commandInput.value = '';
    });
  };
  el.submitButton.addEventListener('click', submit);
  el.commandInput.addEventListener('keydown', (ev) => {
    if (ev.key === 'Enter') submit();
  });
  el.undoButton.addEventListener('click', () => void core.undo());
  el.frameSlider.addEventListener('input', () => core.scrub(Number(el.frameSlider.value)));

  const orbit = () =>
    core.orbit(
      Number(el.azimuthSlider.value),
      Number(el.elevationSlider.value),
      Number(el.radiusSlider.value),
    );
  el.azimuthSlider.addEventListener('input', orbit);
  el.elevationSlider.addEventListener('input', orbit);
  el.radiusSlider.addEventListener('input', orbit);
}
