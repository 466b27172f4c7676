import { EngineClient } from './api.js';
import { bind, Elements } from './dom.js';
import { AppCore } from './state.js';

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get('engine') ?? 'http://127.0.0.1:8787';

const core = new AppCore(new EngineClient(baseUrl));
const elements: Elements = {
  commandInput: el('command-input'),
  submitButton: el('submit-button'),
  undoButton: el('undo-button'),
  frameImage: el('frame-image'),
  frameSlider: el('frame-slider'),
  frameLabel: el('frame-label'),
  azimuthSlider: el('azimuth-slider'),
  elevationSlider: el('elevation-slider'),
  radiusSlider: el('radius-slider'),
  historyList: el('history-list'),
  errorBox: el('error-box'),
};
bind(core, elements);

void core.openSession().then(() => core.refreshFrame());
