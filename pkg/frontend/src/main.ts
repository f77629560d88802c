import { ApiClient } from './api.js';
import { AnnotatorApp } from './app.js';

// Bootstraps from URL params: ?project=NAME&annotator=ID[&server=http://host:port]
const params = new URLSearchParams(window.location.search);
const server = params.get('server') ?? window.location.origin;
const project = params.get('project') ?? 'default';
const annotator = params.get('annotator') ?? 'anonymous';

const root = document.getElementById('app');
if (!root) throw new Error('missing #app mount point');

const app = new AnnotatorApp(
  root,
  { project, annotator },
  new ApiClient(server),
  window.localStorage,
);
app.bindGlobalHandlers(window);
void app.start();
