/** Browser entry point. The service base URL defaults to the page's own
 * origin; append ?api=http://host:port to point elsewhere. */

import { Client } from "./api.js";
import { App } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("api") ?? window.location.origin;

const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");

const app = new App(root, new Client(base));
app.start().catch((err) => {
  root.insertAdjacentHTML(
    "beforeend",
    `<div class="banner">failed to reach the annotation service at ${base}</div>`,
  );
  console.error(err);
});
