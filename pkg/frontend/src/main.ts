import { ApiClient } from "./api.js";
import { App } from "./app.js";

// Single configuration knob: the service base URL. Defaults to same-origin
// (the console is typically mounted at /ui on the service itself).
const baseUrl = window.localStorage.getItem("quarry.baseUrl") ?? "";

const app = new App(new ApiClient(baseUrl), document.getElementById("app")!);
void app.route();
