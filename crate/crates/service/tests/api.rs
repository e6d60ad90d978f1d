use std::time::Duration;

use base64::Engine;
use futures_util::StreamExt;
use gaussfield::io::{self, checkpoint};
use gaussfield::{ImageBuffer, Model, ModelConfig, PixelRect};
use gaussfield_service::{serve, AppState};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    client: reqwest::Client,
}

async fn start(state: AppState) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state, std::future::pending()));
    Server { base: format!("http://{addr}"), client: reqwest::Client::new() }
}

impl Server {
    async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(format!("{}{path}", self.base)).send().await.unwrap()
    }

    async fn post(&self, path: &str, body: Value) -> reqwest::Response {
        self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap()
    }

    async fn status(&self) -> Value {
        self.get("/api/status").await.json().await.unwrap()
    }

    async fn wait_done(&self) -> Value {
        let mut last_iter = 0;
        for _ in 0..2000 {
            let s = self.status().await;
            let iter = s["iter"].as_u64().unwrap();
            assert!(iter >= last_iter, "iter went backwards: {last_iter} -> {iter}");
            last_iter = iter;
            match s["state"].as_str().unwrap() {
                "running" => tokio::time::sleep(Duration::from_millis(20)).await,
                _ => return s,
            }
        }
        panic!("training did not finish");
    }

    async fn means(&self) -> Vec<u8> {
        let r = self.get("/api/gaussians").await;
        assert_eq!(r.status(), 200);
        r.bytes().await.unwrap().to_vec()
    }

    async fn render(&self, body: Value) -> Vec<u8> {
        let r = self.post("/api/render", body).await;
        assert_eq!(r.status(), 200);
        assert_eq!(r.headers()["content-type"], "image/png");
        r.bytes().await.unwrap().to_vec()
    }

    async fn edit(&self, ops: Value) -> reqwest::Response {
        self.post("/api/edit", json!({ "ops": ops })).await
    }
}

fn toy_image() -> ImageBuffer {
    ImageBuffer::from_fn(24, 20, 3, |r, c| {
        vec![r as f64 / 20.0, c as f64 / 24.0, ((r + c) % 5) as f64 / 5.0]
    })
    .unwrap()
}

fn toy_config(iterations: usize) -> Value {
    json!({
        "n_gaussians": 150,
        "knn_k": 8,
        "knn_radius": 0.15,
        "grid_levels": 3,
        "min_res": 4,
        "max_res": 32,
        "hash_table_log2": 8,
        "mlp_hidden_layers": 1,
        "mlp_hidden_width": 16,
        "batch_size": 128,
        "iterations": iterations,
    })
}

fn train_body(iterations: usize) -> Value {
    let png = io::encode_png(&toy_image()).unwrap();
    json!({
        "image_png": base64::engine::general_purpose::STANDARD.encode(png),
        "config": toy_config(iterations),
    })
}

fn translate_all(dx: f64) -> Value {
    json!([{ "select": {"kind": "all"}, "transform": {"kind": "translate", "v": [dx, 0.0]} }])
}

async fn trained_server(iterations: usize) -> Server {
    let srv = start(AppState::new(None)).await;
    let r = srv.post("/api/train", train_body(iterations)).await;
    assert_eq!(r.status(), 200);
    let s = srv.wait_done().await;
    assert_eq!(s["state"], "done", "{s}");
    srv
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_status_before_any_job() {
    let srv = start(AppState::new(None)).await;
    let s = srv.status().await;
    assert_eq!(s["state"], "idle");
    assert_eq!(s["iter"], 0);
    assert!(s["psnr"].is_null());
    assert_eq!(srv.get("/api/gaussians").await.status(), 404);
    assert_eq!(srv.post("/api/undo", json!(null)).await.status(), 409);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn training_job_lifecycle_and_progress_messages() {
    let srv = start(AppState::new(None)).await;
    let ws_url = srv.base.replace("http://", "ws://") + "/ws";
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url).await.unwrap();

    let r = srv.post("/api/train", train_body(300)).await;
    assert_eq!(r.status(), 200);
    let job: Value = r.json().await.unwrap();
    assert!(job["job_id"].as_u64().is_some());
    assert_eq!(srv.status().await["state"], "running");

    let busy = srv.post("/api/train", train_body(300)).await;
    assert_eq!(busy.status(), 409);
    let edit = srv.edit(translate_all(0.01)).await;
    assert_eq!(edit.status(), 409);

    let done = srv.wait_done().await;
    assert_eq!(done["state"], "done");
    assert_eq!(done["iter"], 300);
    assert_eq!(done["version"], 1);

    let mut progress = Vec::new();
    let mut preview = None;
    while preview.is_none() {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap().unwrap().unwrap();
        let Message::Text(text) = msg else { continue };
        let v: Value = serde_json::from_str(&text).unwrap();
        match v["type"].as_str().unwrap() {
            "progress" => progress.push(v["iter"].as_u64().unwrap()),
            "preview" => preview = Some(v["version"].as_u64().unwrap()),
            other => panic!("unexpected message type {other}"),
        }
    }
    assert_eq!(progress, vec![100, 200, 300]);
    assert_eq!(preview, Some(1));

    // Final PSNR is that of the stored model against the training image.
    let ckpt = srv.get("/api/checkpoint").await.bytes().await.unwrap();
    let model = checkpoint::from_bytes(&ckpt).unwrap();
    let target = io::decode_png(&io::encode_png(&toy_image()).unwrap()).unwrap();
    let eval = gaussfield::psnr(&io::quantize_image(&model.render_native().unwrap()), &target).unwrap();
    assert!((done["psnr"].as_f64().unwrap() - eval).abs() < 1e-6);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_config_names_fields() {
    let srv = start(AppState::new(None)).await;
    let mut body = train_body(10);
    body["config"]["knn_radius"] = json!(-0.5);
    body["config"]["mlp_hidden_width"] = json!("wide");
    let r = srv.post("/api/train", body).await;
    assert_eq!(r.status(), 400);
    let v: Value = r.json().await.unwrap();
    let msg = v["error"].as_str().unwrap();
    assert!(msg.contains("mlp_hidden_width"), "{msg}");
    let mut body = train_body(10);
    body["config"]["knn_radius"] = json!(-0.5);
    let v: Value = srv.post("/api/train", body).await.json().await.unwrap();
    assert_eq!(v["violations"][0]["field"], "knn_radius");
    assert_eq!(srv.status().await["state"], "idle");

    let r = srv.post("/api/train", json!({"image": "/nonexistent.png"})).await;
    assert_eq!(r.status(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn zero_iterations_gives_untrained_baked_model() {
    let srv = trained_server(0).await;
    let s = srv.status().await;
    assert_eq!(s["iter"], 0);
    let meta: Value = srv.get("/api/gaussians/meta").await.json().await.unwrap();
    assert_eq!(meta["baked"], true);
    assert_eq!(meta["width"], 24);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gaussians_match_checkpoint_and_follow_edits() {
    let srv = trained_server(20).await;
    let meta: Value = srv.get("/api/gaussians/meta").await.json().await.unwrap();
    let n = meta["n"].as_u64().unwrap() as usize;
    let bytes = srv.means().await;
    assert_eq!(bytes.len(), 8 * n);

    let ckpt = srv.get("/api/checkpoint").await.bytes().await.unwrap();
    let model = checkpoint::from_bytes(&ckpt).unwrap();
    let expect: Vec<u8> = model
        .means()
        .iter()
        .flat_map(|m| [(m.x as f32).to_le_bytes(), (m.y as f32).to_le_bytes()])
        .flatten()
        .collect();
    assert_eq!(bytes, expect);

    let r = srv.edit(translate_all(0.125)).await;
    assert_eq!(r.status(), 200);
    let after = srv.means().await;
    for (a, b) in bytes.chunks_exact(8).zip(after.chunks_exact(8)) {
        let x0 = f32::from_le_bytes(a[0..4].try_into().unwrap());
        let x1 = f32::from_le_bytes(b[0..4].try_into().unwrap());
        assert!((x1 - x0 - 0.125).abs() < 1e-6);
        assert_eq!(a[4..8], b[4..8]);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn edit_versions_undo_and_previews() {
    let srv = trained_server(20).await;
    let ws_url = srv.base.replace("http://", "ws://") + "/ws";
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url).await.unwrap();
    let v0 = srv.status().await["version"].as_u64().unwrap();
    let means0 = srv.means().await;
    let render = json!({"width": 24, "height": 20, "format": "png"});
    let png0 = srv.render(render.clone()).await;

    let r: Value = srv.edit(json!([])).await.json().await.unwrap();
    assert_eq!(r["render_version"].as_u64().unwrap(), v0);

    let r: Value = srv.edit(translate_all(0.05)).await.json().await.unwrap();
    assert_eq!(r["render_version"].as_u64().unwrap(), v0 + 1);
    let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
    let v: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
    assert_eq!(v, json!({"type": "preview", "version": v0 + 1}));
    assert_ne!(srv.render(render.clone()).await, png0);

    let r: Value = srv.post("/api/undo", json!(null)).await.json().await.unwrap();
    assert_eq!(r["render_version"].as_u64().unwrap(), v0 + 2);
    assert_eq!(srv.means().await, means0);
    assert_eq!(srv.render(render.clone()).await, png0);
    let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
    let v: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
    assert_eq!(v["version"].as_u64().unwrap(), v0 + 2);

    let r = srv.post("/api/undo", json!(null)).await;
    assert_eq!(r.status(), 409);
    // Exactly one preview per edit: nothing else is queued.
    assert!(tokio::time::timeout(Duration::from_millis(200), ws.next()).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_ops_report_index_and_leave_model() {
    let srv = trained_server(0).await;
    let v0 = srv.status().await["version"].clone();
    let ops = json!([
        { "select": {"kind": "all"}, "transform": {"kind": "translate", "v": [0.1, 0.0]} },
        { "select": {"kind": "all"}, "transform": {"kind": "rotate", "angle": 0.3} },
    ]);
    let r = srv.edit(ops).await;
    assert_eq!(r.status(), 400);
    let v: Value = r.json().await.unwrap();
    assert!(v["error"].as_str().unwrap().contains("op 1"), "{v}");
    let ops = json!([
        { "select": {"kind": "all"}, "transform": {"kind": "translate", "v": [0.1, 0.0]} },
        { "select": {"kind": "indices", "indices": [100000]}, "transform": {"kind": "translate", "v": [0.1, 0.0]} },
    ]);
    let v: Value = srv.edit(ops).await.json().await.unwrap();
    assert!(v["error"].as_str().unwrap().contains("op 1"), "{v}");
    assert_eq!(srv.status().await["version"], v0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn displace_bend_renders() {
    let srv = trained_server(0).await;
    let meta: Value = srv.get("/api/gaussians/meta").await.json().await.unwrap();
    let n = meta["n"].as_u64().unwrap() as usize;
    let means = srv.means().await;
    let offsets: Vec<Value> = means
        .chunks_exact(8)
        .map(|c| {
            let x = f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64;
            json!([0.0, 0.05 * (std::f64::consts::PI * x).sin()])
        })
        .collect();
    assert_eq!(offsets.len(), n);
    let ops = json!([{ "select": {"kind": "all"}, "transform": {"kind": "displace", "offsets": offsets} }]);
    assert_eq!(srv.edit(ops).await.status(), 200);
    let png = srv.render(json!({"width": 48, "height": 40})).await;
    let img = io::decode_png(&png).unwrap();
    assert_eq!((img.width(), img.height()), (48, 40));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn undo_stack_is_bounded_at_64() {
    let srv = trained_server(0).await;
    for _ in 0..65 {
        assert_eq!(srv.edit(translate_all(0.001)).await.status(), 200);
    }
    for i in 0..64 {
        assert_eq!(srv.post("/api/undo", json!(null)).await.status(), 200, "undo {i}");
    }
    assert_eq!(srv.post("/api/undo", json!(null)).await.status(), 409);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn render_is_deterministic_and_matches_exported_checkpoint() {
    let srv = trained_server(20).await;
    srv.edit(json!([{ "select": {"kind": "rect", "min": [0.0, 0.0], "max": [0.5, 0.5]},
                      "transform": {"kind": "rotate", "center": [0.25, 0.25], "angle": 0.4} }]))
        .await;
    let full = json!({"width": 30, "height": 25, "format": "png"});
    let a = srv.render(full.clone()).await;
    assert_eq!(a, srv.render(full).await);

    let ckpt = srv.get("/api/checkpoint").await.bytes().await.unwrap();
    let model = checkpoint::from_bytes(&ckpt).unwrap();
    assert_eq!(a, io::encode_png(&model.render(30, 25, None).unwrap()).unwrap());

    let region = PixelRect { x0: 4, y0: 3, x1: 20, y1: 17 };
    let part = srv.render(json!({"width": 30, "height": 25, "region": region})).await;
    let full_img = io::decode_png(&a).unwrap();
    let crop = full_img.crop(4, 3, 20, 17).unwrap();
    assert_eq!(io::decode_png(&part).unwrap(), crop);

    let r = srv.post("/api/render", json!({"width": 30, "height": 25, "format": "jpeg"})).await;
    assert_eq!(r.status(), 400);
    let r = srv.post("/api/render", json!({"width": 30, "height": 25, "region": {"x0": 0, "y0": 0, "x1": 31, "y1": 2}})).await;
    assert_eq!(r.status(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unbaked_model_rejects_edits() {
    let cfg: ModelConfig = serde_json::from_value(toy_config(0)).unwrap();
    let model = Model::init(&toy_image(), cfg, 0).unwrap();
    let srv = start(AppState::new(Some(model))).await;
    let r = srv.edit(translate_all(0.1)).await;
    assert_eq!(r.status(), 409);
    // Rendering an unbaked model is still allowed.
    srv.render(json!({"width": 8, "height": 8})).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cors_is_permissive() {
    let srv = start(AppState::new(None)).await;
    let r = srv
        .client
        .get(format!("{}/api/status", srv.base))
        .header("origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "*");
}
