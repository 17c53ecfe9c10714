//! Send a stage-2 style request to an OpenAI-compatible endpoint.
//!
//! Set `GRIDLENS_ENDPOINT` (e.g. `http://localhost:8000/v1`), `GRIDLENS_MODEL`
//! and optionally `GRIDLENS_API_KEY`. Without an endpoint the request body is
//! printed instead of sent.

use gridlens::client::{ChatBackend, HttpBackend};
use gridlens::{BackendConfig, ChatRequest, RasterImage, StageTag};

pub fn run_example() -> gridlens::Result<()> {
    let endpoint = std::env::var("GRIDLENS_ENDPOINT").ok();
    let model = std::env::var("GRIDLENS_MODEL").unwrap_or_else(|_| "qwen2.5-vl-7b".into());
    let cfg = BackendConfig {
        max_retries: 1,
        timeout_secs: 60,
        ..BackendConfig::http(endpoint.clone().unwrap_or_else(|| "http://localhost:8000/v1".into()), model)
    };
    let backend = HttpBackend::new(cfg)?;
    let crop = RasterImage::filled(64, 48, [255, 255, 255], "blank-crop")?;
    let req = ChatRequest::new(StageTag::Stage2, "List the elements in this crop as a JSON array.", vec![crop]);

    if endpoint.is_none() {
        let body = backend.request_body(&req)?;
        let parts = body["messages"][0]["content"].as_array().map_or(0, Vec::len);
        println!("model {}, {parts} content parts, temperature {}", body["model"], body["temperature"]);
        println!("set GRIDLENS_ENDPOINT to send it");
        return Ok(());
    }
    let resp = backend.complete(&req)?;
    println!("{} answered in {} ms:\n{}", resp.backend_id, resp.latency_ms, resp.raw_text);
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
