//! Runs the JSON API on an ephemeral port and talks to it over HTTP.

use lostfound::api::{app, ServerHandle};
use lostfound::scenario::{demo_family, synthetic_submission, Sandbox};
use lostfound::Side;
use serde_json::Value;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(true)?;
    let server = ServerHandle::spawn(app(sb.pipeline.clone(), None), "127.0.0.1:0")?;
    let base = server.base_url();
    println!("serving on {base}");

    let http = reqwest::blocking::Client::new();
    let body = serde_json::to_value(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v1", 7))?;
    let r = http.post(format!("{base}/api/entries")).json(&body).send()?;
    println!("POST /api/entries -> {}", r.status());
    let outcome: Value = r.json()?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);

    let report: Value = http.get(format!("{base}/api/entries/{}", outcome["entry_id"])).send()?.json()?;
    println!("entry status: {}", report["status"]);
    let outbox: Value = http.get(format!("{base}/api/outbox")).send()?.json()?;
    println!("outbox holds {} notifications", outbox.as_array().map_or(0, Vec::len));
    server.shutdown();
    Ok(())
}
