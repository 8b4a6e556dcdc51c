//! Delivering the outbox. A transport that fails once leaves the message for
//! the next drain; delivered messages are never sent twice.

use std::cell::Cell;

use lostfound::notification::{drain_outbox, JsonlOutbox, MailTransport, NotificationError};
use lostfound::scenario::{demo_authority, demo_family, demo_finder, synthetic_submission};
use lostfound::{Notification, Pipeline, PipelineConfig, Side, SyntheticProvider};
use std::sync::Arc;

struct Flaky {
    fail_next: Cell<bool>,
}

impl MailTransport for Flaky {
    fn deliver(&self, n: &Notification) -> Result<(), NotificationError> {
        if self.fail_next.replace(false) {
            return Err(NotificationError::Delivery { id: n.id, message: "relay busy".into() });
        }
        println!("  sent #{} {} to {}", n.id, n.kind, n.to_email);
        Ok(())
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = PipelineConfig { auto_approve: true, ..PipelineConfig::default() };
    let p = Pipeline::open(dir.path(), config, Arc::new(SyntheticProvider::default()), Arc::new(demo_authority()))?;
    p.submit(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v1", 7))?;
    p.submit(synthetic_submission(Side::Finding, demo_finder(), "Rafi Karim", "I1", "v2", 9))?;

    let outbox = JsonlOutbox::open(dir.path())?;
    let relay = Flaky { fail_next: Cell::new(true) };
    for round in 1..=3 {
        println!("drain {round}:");
        let report = drain_outbox(&outbox, &relay, dir.path())?;
        println!("  delivered {}, failed {}", report.delivered, report.failed);
    }
    Ok(())
}
