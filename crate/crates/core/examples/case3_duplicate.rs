//! The same family files the same person twice. The second entry is refused
//! and the original uploader and their station get a duplicate alert.

use lostfound::scenario::{demo_family, synthetic_submission, Sandbox};
use lostfound::{NotificationKind, Side};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(true)?;
    let p = &sb.pipeline;

    p.submit(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v1", 7))?;
    let again = p.submit(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v3", 11))?;
    println!("{}: {}", again.disposition, again.message);

    for kind in [NotificationKind::DuplicateAlertToParty, NotificationKind::DuplicateAlertToPolice] {
        for n in p.read_outbox(Some(kind))? {
            println!("{kind} -> {}", n.to_email);
        }
    }
    println!("active missing entries: {}", p.entries().active_entries(Side::Missing).len());
    Ok(())
}
