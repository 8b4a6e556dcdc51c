//! Querying the directories directly. A missing-side query only sees ACTIVE
//! finding entries; a duplicate check only sees its own side.

use lostfound::scenario::{demo_family, demo_finder, synthetic_submission, Sandbox};
use lostfound::{Side, SyntheticProvider};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(true)?;
    let p = &sb.pipeline;
    for (label, variant) in [("I1", "v1"), ("I2", "v1"), ("I3", "v1")] {
        p.submit(synthetic_submission(Side::Finding, demo_finder(), "found", label, variant, 5))?;
    }
    p.submit(synthetic_submission(Side::Missing, demo_family(), "lost", "I9", "v1", 5))?;

    let probe = SyntheticProvider::default().synthetic_embed("I2", "fresh photo", 42)?;
    match p.cross_match(&probe, Side::Missing)? {
        Some(m) => println!("nearest finding entry {} at {:.4}", m.entry.id, m.distance),
        None => println!("no finding entry under the threshold"),
    }
    println!("duplicate among missing: {:?}", p.find_duplicate(&probe, Side::Missing)?.map(|m| m.entry.id));
    Ok(())
}
