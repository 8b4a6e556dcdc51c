//! An uploader whose NID is not in the citizen registry is turned away before
//! anything is embedded or stored as active.

use lostfound::scenario::{demo_intruder, synthetic_submission, Sandbox};
use lostfound::Side;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(true)?;
    let p = &sb.pipeline;
    let who = demo_intruder();
    println!("uploader NID {}", who.nid);
    let out = p.submit(synthetic_submission(Side::Missing, who, "someone", "I7", "v1", 1))?;
    println!("{}: {}", out.disposition, out.message);
    println!("active entries: {}", p.entries().active_entries(Side::Missing).len());
    Ok(())
}
