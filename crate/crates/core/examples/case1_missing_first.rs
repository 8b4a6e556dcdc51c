//! A family files a missing entry, then a finder files a photo of the same
//! person. The second submission matches and both sides are told.

use lostfound::scenario::{demo_family, demo_finder, synthetic_submission, Sandbox};
use lostfound::Side;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(true)?;
    let p = &sb.pipeline;

    let first = p.submit(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v1", 7))?;
    println!("family:  {} -> {}", first.disposition, first.message);

    let second = p.submit(synthetic_submission(Side::Finding, demo_finder(), "Rafi Karim", "I1", "v2", 9))?;
    println!("finder:  {} -> {}", second.disposition, second.message);
    if let (Some(m), Some(c)) = (&second.match_result, &second.other_side_contact) {
        println!("matched entry {} at distance {:.4}; call {} on {}", m.matched_entry_id, m.distance, c.name, c.phone);
    }
    for n in p.read_outbox(None)? {
        println!("outbox #{} {} -> {}", n.id, n.kind, n.to_email);
    }
    Ok(())
}
