//! The mirror of case 1: the finder files first, the family second. The
//! family receives the finder's contact details.

use lostfound::scenario::{demo_family, demo_finder, synthetic_submission, Sandbox};
use lostfound::Side;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(true)?;
    let p = &sb.pipeline;

    p.submit(synthetic_submission(Side::Finding, demo_finder(), "unknown boy", "I1", "v2", 9))?;
    let family = p.submit(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v1", 7))?;
    println!("{}: {}", family.disposition, family.message);
    let contact = family.other_side_contact.expect("a match carries the other side's contact");
    println!("finder: {} / {} / {}", contact.name, contact.phone, contact.email);
    Ok(())
}
