//! Manual verification. Submissions wait in AP until a station decides; a
//! denial rejects the entry, an approval runs the rest of the pipeline.

use lostfound::scenario::{demo_family, demo_finder, synthetic_submission, Sandbox};
use lostfound::{CaseState, Side};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sb = Sandbox::new(false)?;
    let p = &sb.pipeline;

    let lost = p.submit(synthetic_submission(Side::Missing, demo_family(), "Rafi Karim", "I1", "v1", 7))?;
    let found = p.submit(synthetic_submission(Side::Finding, demo_finder(), "boy at the station", "I1", "v2", 9))?;
    let noise = p.submit(synthetic_submission(Side::Finding, demo_finder(), "prank", "I5", "v1", 1))?;
    println!("pending cases: {}", p.cases().list(Some(CaseState::Pending)).len());

    let denied = p.decide_case(noise.case_id.unwrap(), false)?;
    println!("case {}: {}", noise.case_id.unwrap(), denied.disposition);
    for out in [&lost, &found] {
        let id = out.case_id.unwrap();
        println!("case {id}: {}", p.decide_case(id, true)?.disposition);
    }
    if let Err(e) = p.decide_case(lost.case_id.unwrap(), false) {
        println!("second decision refused: {e}");
    }
    Ok(())
}
