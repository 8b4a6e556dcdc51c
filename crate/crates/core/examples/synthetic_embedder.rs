//! Distances produced by the deterministic test embedder: photos of the same
//! identity land well under the 0.6 threshold, different identities near √2.

use lostfound::{distance, is_match, EmbeddingProvider, FaceImage, MatchThreshold, SyntheticFace, SyntheticProvider};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let provider = SyntheticProvider::default();
    let tau = MatchThreshold::default();
    let embed = |label: &str, variant: &str, seed: u64| provider.embed(&FaceImage::synthetic(&SyntheticFace::new(label, variant, seed)));

    let a1 = embed("alice", "passport", 1)?;
    let a2 = embed("alice", "cctv", 2)?;
    let b = embed("bob", "passport", 1)?;
    println!("dimension {}", a1.len());
    println!("alice/alice {:.4} match={}", distance(&a1, &a2)?, is_match(&a1, &a2, tau)?);
    println!("alice/bob   {:.4} match={}", distance(&a1, &b)?, is_match(&a1, &b, tau)?);

    // the same photo always gives the same vector
    assert_eq!(a1, embed("alice", "passport", 1)?);
    Ok(())
}
