//! User-facing strings, in one place.
//!
//! The three rejection/no-match phrases are the exact texts shown to
//! submitters by the original system and are asserted verbatim in tests.

use crate::matching::Disposition;

pub const INVALID_INFO: &str = "Sorry, the NID or Police station info. is not valid!";
pub const ALREADY_LISTED: &str = "The lost person has already been listed at the site!";
pub const SAVED_FOR_FURTHER_USAGE: &str = "Sorry, the lost/found person has not been listed at the site yet and the information has been saved for further usage!";
pub const MATCH_FOUND: &str = "A match has been found! Please contact the other side using the details provided.";
pub const PENDING_VERIFICATION: &str = "Your information has been sent to the police station for verification. Status: AP (Administrative Processing).";

pub fn for_disposition(disposition: Disposition) -> &'static str {
    match disposition {
        Disposition::PendingVerification => PENDING_VERIFICATION,
        Disposition::RejectedInvalidInfo => INVALID_INFO,
        Disposition::RejectedDuplicate => ALREADY_LISTED,
        Disposition::StoredNoMatch => SAVED_FOR_FURTHER_USAGE,
        Disposition::Matched => MATCH_FOUND,
    }
}
