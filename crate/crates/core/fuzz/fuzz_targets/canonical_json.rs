#![no_main]
use libfuzzer_sys::fuzz_target;

use gridmarkov::case_io::{from_canonical_json, to_canonical_json};

fuzz_target!(|text: &str| {
    if let Ok(case) = from_canonical_json(text) {
        let again = to_canonical_json(&case);
        assert_eq!(from_canonical_json(&again).expect("re-parses"), case);
    }
});
