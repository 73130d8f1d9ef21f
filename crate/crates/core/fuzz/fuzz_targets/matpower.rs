#![no_main]
use libfuzzer_sys::fuzz_target;

use gridmarkov::case_io::{from_canonical_json, parse_matpower_case, to_canonical_json};

fuzz_target!(|text: &str| {
    if let Ok(case) = parse_matpower_case(text) {
        // Anything accepted must survive the canonical JSON round trip.
        let back = from_canonical_json(&to_canonical_json(&case)).expect("canonical JSON re-parses");
        assert_eq!(back, case);
    }
});
