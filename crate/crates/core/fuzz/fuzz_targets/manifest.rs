#![no_main]
use libfuzzer_sys::fuzz_target;

use gridmarkov::experiment::ExperimentManifest;

fuzz_target!(|text: &str| {
    if let Ok(m) = ExperimentManifest::from_toml_str(text) {
        let _ = m.validate();
        let back = ExperimentManifest::from_toml_str(&m.to_toml()).expect("rendered manifest re-parses");
        assert_eq!(back.sha256(), m.sha256());
    }
});
