#![no_main]
use libfuzzer_sys::fuzz_target;

use gridmarkov::gmrf::SampleMatrix;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = SampleMatrix::read_csv(data) {
        let mut buf = Vec::new();
        m.write_csv(&mut buf).expect("writes to memory");
        let back = SampleMatrix::read_csv(buf.as_slice()).expect("re-parses");
        assert_eq!(back.var_ids(), m.var_ids());
        assert_eq!(back.corrupted(), m.corrupted());
    }
});
