#![no_main]

use fedadc::data::LabeledDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = LabeledDataset::decode(data) {
        assert_eq!(ds.encode(), data);
    }
});
