#![no_main]

use fedadc::engine::RunSummary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(summary) = RunSummary::parse(text) {
        let _ = summary.resolved_config();
    }
});
