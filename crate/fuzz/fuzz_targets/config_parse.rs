#![no_main]

use fedadc::engine::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        // anything accepted must survive a render/parse cycle unchanged
        let again = ExperimentConfig::parse(&cfg.to_text()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
