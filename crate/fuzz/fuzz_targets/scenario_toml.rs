#![no_main]

use comet::scenario::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(scenario) = ScenarioConfig::from_toml_str(data) {
        let text = scenario.to_toml_string();
        let back = ScenarioConfig::from_toml_str(&text).expect("serialized scenario parses");
        assert_eq!(back, scenario);
    }
});
