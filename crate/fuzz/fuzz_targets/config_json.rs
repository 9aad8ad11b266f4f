#![no_main]

use libfuzzer_sys::fuzz_target;
use lorakey_cli::config::ExperimentConfig;

// The first line holds `--set` overrides separated by spaces; the rest is the
// JSON document. Accepted configs serialize to a fixed point.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (first, body) = text.split_once('\n').unwrap_or(("", text));
    let overrides: Vec<String> = first.split_whitespace().map(str::to_string).collect();
    let Ok(doc) = serde_json::from_str(body) else { return };
    let Ok(cfg) = ExperimentConfig::from_value(doc, &overrides) else { return };
    let value = serde_json::to_value(&cfg).expect("config serializes");
    let again = ExperimentConfig::from_value(value.clone(), &[]).expect("serialized config loads");
    assert_eq!(serde_json::to_value(&again).unwrap(), value);
});
