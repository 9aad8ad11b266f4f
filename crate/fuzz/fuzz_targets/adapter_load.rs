#![no_main]

use libfuzzer_sys::fuzz_target;
use lorakey::container::Container;
use lorakey::lora::LoraAdapter;

// A loaded adapter is finite-checked and survives a save/load cycle.
fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::from_bytes(data) else { return };
    let Ok(adapter) = LoraAdapter::from_container(&c) else { return };
    assert!(adapter.is_finite());
    let saved = adapter.to_container().expect("loaded adapter saves");
    let bytes = saved.to_bytes().expect("container serializes");
    let back = LoraAdapter::from_container(&Container::from_bytes(&bytes).unwrap()).expect("saved adapter loads");
    assert_eq!(back.target_names(), adapter.target_names());
    assert_eq!(back.rank(), adapter.rank());
});
