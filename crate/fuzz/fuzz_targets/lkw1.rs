#![no_main]

use libfuzzer_sys::fuzz_target;
use lorakey::container::{Container, TensorData};

fn bits(d: &TensorData) -> Vec<u64> {
    match d {
        TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
    }
}

// Any accepted container re-serializes to one that parses to the same tensors.
fuzz_target!(|data: &[u8]| {
    let Ok(c) = Container::from_bytes(data) else { return };
    let bytes = c.to_bytes().expect("parsed container serializes");
    let again = Container::from_bytes(&bytes).expect("serialized container parses");
    assert_eq!(c.tensors().len(), again.tensors().len());
    for (a, b) in c.tensors().iter().zip(again.tensors()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        assert_eq!(bits(&a.data), bits(&b.data));
    }
});
