#![no_main]

use libfuzzer_sys::fuzz_target;
use lorakey::ppm::{decode_ppm, encode_ppm};

// Decoded pixels lie in [0, 1], and re-encoding is a fixed point.
fuzz_target!(|data: &[u8]| {
    let Ok((shape, image)) = decode_ppm(data) else { return };
    assert!(image.iter().all(|v| (0.0..=1.0).contains(v)));
    let bytes = encode_ppm(shape, &image).expect("decoded image encodes");
    let (shape2, image2) = decode_ppm(&bytes).expect("encoded image decodes");
    assert_eq!(shape, shape2);
    assert_eq!(encode_ppm(shape2, &image2).unwrap(), bytes);
});
