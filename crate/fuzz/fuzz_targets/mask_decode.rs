#![no_main]

use std::io::Cursor;

use geopretrain_core::dataset::{decode_mask, decode_mask_with, encode_mask, ColorCodeTable, ColorMatching};
use image::{ImageFormat, ImageReader, Limits};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut reader = ImageReader::with_format(Cursor::new(data), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_image_width = Some(512);
    limits.max_image_height = Some(512);
    limits.max_alloc = Some(16 << 20);
    reader.limits(limits);
    let Ok(img) = reader.decode() else { return };
    let rgb = img.to_rgb8();
    let table = ColorCodeTable::deepglobe();
    if let Ok(map) = decode_mask(&rgb, &table) {
        let encoded = encode_mask(&map, &table).expect("decoded classes are in the table");
        assert_eq!(encoded, rgb);
    }
    let (lenient, _) = decode_mask_with(&rgb, &table, ColorMatching::Lenient).expect("lenient decode accepts any color");
    assert_eq!(lenient.dims(), rgb.dimensions());
});
