use gausshead::image::*;

#[test]
fn png_roundtrip_is_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(5, 4, 3, |x, y, c| ((x + 2 * y + c) % 7) as f64 / 6.0);
    let path = dir.path().join("a.png");
    img.save_png(&path).unwrap();
    let back = Image::load_png(&path).unwrap();
    assert_eq!(back, img.quantized_u8());
}

#[test]
fn gray_png_stays_single_channel() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(3, 3, 1, |x, _, _| if x == 1 { 1.0 } else { 0.0 });
    let path = dir.path().join("m.png");
    img.save_png(&path).unwrap();
    assert_eq!(Image::load_png(&path).unwrap(), img);
}

#[test]
fn raw_floats_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    let vals = vec![0.5, -1.25, 3.0e-3f32 as f64];
    write_f32_le(&path, vals.iter().copied()).unwrap();
    assert_eq!(read_f32_le(&path).unwrap(), vals);
}
