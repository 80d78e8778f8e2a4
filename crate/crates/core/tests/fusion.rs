use gausshead::fusion::*;
use gausshead::Image;

fn px(c: [f64; 3]) -> Image {
    Image::from_fn(1, 1, 3, |_, _, k| c[k])
}

#[test]
fn substitution_example() {
    let out = fuse_head(&px([1.0, 0.0, 0.0]), &Image::filled(1, 1, 1, 0.6), &px([0.0, 1.0, 0.0])).unwrap();
    assert!((out.data[0] - 0.6).abs() < 1e-15);
    assert!((out.data[1] - 0.4).abs() < 1e-15);
    assert_eq!(out.data[2], 0.0);
}

#[test]
fn opaque_and_transparent_face() {
    let f = px([0.2, 0.3, 0.4]);
    let m = px([0.9, 0.8, 0.7]);
    assert_eq!(fuse_head(&f, &Image::filled(1, 1, 1, 1.0), &m).unwrap(), f);
    assert_eq!(fuse_head(&f, &Image::filled(1, 1, 1, 0.0), &m).unwrap(), m);
}

#[test]
fn rejects_bad_inputs() {
    let f = px([0.2, 0.3, 0.4]);
    assert!(fuse_head(&f, &Image::filled(1, 1, 1, 1.2), &f).is_err());
    assert!(fuse_head(&f, &Image::filled(1, 1, 1, -0.1), &f).is_err());
    assert!(fuse_head(&f, &Image::filled(2, 1, 1, 0.5), &f).is_err());
    assert!(fuse_head(&f, &Image::filled(1, 1, 1, 0.5), &Image::zeros(2, 1, 3)).is_err());
}
