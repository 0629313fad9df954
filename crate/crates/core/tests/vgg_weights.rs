use vgg_iqa::vgg::{image_features, LAYER_COUNT};
use vgg_iqa::{RgbImage, VggWeights};

fn test_image() -> RgbImage {
    RgbImage::from_fn(40, 36, |x, y| [(x * 6) as u8, (y * 7) as u8, ((x * y) % 256) as u8])
}

#[test]
fn random_weights_survive_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.vggw");
    let w = VggWeights::synthetic(11);
    w.save(&path).unwrap();
    let back = VggWeights::load(&path).unwrap();
    assert_eq!(back.layers().len(), LAYER_COUNT);
    assert_eq!(w, back);
}

#[test]
fn loaded_weights_give_bit_identical_features() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.vggw");
    VggWeights::synthetic(3).save(&path).unwrap();
    let img = test_image();
    let first = image_features(&img, &VggWeights::load(&path).unwrap()).unwrap();
    let second = image_features(&img, &VggWeights::load(&path).unwrap()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn truncated_file_is_a_format_error() {
    let mut bytes = Vec::new();
    VggWeights::synthetic(0).write_to(&mut bytes).unwrap();
    bytes.truncate(bytes.len() - 7);
    let err = VggWeights::read_from(bytes.as_slice()).unwrap_err();
    assert!(matches!(err, vgg_iqa::Error::Format(_)), "{err}");
}
