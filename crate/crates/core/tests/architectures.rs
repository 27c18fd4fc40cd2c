//! Receptive fields of the bundled architecture manifests against the
//! published per-layer sizes and strides.

use std::path::PathBuf;

use preimage::netio::read_manifest;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../nets").join(name)
}

fn check(file: &str, expected: &[(&str, usize, usize)]) {
    let m = read_manifest(&fixture(file)).unwrap();
    let got = m.receptive_fields().unwrap();
    let got: Vec<_> = got.iter().map(|(n, g)| (n.as_str(), g.rf_size, g.rf_stride)).collect();
    assert_eq!(got, expected, "{file}");
}

#[test]
fn alexnet() {
    let expected = [
        ("conv1", 11, 4), ("relu1", 11, 4), ("norm1", 11, 4), ("pool1", 19, 8),
        ("conv2", 51, 8), ("relu2", 51, 8), ("norm2", 51, 8), ("pool2", 67, 16),
        ("conv3", 99, 16), ("relu3", 99, 16),
        ("conv4", 131, 16), ("relu4", 131, 16),
        ("conv5", 163, 16), ("relu5", 163, 16), ("pool5", 195, 32),
        ("fc6", 355, 32), ("relu6", 355, 32), ("fc7", 355, 32), ("relu7", 355, 32),
        ("fc8", 355, 32), ("prob", 355, 32),
    ];
    check("alexnet.toml", &expected);
}

#[test]
fn vgg_m() {
    let expected = [
        ("conv1", 7, 2), ("relu1", 7, 2), ("norm1", 7, 2), ("pool1", 11, 4),
        ("conv2", 27, 8), ("relu2", 27, 8), ("norm2", 27, 8), ("pool2", 43, 16),
        ("conv3", 75, 16), ("relu3", 75, 16),
        ("conv4", 107, 16), ("relu4", 107, 16),
        ("conv5", 139, 16), ("relu5", 139, 16), ("pool5", 171, 32),
        ("fc6", 331, 32), ("relu6", 331, 32), ("fc7", 331, 32), ("relu7", 331, 32),
        ("fc8", 331, 32), ("prob", 331, 32),
    ];
    check("vgg-m.toml", &expected);
}

#[test]
fn vgg_vd_16() {
    let expected = [
        ("conv1_1", 3, 1), ("relu1_1", 3, 1), ("conv1_2", 5, 1), ("relu1_2", 5, 1), ("pool1", 6, 2),
        ("conv2_1", 10, 2), ("relu2_1", 10, 2), ("conv2_2", 14, 2), ("relu2_2", 14, 2), ("pool2", 16, 4),
        ("conv3_1", 24, 4), ("relu3_1", 24, 4), ("conv3_2", 32, 4), ("relu3_2", 32, 4),
        ("conv3_3", 40, 4), ("relu3_3", 40, 4), ("pool3", 44, 8),
        ("conv4_1", 60, 8), ("relu4_1", 60, 8), ("conv4_2", 76, 8), ("relu4_2", 76, 8),
        ("conv4_3", 92, 8), ("relu4_3", 92, 8), ("pool4", 100, 16),
        ("conv5_1", 132, 16), ("relu5_1", 132, 16), ("conv5_2", 164, 16), ("relu5_2", 164, 16),
        ("conv5_3", 196, 16), ("relu5_3", 196, 16), ("pool5", 212, 32),
        ("fc6", 404, 32), ("relu6", 404, 32), ("fc7", 404, 32), ("relu7", 404, 32),
        ("fc8", 404, 32), ("prob", 404, 32),
    ];
    check("vgg-vd-16.toml", &expected);
}

#[test]
fn alexnet_layer_list() {
    let m = read_manifest(&fixture("alexnet.toml")).unwrap();
    let names = m.layer_names();
    assert_eq!(names.first().map(String::as_str), Some("conv1"));
    assert_eq!(names.last().map(String::as_str), Some("prob"));
    assert_eq!(names.len(), 21);
}

#[test]
fn fixtures_declare_their_blob_size() {
    let m = read_manifest(&fixture("alexnet.toml")).unwrap();
    // 60,965,224 parameters in single precision.
    assert_eq!(m.required_blob_len(), 243_860_896);
    assert!(matches!(m.build(&[]), Err(preimage::Error::Corrupt(_))));
}
