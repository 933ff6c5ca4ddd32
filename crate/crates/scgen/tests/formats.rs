use rand::SeedableRng;
use scgen::checkpoint::Checkpoint;
use scgen::pnm::Image;
use scgen::{scgt, Error};
use scgen_core::{Shape, Tensor4};

fn random(shape: Shape, seed: u64) -> Tensor4<f64> {
    Tensor4::randn(shape, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn scgt_round_trips_both_dtypes() {
    let t = random(Shape::new(2, 3, 4, 5), 1);
    assert_eq!(scgt::decode::<f64>(&scgt::encode(&t)).unwrap(), t);
    let f: Tensor4<f32> = t.cast();
    let bytes = scgt::encode(&f);
    assert_eq!(&bytes[..4], b"SCGT");
    assert_eq!(bytes[4], 1);
    assert_eq!(bytes[5], 0);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 4);
    assert_eq!(bytes.len(), 10 + 32 + 4 * 120);
    assert_eq!(scgt::decode::<f32>(&bytes).unwrap(), f);
}

#[test]
fn scgt_reads_lower_rank() {
    let mut bytes = b"SCGT".to_vec();
    bytes.extend([1, 1]);
    bytes.extend(2u32.to_le_bytes());
    bytes.extend(2u64.to_le_bytes());
    bytes.extend(3u64.to_le_bytes());
    for i in 0..6 {
        bytes.extend((i as f64).to_le_bytes());
    }
    let t = scgt::decode::<f64>(&bytes).unwrap();
    assert_eq!(t.shape(), Shape::new(1, 1, 2, 3));
    assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn scgt_rejects_corruption_with_offsets() {
    let t = random(Shape::new(1, 2, 2, 2), 2);
    let bytes = scgt::encode(&t);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = scgt::decode::<f64>(&bad).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    assert!(err.to_string().contains("magic"));

    let err = scgt::decode::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(err.to_string().contains("at byte"));

    let mut long = bytes.clone();
    long.push(0);
    assert!(scgt::decode::<f64>(&long).unwrap_err().to_string().contains("trailing"));

    assert!(scgt::decode::<f32>(&bytes).is_err());
}

#[test]
fn ppm_and_pgm_round_trip_exactly() {
    let rgb = Image::rgb(5, 3, (0..45).map(|i| (i * 5) as u8).collect());
    assert_eq!(Image::decode(&rgb.encode()).unwrap(), rgb);
    assert!(rgb.encode().starts_with(b"P6\n5 3\n255\n"));
    let gray = Image::gray(4, 2, vec![0, 1, 2, 3, 3, 2, 1, 0]);
    assert_eq!(Image::decode(&gray.encode()).unwrap(), gray);
}

#[test]
fn ppm_header_variants() {
    let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
    bytes.extend([1, 2, 3, 4, 5, 6]);
    let img = Image::decode(&bytes).unwrap();
    assert_eq!((img.width, img.height, img.channels), (2, 1, 3));

    let mut p7 = bytes.clone();
    p7[1] = b'7';
    let err = Image::decode(&p7).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

    let err = Image::decode(&bytes[..bytes.len() - 2]).unwrap_err();
    assert!(err.to_string().contains("at byte"), "{err}");
}

#[test]
fn generated_pair_survives_quantization() {
    let spec = scgen_core::synthdata::SceneSpec::families4(3);
    let pair = scgen_core::synthdata::generate_scene(&spec, 0);
    let img = Image::rgb(32, 32, pair.rgb.clone());
    let back = Image::decode(&img.encode()).unwrap();
    let t = scgen_core::synthdata::rgb_to_tensor::<f64>(&back.data, 32, 32);
    assert_eq!(scgen_core::synthdata::tensor_to_rgb(&t, 0), pair.rgb);
    let seg = scgen::dataset::layout_image(&pair.layout);
    assert_eq!(Image::decode(&seg.encode()).unwrap().data, pair.layout.labels);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let ck = Checkpoint {
        step: 42,
        config: "{\"a\":1}".into(),
        tensors: vec![
            ("g/w".into(), random(Shape::new(2, 2, 3, 3), 3).cast()),
            ("g/w#u".into(), random(Shape::vector(2), 4).cast()),
        ],
    };
    let bytes = ck.encode();
    assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    let mut bad = bytes.clone();
    bad[1] = 0;
    assert!(Checkpoint::decode(&bad).is_err());
    let err = Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn feature_extractor_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("phi.scgt");
    let phi = scgen_core::adversary::FeatureExtractor::<f32>::seeded(3);
    scgen::checkpoint::save_feature_extractor(&path, &phi).unwrap();
    let back = scgen::checkpoint::load_feature_extractor(&path).unwrap();
    assert_eq!(back.stages(), phi.stages());
}

#[test]
fn heatmap_mapping() {
    use scgen::report::heat;
    assert_eq!(heat(Some(1.0)), 255);
    assert_eq!(heat(Some(-1.0)), 0);
    assert_eq!(heat(Some(0.0)), 128);
    assert_eq!(heat(Some(0.5)), 191);
    assert_eq!(heat(None), 0);
}

proptest::proptest! {
    #[test]
    fn scgt_round_trip_any_shape(b in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let t = random(Shape::new(b, c, h, w), seed);
        proptest::prop_assert_eq!(scgt::decode::<f64>(&scgt::encode(&t)).unwrap(), t);
    }

    #[test]
    fn pnm_round_trip_any_bytes(w in 1usize..6, h in 1usize..6, rgb in proptest::bool::ANY, data in proptest::collection::vec(proptest::num::u8::ANY, 75)) {
        let img = if rgb {
            Image::rgb(w, h, data[..w * h * 3].to_vec())
        } else {
            Image::gray(w, h, data[..w * h].to_vec())
        };
        proptest::prop_assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    }
}
