mod common;

use bcmf::checkpoint;
use bcmf::datagen::{
    boundary_mask, decode_pgm, decode_ppm, encode_pgm, encode_ppm, generate, load_sample, save_sample, write_dataset,
    Manifest, SceneSpec,
};
use bcmf::error::Error;
use bcmf::ops::BnMode;
use bcmf::train::evaluate;
use bcmf::{LmfmConfig, NetConfig, Network, Tensor};
use proptest::prelude::*;

fn small_spec() -> SceneSpec {
    SceneSpec { height: 32, width: 48, ..SceneSpec::default() }
}

proptest! {
    #[test]
    fn pgm_round_trip_is_exact(g in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![0u32..6, Just(255u32)], h * w).prop_map(move |v| (h, w, v))
    })) {
        let (h, w, v) = g;
        let lm = bcmf::LabelMap::new(h, w, 6, 255, v).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&lm).unwrap(), 6).unwrap(), lm);
    }

    #[test]
    fn ppm_round_trip_within_half_a_step(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut g = common::Gen::new(seed);
        let img = Tensor::new([3, h, w], (0..3 * h * w).map(|_| g.unit()).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15, "{} vs {}", a, b);
        }
    }
}

#[test]
fn malformed_netpbm_is_rejected() {
    assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0\n"), Err(Error::MalformedHeader(_))));
    assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::UnsupportedMaxval(65535))));
    assert!(matches!(
        decode_ppm(b"P6\n2 1\n255\n\0\0\0"),
        Err(Error::Truncated { expected: 6, found: 3 })
    ));
    assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0", 4), Err(Error::Truncated { .. })));
    assert!(matches!(decode_pgm(b"P5\nx 2\n255\n\0\0", 4), Err(Error::MalformedHeader(_))));
    assert!(matches!(decode_pgm(b"P5\n1 1\n255\n\x07", 4), Err(Error::LabelOutOfRange { label: 7, .. })));
    // comments are allowed in the header
    assert_eq!(decode_pgm(b"P5 # x\n1 1\n255\n\x01", 4).unwrap().labels(), [1]);
}

#[test]
fn dataset_files_reproduce_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let manifest = write_dataset(dir.path(), &spec, 3, 6).unwrap();
    let m = Manifest::read(&manifest).unwrap();
    assert_eq!(m.digest, spec.digest());
    assert_eq!(m.num_classes, 4);
    let loaded = m.load_all().unwrap();
    let made = generate(&spec, 3, 6).unwrap();
    for (a, b) in loaded.iter().zip(&made) {
        assert_eq!(a.label, b.label);
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 1.0 / 510.0 + 1e-15));
    }
    let bytes = std::fs::read(dir.path().join("images/00003.ppm")).unwrap();
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &spec, 3, 6).unwrap();
    assert_eq!(bytes, std::fs::read(again.path().join("images/00003.ppm")).unwrap());
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(again.path().join("manifest.txt")).unwrap()
    );
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert!(matches!(Manifest::read(&empty), Err(Error::EmptyManifest(_))));
    let header_only = dir.path().join("h.txt");
    std::fs::write(&header_only, "# bcmf-manifest digest=ab classes=4\n").unwrap();
    assert!(matches!(Manifest::read(&header_only), Err(Error::EmptyManifest(_))));
    let missing = dir.path().join("m.txt");
    std::fs::write(&missing, "# bcmf-manifest digest=ab classes=4\nimages/a.ppm labels/a.pgm\n").unwrap();
    assert!(matches!(Manifest::read(&missing).unwrap().load_all(), Err(Error::Io { .. })));
    assert!(matches!(write_dataset(dir.path(), &small_spec(), 0, 0), Err(Error::EmptyManifest(_))));
}

#[test]
fn sample_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_spec().sample(9).unwrap();
    let (a, b) = (dir.path().join("x.ppm"), dir.path().join("x.pgm"));
    save_sample(&a, &b, &s).unwrap();
    let back = load_sample(&a, &b, 4).unwrap();
    assert_eq!(back.label, s.label);
}

#[test]
fn generated_scenes_cover_every_class() {
    let spec = SceneSpec { shapes_min: 4, shapes_max: 6, ..small_spec() };
    let samples = generate(&spec, 0, 100).unwrap();
    let mut seen = [0usize; 4];
    for s in &samples {
        assert!(s.label.labels().contains(&0));
        assert!(boundary_mask(&s.label).iter().any(|&b| b));
        for &v in s.label.labels() {
            seen[v as usize] += 1;
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}

fn tiny_net() -> NetConfig {
    let mut cfg = NetConfig::new(4);
    cfg.stem_channels = 4;
    cfg.high_channels = 4;
    cfg.low_channels = 8;
    cfg.head_channels = 4;
    cfg.lmfm = LmfmConfig::new(8, 4);
    cfg
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { height: 64, width: 64, ..SceneSpec::default() };
    let data = generate(&spec, 0, 3).unwrap();
    let mut net = Network::build(tiny_net(), 4).unwrap();
    let batch = bcmf::train::stack(&data.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    net.calibrate_bn(&batch).unwrap();
    let before = evaluate(&net, &data, 2).unwrap().render().unwrap();
    let path = dir.path().join("c.bin");
    checkpoint::save(&path, &net).unwrap();
    let back = checkpoint::load(&path, &tiny_net()).unwrap();
    assert_eq!(back, net);
    assert_eq!(evaluate(&back, &data, 2).unwrap().render().unwrap(), before);
    assert_eq!(
        back.logits(&batch, BnMode::Eval).unwrap().data(),
        net.logits(&batch, BnMode::Eval).unwrap().data()
    );

    let mut other = tiny_net();
    other.blocks_per_stage = 2;
    assert!(matches!(checkpoint::load(&path, &other), Err(Error::DigestMismatch { .. })));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(checkpoint::load(&path, &tiny_net()).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(checkpoint::load(&path, &tiny_net()), Err(Error::Checkpoint(_))));
}
