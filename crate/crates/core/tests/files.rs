use std::fs;
use std::process::Command;

use rand::Rng;

use cajscc::data::{self, ImageSet};
use cajscc::model::{Model, ModelConfig, SideInfo, Variant};
use cajscc::ofdm::sample_channel_freq;
use cajscc::rng::SeedStream;
use cajscc::Error;

fn side_info(n: usize, l_f: usize, seed: u64) -> Vec<SideInfo<f32>> {
    let mut rng = SeedStream::new(seed).rng("side", 0);
    (0..n)
        .map(|_| {
            let chan = sample_channel_freq::<f32, _>(l_f, &mut rng);
            SideInfo::new(&chan.freq_response, rng.gen_range(0.0..20.0))
        })
        .collect()
}

#[test]
fn checkpoint_file_reproduces_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cajs");
    let cfg = ModelConfig::toy();
    let model = Model::<f32>::new(cfg.clone(), &mut SeedStream::new(1).rng("init", 0)).unwrap();
    model.save(&path).unwrap();
    let back = Model::<f32>::load(&path, cfg.clone()).unwrap();

    let set = data::synthetic_set(4, cfg.image_shape(), &mut SeedStream::new(2).rng("data", 0));
    let images = set.batch::<f32>(&[0, 1, 2, 3]);
    let side = side_info(4, cfg.subcarriers, 3);
    let a = model.encode(&images, &side).unwrap();
    let b = back.encode(&images, &side).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.decode(&a, &side).unwrap(), back.decode(&b, &side).unwrap());

    // Saving the reloaded model gives the same bytes.
    let again = dir.path().join("again.cajs");
    back.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let other = cfg.with_variant(Variant::ChannelOnly);
    assert!(matches!(Model::<f32>::load(&path, other), Err(Error::Checkpoint(_))));

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    assert!(Model::<f32>::load(&path, ModelConfig::toy()).is_err());
}

fn cifar_file(records: usize, seed: u8) -> Vec<u8> {
    (0..records)
        .flat_map(|r| {
            let label = (r as u8 + seed) % 10;
            std::iter::once(label).chain((0..3072).map(move |i| ((i * 7 + r * 13 + seed as usize) % 256) as u8))
        })
        .collect()
}

#[test]
fn cifar_files_concatenate_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    fs::write(&a, cifar_file(3, 0)).unwrap();
    fs::write(&b, cifar_file(2, 5)).unwrap();
    let set = data::load_cifar10(&[&a, &b]).unwrap();
    assert_eq!(set.len(), 5);
    assert_eq!(set.shape(), [3, 32, 32]);
    assert_eq!(set.labels().unwrap(), &[0, 1, 2, 5, 6]);
    // Channel-planar layout: the first green pixel follows the 1024 red ones.
    assert_eq!(set.image(0)[1024], ((1024 * 7) % 256) as f32 / 255.0);

    let mut bad = cifar_file(2, 0);
    bad.truncate(3073 + 100);
    fs::write(&b, bad).unwrap();
    match data::load_cifar10(&[&a, &b]) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, 3073);
            assert!(message.contains("b.bin"), "{message}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn ppm_dump_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let set = data::synthetic_set(2, [3, 5, 4], &mut SeedStream::new(4).rng("data", 0));
    let path = dir.path().join("img.ppm");
    data::dump_ppm(&set, 1, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P6\n"));
    let (shape, pixels) = data::read_ppm(&bytes[..]).unwrap();
    assert_eq!(shape, [3, 5, 4]);
    for (p, q) in pixels.iter().zip(set.image(1)) {
        assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn cli_trains_from_raw_and_cropped_cifar_files() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("toy.imgr");
    let set = data::synthetic_set(40, [1, 8, 8], &mut SeedStream::new(5).rng("data", 0));
    data::write_raw(fs::File::create(&raw).unwrap(), &set).unwrap();
    let back = data::read_raw(&fs::read(&raw).unwrap()).unwrap();
    assert_eq!(back, set);

    let run = |args: &[String], out: &str| {
        Command::new(env!("CARGO_BIN_EXE_cajscc"))
            .arg("train")
            .args(args)
            .args(["--set", "train.epochs=1", "--out"])
            .arg(dir.path().join(out))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    let raw_args = ["--set".into(), "data.source=raw".into(), "--set".into(), format!("data.paths={}", raw.display())];
    let o = run(&raw_args, "raw");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let cifar = dir.path().join("c.bin");
    fs::write(&cifar, cifar_file(20, 1)).unwrap();
    let cifar_args: Vec<String> = [
        "data.source=cifar10".to_string(),
        format!("data.paths={}", cifar.display()),
        "data.crop=8".into(),
        "model.image=3x8x8".into(),
    ]
    .into_iter()
    .flat_map(|kv| ["--set".to_string(), kv])
    .collect();
    let o = run(&cifar_args, "cifar");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    // Images that do not match model.image are rejected before training.
    let o = run(&cifar_args[..6], "mismatch");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn image_set_rejects_out_of_range_pixels() {
    assert!(ImageSet::new([1, 2, 2], vec![0.0, 0.5, 1.5, 0.2], None).is_err());
    assert!(ImageSet::new([1, 2, 2], vec![0.0; 6], None).is_err());
}
