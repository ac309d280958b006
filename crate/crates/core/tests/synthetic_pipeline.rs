//! Write IDX files, load them back and train on them.

use pcaps_core::data::{load_mnist, read_idx_images, write_idx_images, write_idx_labels, Split};
use pcaps_core::model::{msra_init, preset, Network};
use pcaps_core::train::{evaluate, train, Augment, RunOptions, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class `c` lights a 6x6 block at one of ten fixed spots, plus noise.
fn synthetic(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..10u8);
        labels.push(c);
        let (r0, c0) = (4 + (c as usize / 5) * 12, 2 + (c as usize % 5) * 5);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        for (j, p) in img.iter_mut().enumerate() {
            let (r, col) = (j / 28, j % 28);
            let on = (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&col);
            *p = if on { 200 + rng.random_range(0..56) } else { rng.random_range(0..40) };
        }
    }
    (pixels, labels)
}

fn write_split(dir: &std::path::Path, stem: &str, n: usize, seed: u64) -> Vec<u8> {
    let (pixels, labels) = synthetic(n, seed);
    write_idx_images(&dir.join(format!("{stem}-images-idx3-ubyte")), 28, 28, &pixels).unwrap();
    write_idx_labels(&dir.join(format!("{stem}-labels-idx1-ubyte")), &labels).unwrap();
    pixels
}

#[test]
fn idx_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pixels = write_split(dir.path(), "t10k", 37, 9);
    let (n, rows, cols, back) = read_idx_images(&dir.path().join("t10k-images-idx3-ubyte")).unwrap();
    assert_eq!((n, rows, cols), (37, 28, 28));
    assert_eq!(back, pixels);
    let ds = load_mnist(dir.path(), Split::Test).unwrap();
    assert_eq!(ds.len(), 37);
    assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn p1_learns_synthetic_digits() {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train", 600, 1);
    write_split(dir.path(), "t10k", 200, 2);
    let train_set = load_mnist(dir.path(), Split::Train).unwrap();
    let test_set = load_mnist(dir.path(), Split::Test).unwrap();

    let config = preset("p1").unwrap();
    let net = Network::new(config.clone(), msra_init::<f32>(&config, 4)).unwrap();
    let before = evaluate(&net, &test_set, None).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        max_iterations: 300,
        eval_every: 0,
        eval_train_samples: 200,
        augment: Augment::Shift { max_shift: 2 },
        checkpoint_every: None,
        seed: 4,
        ..TrainConfig::mnist()
    };
    let out = train(net, &train_set, &test_set, &cfg, RunOptions::default()).unwrap();
    let after = evaluate(&out.network, &test_set, None).unwrap();
    assert!(after.loss < before.loss, "{before:?} -> {after:?}");
    assert!(after.accuracy > 0.9, "{after:?}");
}
