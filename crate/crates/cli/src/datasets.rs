//! Locating, loading and preprocessing datasets for a model.

use std::path::{Path, PathBuf};

use pcaps_core::data::{
    cifar_batch_files, fit_zca_on_sample, gcn, load_cifar10, load_mnist, mnist_paths, Dataset,
    GcnConfig, Split, ZcaTransform,
};
use pcaps_core::model::ModelConfig;
use pcaps_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{DataArgs, DatasetKind};

pub const DATA_DIR_ENV: &str = "PCAPS_DATA_DIR";
pub const ZCA_FILE: &str = "zca.bin";
/// Training images drawn for the whitening fit.
pub const ZCA_SAMPLES: usize = 10_000;

/// Three-valued inputs (one capsule of three pixel channels) are CIFAR-10.
pub fn infer_kind(config: &ModelConfig) -> DatasetKind {
    let s = config.input_shape;
    if s.channels * s.capsule.len() == 3 {
        DatasetKind::Cifar10
    } else {
        DatasetKind::Mnist
    }
}

fn dir_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Mnist => "mnist",
        DatasetKind::Cifar10 => "cifar10",
    }
}

pub fn resolve_dir(explicit: Option<&Path>, kind: DatasetKind) -> PathBuf {
    if let Some(d) = explicit {
        return d.to_path_buf();
    }
    let root = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    root.join(dir_name(kind))
}

pub fn files(kind: DatasetKind, dir: &Path, split: Split) -> Vec<PathBuf> {
    match kind {
        DatasetKind::Mnist => {
            let (i, l) = mnist_paths(dir, split);
            vec![i, l]
        }
        DatasetKind::Cifar10 => cifar_batch_files(dir, split),
    }
}

pub struct Loaded {
    pub kind: DatasetKind,
    pub train: Option<Dataset>,
    pub test: Option<Dataset>,
    pub zca: Option<ZcaTransform>,
    /// Files read, for the manifest.
    pub files: Vec<PathBuf>,
}

/// Loads the requested splits. CIFAR-10 images get per-image GCN and then
/// the whitening transform from `zca_path` when it exists, or a fresh fit
/// on the training split (seeded by `seed`) otherwise.
pub fn load(
    args: &DataArgs,
    config: &ModelConfig,
    want_train: bool,
    want_test: bool,
    seed: u64,
    zca_path: Option<&Path>,
) -> Result<Loaded> {
    let kind = args.dataset.unwrap_or_else(|| infer_kind(config));
    let dir = resolve_dir(args.data_dir.as_deref(), kind);
    let mut out = Loaded {
        kind,
        train: None,
        test: None,
        zca: None,
        files: Vec::new(),
    };
    match kind {
        DatasetKind::Mnist => {
            if want_train {
                out.train = Some(load_mnist(&dir, Split::Train)?);
                out.files.extend(files(kind, &dir, Split::Train));
            }
            if want_test {
                out.test = Some(load_mnist(&dir, Split::Test)?);
                out.files.extend(files(kind, &dir, Split::Test));
            }
        }
        DatasetKind::Cifar10 => {
            let cfg = GcnConfig::default();
            let normalize = |ds: Dataset| {
                let dims = (ds.height, ds.width, ds.channels);
                ds.map_images(dims, |im| gcn(im, &cfg))
            };
            let zca = match zca_path.filter(|p| p.exists()) {
                Some(p) => {
                    out.files.push(p.to_path_buf());
                    Some(ZcaTransform::load(p)?)
                }
                None => None,
            };
            let need_train = want_train || zca.is_none();
            let train = if need_train {
                out.files.extend(files(kind, &dir, Split::Train));
                Some(normalize(load_cifar10(&dir, Split::Train)?)?)
            } else {
                None
            };
            let zca = match zca {
                Some(z) => z,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let train = train.as_ref().expect("loaded above");
                    fit_zca_on_sample(train, ZCA_SAMPLES, &mut rng)?
                }
            };
            if want_train {
                out.train = Some(zca.apply_dataset(train.as_ref().expect("loaded above"))?);
            }
            if want_test {
                out.files.extend(files(kind, &dir, Split::Test));
                out.test = Some(zca.apply_dataset(&normalize(load_cifar10(&dir, Split::Test)?)?)?);
            }
            out.zca = Some(zca);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcaps_core::model::preset;

    #[test]
    fn kinds() {
        assert_eq!(infer_kind(&preset("p2").unwrap()), DatasetKind::Mnist);
        assert_eq!(infer_kind(&preset("p4").unwrap()), DatasetKind::Cifar10);
    }

    #[test]
    fn explicit_dir_wins() {
        let d = resolve_dir(Some(Path::new("/x")), DatasetKind::Mnist);
        assert_eq!(d, PathBuf::from("/x"));
    }
}
