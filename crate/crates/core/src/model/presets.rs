//! The five reference architectures plus a small gradient-check network.
//!
//! Layers are transcribed in weight-capsule form `kh x kw x in x out x (g x n x p)`
//! and the input capsule of every layer is derived from the previous output:
//! a `(g, m', p')` output holding `g*m'*p'` scalars is reread as `(g, m, n)`
//! with `m = g*m'*p' / (g*n)`.
//!
//! `p2`: only the first layer and the second layer's capsule `(1,4,8)` are
//! quoted directly. The remaining layers are the unique alternating chain
//! `(1x4x8)`, `(1x8x4)`, `(1x4x8)`, `10 x (1x8x4)` that keeps every layer at
//! one channel, ends on 10 class channels, and lands on a total of exactly
//! 3,888 weights (144 + 288 + 288 + 288 + 2880).

use crate::error::{Error, Result};
use crate::loss::MarginLossConfig;
use crate::model::config::{LayerConfig, ModelConfig};
use crate::tensor::{CapsuleShape, FeatureMapShape};

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 6] = ["p0", "p1", "p2", "p3", "p4", "toy"];

/// Weight-capsule form of one layer: `(in, out, (g, n, p), stride)`, 3x3 kernel.
type Spec = (usize, usize, (usize, usize, usize), usize);

fn build(
    name: &str,
    input: (usize, usize, CapsuleShape),
    kernel: usize,
    specs: &[Spec],
    loss: MarginLossConfig,
) -> Result<ModelConfig> {
    let (height, width, capsule) = input;
    let mut elems = capsule.len();
    let mut layers = Vec::with_capacity(specs.len());
    for &(in_channels, out_channels, (g, n, p), stride) in specs {
        if elems % (g * n) != 0 {
            return Err(Error::config(format!(
                "{name}: {elems}-element capsule cannot be read as (g={g}, n={n})"
            )));
        }
        let m = elems / (g * n);
        layers.push(LayerConfig {
            kh: kernel,
            kw: kernel,
            in_channels,
            out_channels,
            capsule_in: CapsuleShape::new(g, m, n)?,
            p,
            stride,
        });
        elems = g * m * p;
    }
    let config = ModelConfig {
        name: name.to_string(),
        input_shape: FeatureMapShape::new(1, 1, height, width, capsule)?,
        layers,
        loss,
        init_seed: 0,
    };
    config.validate()?;
    Ok(config)
}

/// Looks up a built-in architecture. `pN-as-listed` is an alias of `pN`.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let key = name.strip_suffix("-as-listed").unwrap_or(name);
    let gray = (28, 28, CapsuleShape::SCALAR);
    let mnist = MarginLossConfig::MNIST;
    match key {
        "p0" => build(
            "p0",
            gray,
            3,
            &[
                (1, 1, (1, 1, 32), 2),
                (1, 2, (1, 8, 8), 1),
                (2, 4, (1, 8, 8), 2),
                (4, 2, (1, 8, 8), 1),
                (2, 10, (1, 8, 8), 1),
            ],
            mnist,
        ),
        "p1" => build(
            "p1",
            gray,
            3,
            &[
                (1, 1, (1, 1, 16), 2),
                (1, 1, (1, 4, 6), 1),
                (1, 1, (1, 6, 4), 2),
                (1, 1, (1, 4, 6), 1),
                (1, 10, (1, 6, 4), 1),
            ],
            mnist,
        ),
        "p2" => build(
            "p2",
            gray,
            3,
            &[
                (1, 1, (1, 1, 16), 2),
                (1, 1, (1, 4, 8), 1),
                (1, 1, (1, 8, 4), 2),
                (1, 1, (1, 4, 8), 1),
                (1, 10, (1, 8, 4), 1),
            ],
            mnist,
        ),
        "p3" => build(
            "p3",
            gray,
            3,
            &[
                (1, 1, (1, 1, 32), 2),
                (1, 4, (1, 8, 16), 1),
                (4, 8, (1, 16, 8), 2),
                (8, 4, (1, 8, 16), 1),
                (4, 10, (1, 16, 16), 1),
            ],
            mnist,
        ),
        "p4" => build(
            "p4",
            (24, 24, CapsuleShape::new(1, 1, 3)?),
            3,
            &[
                (1, 1, (1, 3, 32), 2),
                (1, 4, (1, 8, 16), 1),
                (4, 8, (1, 16, 8), 1),
                (8, 10, (1, 8, 16), 2),
                (10, 10, (1, 16, 16), 1),
            ],
            MarginLossConfig::CIFAR,
        ),
        "toy" => build(
            "toy",
            (7, 7, CapsuleShape::SCALAR),
            3,
            &[(1, 2, (1, 1, 4), 2), (2, 3, (1, 2, 3), 1)],
            mnist,
        ),
        _ => Err(Error::config(format!(
            "unknown preset {name:?}; expected one of {PRESET_NAMES:?}"
        ))),
    }
}

/// Rounded parameter counts quoted alongside each architecture label.
pub const REFERENCE_COUNTS: [(&str, &str, f64); 5] = [
    ("p0", "171K", 171e3),
    ("p1", "2.9K", 2.9e3),
    ("p2", "3.8K", 3.8e3),
    ("p3", "22.2K", 22.2e3),
    ("p4", "365K", 365e3),
];

/// One row of the parameter audit.
#[derive(Debug, Clone, PartialEq)]
pub struct CountAudit {
    pub preset: &'static str,
    pub computed: usize,
    pub reference: &'static str,
    /// Whether `computed` rounds to the quoted figure (within 5%).
    pub consistent: bool,
}

/// Compares computed totals with the quoted figures.
pub fn audit_reference_counts() -> Vec<CountAudit> {
    REFERENCE_COUNTS
        .iter()
        .map(|&(name, label, value)| {
            let computed = preset(name).expect("built-in preset").count_parameters();
            CountAudit {
                preset: name,
                computed,
                reference: label,
                consistent: (computed as f64 - value).abs() <= 0.05 * value,
            }
        })
        .collect()
}

/// Human-readable notes for audit rows that disagree, including label swaps
/// (preset A computes to the figure quoted for preset B and vice versa).
pub fn audit_notes(rows: &[CountAudit]) -> Vec<String> {
    let close = |computed: usize, value: f64| (computed as f64 - value).abs() <= 0.05 * value;
    let mut notes = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        if a.consistent {
            continue;
        }
        let swapped = rows.iter().enumerate().find(|&(j, b)| {
            let bv = REFERENCE_COUNTS[j].2;
            let av = REFERENCE_COUNTS[i].2;
            j != i && close(a.computed, bv) && close(b.computed, av)
        });
        match swapped {
            Some((_, b)) if i < rows.iter().position(|r| r.preset == b.preset).unwrap() => {
                notes.push(format!(
                    "{} computes to {} (reference {}) while {} computes to {} (reference {}): \
                     the two layer lists appear to carry each other's labels; presets keep the \
                     lists as labeled",
                    a.preset, a.computed, a.reference, b.preset, b.computed, b.reference
                ))
            }
            Some(_) => {}
            None => notes.push(format!(
                "{} computes to {} but its reference count is {}",
                a.preset, a.computed, a.reference
            )),
        }
    }
    notes
}
