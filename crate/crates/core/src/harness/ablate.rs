//! Ablation sweeps over the selection sizes and FPN width, plus the
//! improvement ladder (no augmentation, augmentation, LION, wider FPN).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::train::{evaluate, train};
use crate::backbone::NUM_BLOCKS;
use crate::curation::AugmentedSet;
use crate::error::{Error, Result};
use crate::optim::{LionConfig, OptimizerConfig, SgdConfig};

/// Published selection sweep: sizes, test1 and test2 accuracy (%).
pub const NSEL_REFERENCE: [([usize; NUM_BLOCKS], f64, f64); 7] = [
    ([256, 128, 64, 32], 81.70, 81.25),
    ([512, 256, 128, 64], 83.12, 82.50),
    ([1024, 512, 128, 64], 83.80, 81.25),
    ([1024, 512, 128, 128], 84.81, 81.25),
    ([2048, 512, 128, 128], 82.10, 78.75),
    ([2048, 512, 128, 32], 85.44, 83.75),
    ([2048, 512, 128, 64], 84.60, 82.50),
];

/// Published FPN sweep.
pub const FPN_REFERENCE: [(usize, f64, f64); 5] = [
    (512, 82.91, 78.75),
    (1024, 85.70, 81.25),
    (1536, 85.44, 83.75),
    (2048, 85.23, 81.25),
    (3000, 81.01, 80.00),
];

/// Published improvement ladder.
pub const LADDER_REFERENCE: [(&str, f64, f64); 4] = [
    ("PIM without augmentation", 40.93, 43.75),
    ("PIM with augmentation", 84.38, 82.50),
    ("PIM + LION", 85.44, 83.75),
    ("PIM + LION + 1024 FPN", 85.70, 81.25),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    NSel,
    FpnSize,
    Ladder,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_sel" | "nsel" => Ok(Self::NSel),
            "fpn_size" | "fpn" => Ok(Self::FpnSize),
            "ladder" => Ok(Self::Ladder),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NSel => "n_sel",
            Self::FpnSize => "fpn_size",
            Self::Ladder => "ladder",
        })
    }
}

/// One configuration to train and score.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
    /// Training set the variant expects (ladder rows differ here).
    pub set: AugmentedSet,
    /// Published test1/test2 accuracy (%) for the same setting, if any.
    pub reference: Option<(f64, f64)>,
}

fn nsel_label(n: &[usize; NUM_BLOCKS]) -> String {
    format!("({})", n.map(|v| v.to_string()).join(","))
}

/// Parses `"2048,512,128,32"`.
pub fn parse_nsel(s: &str) -> Result<[usize; NUM_BLOCKS]> {
    let parts: Vec<usize> = s
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad selection sizes {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("selection sizes need {NUM_BLOCKS} values, got {s:?}")))
}

pub fn nsel_variants(base: &RunConfig, values: &[[usize; NUM_BLOCKS]]) -> Vec<Variant> {
    values
        .iter()
        .map(|n| Variant {
            label: nsel_label(n),
            config: RunConfig {
                n_sel: *n,
                ..base.clone()
            },
            set: AugmentedSet::A2,
            reference: NSEL_REFERENCE.iter().find(|(v, _, _)| v == n).map(|(_, a, b)| (*a, *b)),
        })
        .collect()
}

pub fn fpn_variants(base: &RunConfig, values: &[usize]) -> Vec<Variant> {
    values
        .iter()
        .map(|&f| Variant {
            label: f.to_string(),
            config: RunConfig {
                fpn_size: f,
                ..base.clone()
            },
            set: AugmentedSet::A2,
            reference: FPN_REFERENCE.iter().find(|(v, _, _)| *v == f).map(|(_, a, b)| (*a, *b)),
        })
        .collect()
}

/// Optimizer and width settings for the ladder rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderSettings {
    pub sgd: SgdConfig,
    pub lion: LionConfig,
    pub wide_fpn: usize,
}

impl Default for LadderSettings {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            lion: LionConfig::default(),
            wide_fpn: 1024,
        }
    }
}

pub fn ladder_variants(base: &RunConfig, s: &LadderSettings) -> Vec<Variant> {
    let with = |opt: OptimizerConfig, fpn: usize| RunConfig {
        optimizer: opt,
        fpn_size: fpn,
        ..base.clone()
    };
    let sgd = OptimizerConfig::Sgd(s.sgd);
    let lion = OptimizerConfig::Lion(s.lion);
    let rows = [
        (AugmentedSet::Original, with(sgd, base.fpn_size)),
        (AugmentedSet::A2, with(sgd, base.fpn_size)),
        (AugmentedSet::A2, with(lion, base.fpn_size)),
        (AugmentedSet::A2, with(lion, s.wide_fpn)),
    ];
    rows.into_iter()
        .zip(LADDER_REFERENCE)
        .map(|((set, config), (label, a, b))| Variant {
            label: label.into(),
            config,
            set,
            reference: Some((a, b)),
        })
        .collect()
}

/// Data for one variant. Missing test splits leave their column empty.
pub struct VariantData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test1: Option<Dataset>,
    pub test2: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub test1: Option<f64>,
    pub test2: Option<f64>,
    pub reference: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a))
}

impl AblationTable {
    /// Tab-separated text table. Reference columns hold the published values.
    pub fn render(&self) -> String {
        let mut s = format!("# ablation over {} (seed {})\n", self.axis, self.seed);
        s += "variant\ttest1\ttest2\treference test1\treference test2\n";
        for r in &self.rows {
            let (ra, rb) = r.reference.map_or(("-".to_string(), "-".to_string()), |(a, b)| {
                (format!("{a:.2}%"), format!("{b:.2}%"))
            });
            s += &format!("{}\t{}\t{}\t{ra}\t{rb}", r.variant, pct(r.test1), pct(r.test2));
            if let Some(e) = &r.error {
                s += &format!("\tfailed: {e}");
            }
            s.push('\n');
        }
        s
    }
}

fn run_one(v: &Variant, d: &VariantData) -> Result<(Option<f64>, Option<f64>)> {
    let out = train(&v.config, &d.train, d.val.as_ref())?;
    let score = |t: &Option<Dataset>| -> Result<Option<f64>> {
        t.as_ref()
            .map(|t| evaluate(&out.best_params, &out.model, t, v.config.batch_size).map(|(r, _)| r.accuracy))
            .transpose()
    };
    Ok((score(&d.test1)?, score(&d.test2)?))
}

/// Trains and scores every variant (best-validation parameters). A failing
/// variant is recorded in its row and the sweep continues.
pub fn run_variants(
    axis: AblationAxis,
    seed: u64,
    variants: &[Variant],
    mut data: impl FnMut(&Variant) -> Result<VariantData>,
) -> AblationTable {
    let rows = variants
        .iter()
        .map(|v| {
            let result = data(v).and_then(|d| run_one(v, &d));
            let (test1, test2, error) = match result {
                Ok((a, b)) => (a, b, None),
                Err(e) => {
                    log::warn!("variant {} failed: {e}", v.label);
                    (None, None, Some(e.to_string()))
                }
            };
            AblationRow {
                variant: v.label.clone(),
                test1,
                test2,
                reference: v.reference,
                error,
            }
        })
        .collect();
    AblationTable { axis, seed, rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_builders() {
        let base = RunConfig::toy();
        let v = nsel_variants(&base, &NSEL_REFERENCE.map(|r| r.0));
        assert_eq!(v.len(), 7);
        assert_eq!(v[5].label, "(2048,512,128,32)");
        assert_eq!(v[5].reference, Some((85.44, 83.75)));
        let f = fpn_variants(&base, &FPN_REFERENCE.map(|r| r.0));
        assert_eq!(
            f.iter().map(|v| v.config.fpn_size).collect::<Vec<_>>(),
            [512, 1024, 1536, 2048, 3000]
        );
        assert_eq!(fpn_variants(&base, &[7])[0].reference, None);
        let l = ladder_variants(&base, &LadderSettings::default());
        assert_eq!(l[0].set, AugmentedSet::Original);
        assert!(matches!(l[2].config.optimizer, OptimizerConfig::Lion(_)));
        assert_eq!(l[3].config.fpn_size, 1024);
        assert_eq!(parse_nsel("(1,2,3,4)").unwrap(), [1, 2, 3, 4]);
        assert!(parse_nsel("1,2").is_err());
    }

    #[test]
    fn failures_do_not_abort_and_render() {
        let base = RunConfig::toy();
        let vars = ladder_variants(&base, &LadderSettings::default());
        let t = run_variants(AblationAxis::Ladder, 0, &vars, |_| Err(Error::Data("no data".into())));
        assert_eq!(t.rows.len(), 4);
        let text = t.render();
        for (label, _, _) in LADDER_REFERENCE {
            assert!(text.contains(label));
        }
        assert!(text.contains("40.93%") && text.contains("failed: data error: no data"));
    }
}
