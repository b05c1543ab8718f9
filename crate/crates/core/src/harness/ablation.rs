use std::fmt::Write as _;
use std::str::FromStr;

use super::config::{RunConfig, Variant};
use super::eval::evaluate;
use super::train::train;
use crate::error::{FcpError, Result};

/// One variant family compared in an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Matching architecture: `a` prototype-pixel, `e` conventional guide, `f` full.
    Arch(Variant),
    /// Loss subset: `a` prompt only, `b` + guide, `c` + ortho, `d` all three.
    Loss(char),
    /// Number of attention steps.
    Steps(usize),
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Ablation::Arch(Variant::PrototypePixel) => "a".into(),
            Ablation::Arch(Variant::ConventionalGuide) => "e".into(),
            Ablation::Arch(Variant::Full) => "f".into(),
            Ablation::Loss(c) => format!("loss-{c}"),
            Ablation::Steps(t) => format!("T{t}"),
        }
    }

    /// `base` with this variant's overrides applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match *self {
            Ablation::Arch(v) => cfg.variant = v,
            Ablation::Loss(c) => {
                let d = RunConfig::default();
                let (guide, ortho) = match c {
                    'a' => (false, false),
                    'b' => (true, false),
                    'c' => (false, true),
                    _ => (true, true),
                };
                cfg.lambda_guide = if guide { d.lambda_guide } else { 0.0 };
                cfg.lambda_ortho = if ortho { d.lambda_ortho } else { 0.0 };
            }
            Ablation::Steps(t) => cfg.steps = t,
        }
        cfg
    }
}

impl FromStr for Ablation {
    type Err = FcpError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FcpError::Config(format!("unknown ablation variant '{s}'"));
        match s {
            "a" => Ok(Ablation::Arch(Variant::PrototypePixel)),
            "e" => Ok(Ablation::Arch(Variant::ConventionalGuide)),
            "f" => Ok(Ablation::Arch(Variant::Full)),
            "loss-a" | "loss-b" | "loss-c" | "loss-d" => Ok(Ablation::Loss(s.chars().last().expect("nonempty"))),
            _ => {
                let t: usize = s.strip_prefix('T').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
                if t < 2 {
                    return Err(bad());
                }
                Ok(Ablation::Steps(t))
            }
        }
    }
}

/// Comma-separated list; `arch`, `loss` and `steps` expand to their full families.
pub fn parse_variants(list: &str) -> Result<Vec<Ablation>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "arch" => out.extend(
                ["a", "e", "f"]
                    .map(|s| s.parse::<Ablation>())
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?,
            ),
            "loss" => out.extend((b'a'..=b'd').map(|c| Ablation::Loss(c as char))),
            "steps" => out.extend([2, 3, 4, 6].map(Ablation::Steps)),
            _ => out.push(item.parse()?),
        }
    }
    if out.is_empty() {
        return Err(FcpError::Config("no ablation variants given".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
    pub conventional_miou: Option<f64>,
    pub attention_miou: Option<f64>,
    pub final_loss: f64,
}

pub const CSV_HEADER: &str = "variant,seed,miou,conventional_miou,attention_miou,final_loss";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{},{:.6},{},{},{:.6}",
            self.variant,
            self.seed,
            self.miou,
            opt(self.conventional_miou),
            opt(self.attention_miou),
            self.final_loss
        )
    }
}

/// Train and evaluate every variant under every seed. Evaluation episodes
/// are shared across all runs. `on_row` sees each row as it completes.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Ablation],
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(FcpError::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            cfg.validate()?;
            let trained = train(&cfg, None)?;
            let tail = trained.log.len().min(100);
            let final_loss = if tail == 0 {
                f64::NAN
            } else {
                trained.mean_loss(trained.log.len() - tail..trained.log.len())
            };
            let rep = evaluate(&trained.model, cfg.eval_episodes, cfg.shots)?;
            let row = AblationRow {
                variant: v.label(),
                seed,
                miou: rep.miou,
                conventional_miou: rep.conventional_miou,
                attention_miou: rep.attention_miou,
                final_loss,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean mIoU per variant label, in first-seen order.
pub fn mean_by_variant(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _, _)| *v == r.variant) {
            Some(e) => {
                e.1 += r.miou;
                e.2 += 1;
            }
            None => out.push((r.variant.clone(), r.miou, 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_lists() {
        let v = parse_variants("arch, loss,T4").unwrap();
        assert_eq!(v.len(), 3 + 4 + 1);
        assert_eq!(v[7], Ablation::Steps(4));
        assert!(parse_variants("T1").is_err());
        assert!(parse_variants("zz").is_err());
        assert!(parse_variants("").is_err());
    }

    #[test]
    fn loss_rows_set_weights() {
        let base = RunConfig::default();
        let a = Ablation::Loss('a').apply(&base);
        assert_eq!((a.lambda_guide, a.lambda_ortho), (0.0, 0.0));
        let c = Ablation::Loss('c').apply(&base);
        assert_eq!((c.lambda_guide, c.lambda_ortho), (0.0, 0.05));
        let d = Ablation::Loss('d').apply(&base);
        assert_eq!((d.lambda_guide, d.lambda_ortho), (0.5, 0.05));
    }
}
