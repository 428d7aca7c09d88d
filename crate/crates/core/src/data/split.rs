//! Train/validation/test assignment of slice indices.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::RngStream;

const MAX_REDRAWS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SplitStrategy {
    /// Uniform draw over the whole stack, then sorted.
    RandomOrdered,
    /// Contiguous block from the first slice.
    InitialSeq,
    /// Uniform draw from the second half, then sorted.
    MidRand,
    /// Contiguous block from the middle slice.
    MidSeq,
}

impl SplitStrategy {
    pub const ALL: [SplitStrategy; 4] =
        [SplitStrategy::RandomOrdered, SplitStrategy::InitialSeq, SplitStrategy::MidRand, SplitStrategy::MidSeq];
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::RandomOrdered => "RandomOrdered",
            SplitStrategy::InitialSeq => "InitialSeq",
            SplitStrategy::MidRand => "MidRand",
            SplitStrategy::MidSeq => "MidSeq",
        })
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ','], "").as_str() {
            "randomordered" | "random" => Ok(SplitStrategy::RandomOrdered),
            "initialseq" => Ok(SplitStrategy::InitialSeq),
            "midrand" => Ok(SplitStrategy::MidRand),
            "midseq" => Ok(SplitStrategy::MidSeq),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split strategy `{s}` (expected RandomOrdered, InitialSeq, MidRand or MidSeq)"
            ))),
        }
    }
}

/// Which slices a split is drawn over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum SplitUniverse {
    #[default]
    All,
    /// Strategy positions refer to the annotated slices only; the rest go to test.
    AnnotatedOnly,
}

impl fmt::Display for SplitUniverse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitUniverse::All => "all",
            SplitUniverse::AnnotatedOnly => "annotated",
        })
    }
}

impl FromStr for SplitUniverse {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitUniverse::All),
            "annotated" | "annotated-only" => Ok(SplitUniverse::AnnotatedOnly),
            _ => Err(Error::InvalidArgument(format!("unknown split universe `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub min_annotated_frac: f64,
    pub universe: SplitUniverse,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_frac: 0.10, val_frac: 0.01, min_annotated_frac: 0.5, universe: SplitUniverse::All }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub strategy: SplitStrategy,
    pub seed: u64,
    pub n: usize,
    pub universe: SplitUniverse,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn floor_frac(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

fn ceil_frac(frac: f64, n: usize) -> usize {
    (frac * n as f64 - 1e-9).ceil().max(0.0) as usize
}

fn meets(positions: &[usize], annotated: &[bool], min_frac: f64) -> bool {
    let hits = positions.iter().filter(|&&p| annotated[p]).count();
    hits as f64 >= min_frac * positions.len() as f64 - 1e-9
}

/// Draws train positions `0..n` for `strategy`, honouring the annotation constraint.
fn draw_train(n: usize, k: usize, annotated: &[bool], strategy: SplitStrategy, min_frac: f64, stream: &RngStream) -> Result<Vec<usize>> {
    let half = n / 2;
    match strategy {
        SplitStrategy::InitialSeq | SplitStrategy::MidSeq => {
            let start = if strategy == SplitStrategy::InitialSeq { 0 } else { half };
            let last_start = n - k;
            let start = start.min(last_start);
            // Nearest window to the reference start that satisfies the constraint.
            let mut candidates: Vec<usize> = (0..=last_start).collect();
            candidates.sort_by_key(|&s| (s.abs_diff(start), s < start));
            for s in candidates {
                let window: Vec<usize> = (s..s + k).collect();
                if meets(&window, annotated, min_frac) {
                    return Ok(window);
                }
            }
            Err(Error::SplitInfeasible(format!(
                "no contiguous window of {k} slices is at least {:.0}% annotated",
                min_frac * 100.0
            )))
        }
        SplitStrategy::RandomOrdered | SplitStrategy::MidRand => {
            let pool: Vec<usize> = if strategy == SplitStrategy::MidRand { (half..n).collect() } else { (0..n).collect() };
            if pool.len() < k {
                return Err(Error::SplitInfeasible(format!("pool of {} slices cannot supply {k}", pool.len())));
            }
            for attempt in 0..MAX_REDRAWS {
                let mut rng = stream.split_index("train-draw", attempt).rng();
                let mut pick: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
                pick.sort_unstable();
                if meets(&pick, annotated, min_frac) {
                    return Ok(pick);
                }
            }
            // Exhausted: force the annotated quota, preferring the reference pool.
            let need = (min_frac * k as f64 - 1e-9).ceil() as usize;
            let mut rng = stream.split("forced-draw").rng();
            let mut ann: Vec<usize> = pool.iter().copied().filter(|&p| annotated[p]).collect();
            if ann.len() < need {
                ann = (0..n).filter(|&p| annotated[p]).collect();
            }
            if ann.len() < need {
                return Err(Error::SplitInfeasible(format!(
                    "{} annotated slices cannot fill {need} of {k} training positions",
                    ann.len()
                )));
            }
            let mut pick: Vec<usize> = ann.choose_multiple(&mut rng, need).copied().collect();
            let rest: Vec<usize> = pool.iter().copied().filter(|p| !pick.contains(p)).collect();
            pick.extend(rest.choose_multiple(&mut rng, k - need).copied());
            pick.sort_unstable();
            Ok(pick)
        }
    }
}

/// Splits `n` slices (annotation flags in `annotated`) into train, validation and test.
pub fn sample_split(annotated: &[bool], strategy: SplitStrategy, config: &SplitConfig, seed: u64) -> Result<SplitPlan> {
    let n = annotated.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("a split needs at least 10 slices, got {n}")));
    }
    for (name, v) in [("train_frac", config.train_frac), ("val_frac", config.val_frac), ("min_annotated_frac", config.min_annotated_frac)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let universe: Vec<usize> = match config.universe {
        SplitUniverse::All => (0..n).collect(),
        SplitUniverse::AnnotatedOnly => (0..n).filter(|&i| annotated[i]).collect(),
    };
    let m = universe.len();
    let k = floor_frac(config.train_frac, m);
    if k == 0 {
        return Err(Error::SplitInfeasible(format!("train fraction {} of {m} slices is empty", config.train_frac)));
    }
    let flags: Vec<bool> = universe.iter().map(|&i| annotated[i]).collect();
    let stream = RngStream::new(seed).split(&format!("split/{strategy}"));
    let train: Vec<usize> = draw_train(m, k, &flags, strategy, config.min_annotated_frac, &stream)?
        .into_iter()
        .map(|p| universe[p])
        .collect();

    let remaining: Vec<usize> = (0..n).filter(|i| !train.contains(i)).collect();
    let n_val = ceil_frac(config.val_frac, remaining.len()).min(remaining.len());
    let mut validation: Vec<usize> =
        remaining.choose_multiple(&mut stream.split("validation").rng(), n_val).copied().collect();
    validation.sort_unstable();
    let test = remaining.into_iter().filter(|i| !validation.contains(i)).collect();
    Ok(SplitPlan { strategy, seed, n, universe: config.universe, train, validation, test })
}

impl SplitPlan {
    /// Plain-text form for exact replay.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        format!(
            "# split plan v1\nstrategy {}\nseed {}\nn {}\nuniverse {}\ntrain {}\nvalidation {}\ntest {}\n",
            self.strategy,
            self.seed,
            self.n,
            self.universe,
            list(&self.train),
            list(&self.validation),
            list(&self.test)
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            fields.insert(key.to_string(), rest.trim().to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Data(format!("split plan lacks `{k}`")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Data(format!("split plan `{k}` is not a number"))) };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Data(format!("split plan `{k}` holds `{v}`"))))
                .collect()
        };
        let plan = SplitPlan {
            strategy: get("strategy")?.parse()?,
            seed: num("seed")?,
            n: num("n")? as usize,
            universe: fields.get("universe").map(|s| s.parse()).transpose()?.unwrap_or_default(),
            train: list("train")?,
            validation: list("validation")?,
            test: list("test")?,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Checks the three sets partition `0..n` and train is strictly ascending.
    pub fn validate(&self) -> Result<()> {
        if self.train.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("train indices must be strictly ascending".into()));
        }
        let mut seen = vec![false; self.n];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= self.n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("index {i} is out of range or assigned twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("split plan does not cover every slice".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes_from_fractions() {
        let plan = sample_split(&vec![true; 829], SplitStrategy::RandomOrdered, &SplitConfig::default(), 1).unwrap();
        assert_eq!(plan.train.len(), 82);
        assert_eq!(plan.validation.len(), 8); // ⌈0.01 · 747⌉
        assert_eq!(plan.test.len(), 829 - 90);
        plan.validate().unwrap();
    }

    #[test]
    fn contiguous_strategies() {
        let p = sample_split(&vec![true; 20], SplitStrategy::InitialSeq, &SplitConfig::default(), 0).unwrap();
        assert_eq!(p.train, vec![0, 1]);
        let p = sample_split(&vec![true; 10], SplitStrategy::MidSeq, &SplitConfig::default(), 0).unwrap();
        assert_eq!(p.train, vec![5]);
        assert_eq!(p.validation.len(), 1);
        assert!(!p.validation.contains(&5));
        assert_eq!(p.test.len(), 8);
    }

    #[test]
    fn mid_rand_stays_in_second_half() {
        let p = sample_split(&vec![true; 100], SplitStrategy::MidRand, &SplitConfig::default(), 3).unwrap();
        assert_eq!(p.train.len(), 10);
        assert!(p.train.iter().all(|&i| i >= 50));
    }

    #[test]
    fn annotation_constraint_shifts_window() {
        // Only slices 12..20 are annotated: the initial window must move.
        let ann: Vec<bool> = (0..20).map(|i| i >= 12).collect();
        let p = sample_split(&ann, SplitStrategy::InitialSeq, &SplitConfig::default(), 0).unwrap();
        assert_eq!(p.train, vec![11, 12]);
        let none = vec![false; 20];
        assert!(matches!(
            sample_split(&none, SplitStrategy::MidSeq, &SplitConfig::default(), 0),
            Err(Error::SplitInfeasible(_))
        ));
        // Random draws meet the quota even when annotations are scarce.
        let sparse: Vec<bool> = (0..100).map(|i| i % 10 == 0).collect();
        let p = sample_split(&sparse, SplitStrategy::MidRand, &SplitConfig::default(), 4).unwrap();
        assert!(p.train.iter().filter(|&&i| sparse[i]).count() >= 5);
    }

    #[test]
    fn annotated_universe() {
        let ann: Vec<bool> = (0..40).map(|i| i % 2 == 1).collect();
        let cfg = SplitConfig { universe: SplitUniverse::AnnotatedOnly, ..SplitConfig::default() };
        let p = sample_split(&ann, SplitStrategy::InitialSeq, &cfg, 0).unwrap();
        assert_eq!(p.train, vec![1, 3]);
        p.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let p = sample_split(&vec![true; 60], SplitStrategy::MidRand, &SplitConfig::default(), 9).unwrap();
        assert_eq!(SplitPlan::from_text(&p.to_text()).unwrap(), p);
        assert!(SplitPlan::from_text("strategy MidSeq\n").is_err());
    }

    #[test]
    fn rejects_small_stacks() {
        assert!(sample_split(&[true; 9], SplitStrategy::MidSeq, &SplitConfig::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn plans_partition_and_ascend(n in 10usize..300, seed in any::<u64>(), s in 0usize..4) {
            let strategy = SplitStrategy::ALL[s];
            let p = sample_split(&vec![true; n], strategy, &SplitConfig::default(), seed).unwrap();
            prop_assert!(p.validate().is_ok());
            prop_assert_eq!(p.train.len(), floor_frac(0.1, n));
            let again = sample_split(&vec![true; n], strategy, &SplitConfig::default(), seed).unwrap();
            prop_assert_eq!(again, p);
        }
    }
}
