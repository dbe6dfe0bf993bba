//! Ripeness profiles and correlation matching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RipenessLabel {
    Unripen,
    HalfRipen,
    Ripen,
    OverRipen,
}

impl RipenessLabel {
    /// Least ripe first.
    pub const ALL: [RipenessLabel; 4] = [
        RipenessLabel::Unripen,
        RipenessLabel::HalfRipen,
        RipenessLabel::Ripen,
        RipenessLabel::OverRipen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RipenessLabel::Unripen => "unripen",
            RipenessLabel::HalfRipen => "half_ripen",
            RipenessLabel::Ripen => "ripen",
            RipenessLabel::OverRipen => "over_ripen",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RipenessLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RipenessLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RipenessLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Classify(format!("unknown label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipenessProfile {
    pub label: RipenessLabel,
    pub mean_features: FeatureVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileLibrary {
    pub profiles: Vec<RipenessProfile>,
    pub fruit_kind: String,
    pub plan_hash: String,
}

impl ProfileLibrary {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.profiles.first() else {
            return Err(Error::Classify("empty library".into()));
        };
        for (i, p) in self.profiles.iter().enumerate() {
            if p.sample_count == 0 {
                return Err(Error::Classify(format!("profile {} has no samples", p.label)));
            }
            if p.mean_features.shape() != first.mean_features.shape() {
                return Err(Error::Classify("profiles differ in feature shape".into()));
            }
            if self.profiles[..i].iter().any(|q| q.label == p.label) {
                return Err(Error::Classify(format!("duplicate label {}", p.label)));
            }
        }
        Ok(())
    }

    /// Library usable against data taken on a plan with fingerprint `plan_hash`.
    pub fn check_plan(&self, plan_hash: &str) -> Result<()> {
        if self.plan_hash != plan_hash {
            return Err(Error::Classify("library was built on a different channel plan".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &FeatureVector, b: &FeatureVector) -> Result<()> {
    if a.shape() != b.shape() || a.levels().zip(b.levels()).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Classify("feature shapes differ".into()));
    }
    Ok(())
}

/// Element-wise mean of the samples.
pub fn build_profile(samples: &[FeatureVector], label: RipenessLabel) -> Result<RipenessProfile> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Classify(format!("no samples for {label}")))?;
    for s in samples {
        same_shape(first, s)?;
    }
    let n = samples.len() as f64;
    let mean = |pick: &dyn Fn(&FeatureVector) -> &Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; first.source_len];
        for s in samples {
            for (a, x) in acc.iter_mut().zip(pick(s)) {
                *a += x;
            }
        }
        acc.iter().map(|a| a / n).collect()
    };
    let detail = (0..first.detail.len()).map(|j| mean(&|s| &s.detail[j])).collect();
    let approx = mean(&|s| &s.approx);
    Ok(RipenessProfile {
        label,
        mean_features: FeatureVector {
            detail,
            approx,
            source_len: first.source_len,
        },
        sample_count: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    /// Levels where either side had zero variance and scored 0.
    pub degenerate_levels: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        ab += dx * dy;
        aa += dx * dx;
        bb += dy * dy;
    }
    if aa > 0.0 && bb > 0.0 {
        Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// Zero-lag normalized correlation per level, averaged over all levels.
pub fn similarity(a: &FeatureVector, b: &FeatureVector) -> Result<Similarity> {
    same_shape(a, b)?;
    let mut total = 0.0;
    let mut degenerate_levels = 0;
    let mut count = 0;
    for (x, y) in a.levels().zip(b.levels()) {
        count += 1;
        match pearson(x, y) {
            Some(r) => total += r,
            None => degenerate_levels += 1,
        }
    }
    Ok(Similarity {
        value: total / count as f64,
        degenerate_levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: RipenessLabel,
    /// One score per library profile, in library order.
    pub scores: Vec<(RipenessLabel, f64)>,
    pub tie: bool,
}

/// Label of the most similar profile; exact ties go to the riper label.
pub fn classify(test: &FeatureVector, lib: &ProfileLibrary) -> Result<Classification> {
    lib.validate()?;
    let scores = lib
        .profiles
        .iter()
        .map(|p| similarity(test, &p.mean_features).map(|s| (p.label, s.value)))
        .collect::<Result<Vec<_>>>()?;
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<RipenessLabel> = scores.iter().filter(|s| s.1 == best).map(|s| s.0).collect();
    let label = *winners.iter().max().expect("library is non-empty");
    Ok(Classification {
        label,
        scores,
        tie: winners.len() > 1,
    })
}

/// Row = true label, column = predicted label, cells = row fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<RipenessLabel>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<RipenessLabel>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn record(&mut self, truth: RipenessLabel, predicted: RipenessLabel) {
        let pos = |l| self.labels.iter().position(|x| *x == l);
        if let (Some(r), Some(c)) = (pos(truth), pos(predicted)) {
            self.counts[r][c] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: usize = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    pub fn fractions(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
            })
            .collect()
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>12}", "truth\\pred")?;
        for l in &self.labels {
            write!(f, " {:>11}", l.as_str())?;
        }
        writeln!(f)?;
        for (l, row) in self.labels.iter().zip(self.fractions()) {
            write!(f, "{:>12}", l.as_str())?;
            for x in row {
                write!(f, " {x:>11.3}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(levels: Vec<Vec<f64>>) -> FeatureVector {
        let mut levels = levels;
        let approx = levels.pop().unwrap();
        FeatureVector {
            source_len: approx.len(),
            detail: levels,
            approx,
        }
    }

    fn sample() -> FeatureVector {
        fv(vec![vec![1.0, -2.0, 0.5, 3.0], vec![0.2, 0.1, -0.4, 0.0], vec![5.0, 4.0, 3.5, 1.0]])
    }

    fn map(a: &FeatureVector, f: impl Fn(f64) -> f64) -> FeatureVector {
        fv(a.levels().map(|v| v.iter().map(|x| f(*x)).collect()).collect())
    }

    fn library(profiles: Vec<(RipenessLabel, FeatureVector)>) -> ProfileLibrary {
        ProfileLibrary {
            profiles: profiles
                .into_iter()
                .map(|(label, f)| RipenessProfile { label, mean_features: f, sample_count: 1 })
                .collect(),
            fruit_kind: "test".into(),
            plan_hash: "abc".into(),
        }
    }

    #[test]
    fn single_sample_profile_is_the_sample() {
        let p = build_profile(&[sample()], RipenessLabel::Ripen).unwrap();
        assert_eq!(p.mean_features, sample());
        assert_eq!(p.sample_count, 1);
    }

    #[test]
    fn opposite_samples_average_to_zero() {
        let p = build_profile(&[sample(), map(&sample(), |x| -x)], RipenessLabel::Ripen).unwrap();
        assert!(p.mean_features.levels().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn profile_rejects_shape_mismatch() {
        let short = fv(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(build_profile(&[sample(), short], RipenessLabel::Ripen).is_err());
        assert!(build_profile(&[], RipenessLabel::Ripen).is_err());
    }

    #[test]
    fn similarity_cases() {
        let a = sample();
        assert!((similarity(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        assert!((similarity(&a, &map(&a, |x| 3.0 * x + 7.0)).unwrap().value - 1.0).abs() < 1e-12);
        assert!((similarity(&a, &map(&a, |x| -x)).unwrap().value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_level_scores_zero_and_is_flagged() {
        let a = sample();
        let mut b = sample();
        b.approx = vec![2.0; 4];
        let s = similarity(&a, &b).unwrap();
        assert_eq!(s.degenerate_levels, 1);
        assert!((s.value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn classify_exact_match() {
        let other = fv(vec![vec![0.0, 1.0, 0.0, -1.0], vec![1.0, 0.0, 0.0, 0.3], vec![1.0, 2.0, 3.0, 4.0]]);
        let lib = library(vec![(RipenessLabel::Unripen, other), (RipenessLabel::HalfRipen, sample())]);
        let c = classify(&sample(), &lib).unwrap();
        assert_eq!(c.label, RipenessLabel::HalfRipen);
        assert!((c.scores[1].1 - 1.0).abs() < 1e-12);
        assert!(!c.tie);
    }

    #[test]
    fn ties_go_to_the_riper_label() {
        let lib = library(vec![(RipenessLabel::Ripen, sample()), (RipenessLabel::HalfRipen, sample())]);
        let c = classify(&sample(), &lib).unwrap();
        assert_eq!(c.label, RipenessLabel::Ripen);
        assert!(c.tie);
    }

    #[test]
    fn library_validation() {
        let short = fv(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(library(vec![(RipenessLabel::Ripen, sample()), (RipenessLabel::Unripen, short)]).validate().is_err());
        assert!(library(vec![(RipenessLabel::Ripen, sample()), (RipenessLabel::Ripen, sample())]).validate().is_err());
        assert!(library(vec![]).validate().is_err());
        let lib = library(vec![(RipenessLabel::Ripen, sample())]);
        assert!(lib.check_plan("abc").is_ok());
        assert!(lib.check_plan("abd").is_err());
        let bad = fv(vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        assert!(classify(&bad, &lib).is_err());
    }

    #[test]
    fn labels_round_trip_through_strings() {
        for l in RipenessLabel::ALL {
            assert_eq!(l.as_str().parse::<RipenessLabel>().unwrap(), l);
        }
        assert!("green".parse::<RipenessLabel>().is_err());
    }

    #[test]
    fn confusion_matrix_rows_are_truth() {
        let mut m = ConfusionMatrix::new(RipenessLabel::ALL.to_vec());
        m.record(RipenessLabel::Unripen, RipenessLabel::Unripen);
        m.record(RipenessLabel::Unripen, RipenessLabel::Ripen);
        m.record(RipenessLabel::OverRipen, RipenessLabel::OverRipen);
        assert_eq!(m.counts[0][2], 1);
        assert!((m.accuracy() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.fractions()[0], vec![0.5, 0.0, 0.5, 0.0]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn features() -> impl Strategy<Value = FeatureVector> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 16), 3).prop_map(|mut levels| {
            let approx = levels.pop().unwrap();
            FeatureVector { source_len: 16, detail: levels, approx }
        })
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric(a in features(), b in features()) {
            prop_assert_eq!(similarity(&a, &b).unwrap().value, similarity(&b, &a).unwrap().value);
        }

        #[test]
        fn similarity_is_bounded(a in features(), b in features()) {
            let s = similarity(&a, &b).unwrap().value;
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn affine_maps_keep_the_label(t in features(), p in proptest::collection::vec(features(), 4), c in 0.01f64..100.0, d in -50.0f64..50.0) {
            let lib = ProfileLibrary {
                profiles: p.into_iter().zip(RipenessLabel::ALL).map(|(f, label)| RipenessProfile { label, mean_features: f, sample_count: 1 }).collect(),
                fruit_kind: "x".into(),
                plan_hash: "x".into(),
            };
            let moved = FeatureVector {
                detail: t.detail.iter().map(|v| v.iter().map(|x| c * x + d).collect()).collect(),
                approx: t.approx.iter().map(|x| c * x + d).collect(),
                source_len: t.source_len,
            };
            let a = classify(&t, &lib).unwrap();
            let b = classify(&moved, &lib).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x.1 - y.1).abs() < 1e-9);
            }
            let margin = {
                let mut s: Vec<f64> = a.scores.iter().map(|s| s.1).collect();
                s.sort_by(|x, y| y.total_cmp(x));
                s[0] - s[1]
            };
            if margin > 1e-9 {
                prop_assert_eq!(a.label, b.label);
            }
        }
    }
}
