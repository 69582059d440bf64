//! Map-quality metrics (PSNR, SSIM), rank-based AUC and CSV reports.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dssim::{ssim_map, DssimParams};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::synth::Label;
use crate::tensor::Tensor;

pub const METRIC_HEADER: [&str; 4] = ["metric", "split", "config_hash", "value"];

/// `10·log10(peak²/MSE)`; identical maps give `+∞`.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// Spatial mean of the SSIM map between two single-channel maps.
pub fn ssim_scalar<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let m = ssim_map(a, b, &DssimParams::default())?;
    Ok(m.data().iter().map(|v| v.as_f64()).sum::<f64>() / m.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: usize,
    pub group_id: usize,
    pub label: Label,
    /// Probability of the fake class.
    pub score: f64,
}

/// Probability that a random fake outscores a random real, ties counted ½.
/// With `group_average`, scores are first averaged within each group.
pub fn auc(samples: &[ScoredSample], group_average: bool) -> Result<f64> {
    let scored: Vec<(f64, Label)> = if group_average {
        let mut groups: BTreeMap<usize, (f64, usize, Label)> = BTreeMap::new();
        for s in samples {
            let e = groups.entry(s.group_id).or_insert((0.0, 0, s.label));
            if e.2 != s.label {
                return Err(Error::InvalidParam(format!("group {} mixes labels", s.group_id)));
            }
            e.0 += s.score;
            e.1 += 1;
        }
        groups.into_values().map(|(sum, n, l)| (sum / n as f64, l)).collect()
    } else {
        samples.iter().map(|s| (s.score, s.label)).collect()
    };
    if let Some((v, _)) = scored.iter().find(|(v, _)| !v.is_finite()) {
        return Err(Error::InvalidParam(format!("non-finite score {v}")));
    }
    let n_pos = scored.iter().filter(|(_, l)| *l == Label::Fake).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidParam("AUC needs both real and fake samples".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| scored[i].0.total_cmp(&scored[j].0));
    // Rank sum of the positives with tied blocks sharing their mean rank.
    // Ranks are kept doubled so every quantity stays an exact integer.
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let doubled_mean_rank = (i + 1 + j + 1) as u128;
        let pos_in_block = order[i..=j].iter().filter(|&&k| scored[k].1 == Label::Fake).count() as u128;
        pos_rank2 += doubled_mean_rank * pos_in_block;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub split: String,
    pub config_hash: String,
    pub value: f64,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, split: impl Into<String>, config_hash: &str, value: f64) -> Self {
        Self { metric: metric.into(), split: split.into(), config_hash: config_hash.to_string(), value }
    }
}

pub fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_HEADER)?;
    for r in rows {
        if !r.value.is_finite() {
            return Err(Error::InvalidParam(format!("metric {} is not finite", r.metric)));
        }
        w.write_record([r.metric.as_str(), &r.split, &r.config_hash, &fmt_value(r.value)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let value = rec[3].parse().map_err(|_| Error::Format(format!("bad metric value `{}`", &rec[3])))?;
            Ok(MetricReport::new(&rec[0], &rec[1], &rec[2], value))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapScore {
    pub id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-sample PSNR/SSIM of generated maps against GT maps, plus aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub split: String,
    pub config_hash: String,
    pub rows: Vec<MapScore>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn localization_report(
    ids: &[usize],
    generated: &[Tensor<f32>],
    gt: &[Tensor<f32>],
    split: &str,
    config_hash: &str,
) -> Result<LocalizationReport> {
    if generated.len() != gt.len() || ids.len() != gt.len() {
        return Err(Error::InvalidParam(format!(
            "unpaired maps: {} ids, {} generated, {} GT",
            ids.len(),
            generated.len(),
            gt.len()
        )));
    }
    let rows = ids
        .iter()
        .zip(generated.iter().zip(gt))
        .map(|(&id, (g, t))| Ok(MapScore { id, psnr: psnr(g, t, 1.0)?, ssim: ssim_scalar(g, t)? }))
        .collect::<Result<_>>()?;
    Ok(LocalizationReport { split: split.into(), config_hash: config_hash.into(), rows })
}

impl LocalizationReport {
    /// Mean PSNR over finite values, and the count of `+∞` entries.
    pub fn psnr_summary(&self) -> (f64, f64, usize) {
        let finite: Vec<f64> = self.rows.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
        let (m, s) = mean_std(&finite);
        (m, s, self.rows.len() - finite.len())
    }

    pub fn ssim_summary(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    pub fn metrics(&self) -> Vec<MetricReport> {
        let (pm, ps, inf) = self.psnr_summary();
        let (sm, ss) = self.ssim_summary();
        let r = |m: &str, v: f64| MetricReport::new(m, &self.split, &self.config_hash, v);
        vec![
            r("psnr_mean", pm),
            r("psnr_std", ps),
            r("psnr_inf_count", inf as f64),
            r("ssim_mean", sm),
            r("ssim_std", ss),
            r("samples", self.rows.len() as f64),
        ]
    }

    /// One row per sample plus a final `aggregate` row of means.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "split", "config_hash", "psnr", "ssim"])?;
        for r in &self.rows {
            w.write_record([r.id.to_string().as_str(), &self.split, &self.config_hash, &fmt_value(r.psnr), &fmt_value(r.ssim)])?;
        }
        let (pm, _, _) = self.psnr_summary();
        let (sm, _) = self.ssim_summary();
        w.write_record(["aggregate", &self.split, &self.config_hash, &fmt_value(pm), &fmt_value(sm)])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read `id,label,score[,group_id]` rows (header required; group defaults to the id).
pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let col = |name: &str| h.iter().position(|c| c == name);
    let (ci, cl, cs) = match (col("id"), col("label"), col("score")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Format(format!("{}: need id, label and score columns", path.display()))),
    };
    let cg = col("group_id");
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse().map_err(|_| Error::Format(format!("bad number `{}`", &rec[i])))
            };
            let id = num(ci)? as usize;
            let score = num(cs)?;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::InvalidParam(format!("score {score} outside [0, 1]")));
            }
            Ok(ScoredSample {
                id,
                group_id: match cg {
                    Some(g) => num(g)? as usize,
                    None => id,
                },
                label: rec[cl].trim().parse()?,
                score,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, scores: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "group_id", "label", "score"])?;
    for s in scores {
        w.write_record([s.id.to_string(), s.group_id.to_string(), s.label.to_string(), format!("{}", s.score)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::pair_count_auc;
    use crate::rng::child_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn scored(pairs: &[(f64, Label)]) -> Vec<ScoredSample> {
        pairs.iter().enumerate().map(|(i, &(score, label))| ScoredSample { id: i, group_id: i, label, score }).collect()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::from_fn(&[8, 8], |i| (i % 7) as f64 / 10.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[4, 4]), 1.0).is_err());
    }

    #[test]
    fn ssim_scalar_is_one_for_equal_and_symmetric() {
        let mut rng = child_rng(3, "m", 0);
        let a = Tensor::<f64>::from_fn(&[12, 12], |_| rng.random());
        let b = Tensor::<f64>::from_fn(&[12, 12], |_| rng.random());
        assert!((ssim_scalar(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim_scalar(&a, &b).unwrap(), ssim_scalar(&b, &a).unwrap());
    }

    #[test]
    fn auc_fixtures() {
        use Label::*;
        assert_eq!(auc(&scored(&[(0.9, Fake), (0.8, Fake), (0.3, Real), (0.4, Real)]), false).unwrap(), 1.0);
        assert_eq!(auc(&scored(&[(0.5, Fake), (0.5, Fake), (0.5, Real)]), false).unwrap(), 0.5);
        assert!(auc(&scored(&[(0.5, Fake), (0.2, Fake)]), false).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = child_rng(5, "auc", 0);
        for _ in 0..200 {
            let n = rng.random_range(2..60);
            let mut s: Vec<(f64, Label)> = (0..n)
                .map(|_| {
                    let l = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
                    (rng.random_range(0..10) as f64 / 10.0, l)
                })
                .collect();
            s[0].1 = Label::Fake;
            s[1].1 = Label::Real;
            let s = scored(&s);
            assert!((auc(&s, false).unwrap() - pair_count_auc(&s)).abs() < 1e-12);
        }
    }

    #[test]
    fn group_average_with_singletons_equals_sample_auc() {
        use Label::*;
        let s = scored(&[(0.2, Fake), (0.7, Real), (0.9, Fake), (0.1, Real)]);
        assert_eq!(auc(&s, true).unwrap(), auc(&s, false).unwrap());
        let grouped = vec![
            ScoredSample { id: 0, group_id: 0, label: Fake, score: 0.9 },
            ScoredSample { id: 1, group_id: 0, label: Fake, score: 0.1 },
            ScoredSample { id: 2, group_id: 1, label: Real, score: 0.4 },
            ScoredSample { id: 3, group_id: 1, label: Real, score: 0.4 },
        ];
        assert_eq!(auc(&grouped, false).unwrap(), 0.5);
        assert_eq!(auc(&grouped, true).unwrap(), 1.0);
        let mixed = vec![grouped[0].clone(), ScoredSample { group_id: 0, ..grouped[2].clone() }];
        assert!(auc(&mixed, true).is_err());
    }

    #[test]
    fn localization_report_perfect_maps() {
        let maps: Vec<Tensor<f32>> = (0..3).map(|i| Tensor::from_fn(&[8, 8], |k| ((k + i) % 5) as f32 / 5.0)).collect();
        let r = localization_report(&[0, 1, 2], &maps, &maps, "test", "h").unwrap();
        assert_eq!(r.ssim_summary().0, 1.0);
        assert_eq!(r.psnr_summary().2, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loc.csv");
        r.write_csv(&p).unwrap();
        let rows = csv::Reader::from_path(&p).unwrap().records().count();
        assert_eq!(rows, 4);
        assert!(localization_report(&[0], &maps, &maps, "test", "h").is_err());
    }

    #[test]
    fn metric_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MetricReport::new("auc", "test", "abc", 0.75)];
        write_metrics(&p, &rows).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("metric,split,config_hash,value\n"));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_transforms(
            scores in proptest::collection::vec((0u8..20, any::<bool>()), 2..40),
        ) {
            let mut pairs: Vec<(f64, Label)> =
                scores.iter().map(|&(s, f)| (s as f64 / 20.0, if f { Label::Fake } else { Label::Real })).collect();
            pairs[0].1 = Label::Fake;
            pairs[1].1 = Label::Real;
            let a = auc(&scored(&pairs), false).unwrap();
            let t: Vec<(f64, Label)> = pairs.iter().map(|&(s, l)| ((3.0 * s).exp() - 0.5, l)).collect();
            prop_assert_eq!(a, auc(&scored(&t), false).unwrap());
        }
    }
}
