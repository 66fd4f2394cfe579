//! IoU, landmark localization accuracy, merging of per-label binary
//! predictions, and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::ScoreMap;
use crate::error::{Error, Result};
use crate::feature_store::{check_same_grid, LabelMask, Pixel};

/// Running intersection and union counts, so IoU can be pooled over slices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: usize,
    pub union: usize,
}

impl IouCounts {
    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// `1` when both sides were empty everywhere.
    pub fn ratio(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

fn counts_by(
    pred: &LabelMask,
    gt: &LabelMask,
    keep: impl Fn(u8) -> bool,
) -> Result<IouCounts> {
    check_same_grid(pred.height(), pred.width(), gt.height(), gt.width())?;
    let mut c = IouCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (keep(p), keep(g));
        c.intersection += usize::from(p && g);
        c.union += usize::from(p || g);
    }
    Ok(c)
}

/// IoU treating every nonzero label as foreground.
pub fn iou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    counts_by(pred, gt, |l| l != 0).map(|c| c.ratio())
}

pub fn label_iou_counts(pred: &LabelMask, gt: &LabelMask, label: u8) -> Result<IouCounts> {
    counts_by(pred, gt, |l| l == label)
}

/// IoU of the pixels carrying `label` in each mask.
pub fn label_iou(pred: &LabelMask, gt: &LabelMask, label: u8) -> Result<f64> {
    label_iou_counts(pred, gt, label).map(|c| c.ratio())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationCase {
    pub predicted: Option<Pixel>,
    pub ground_truth: Pixel,
    pub label: u8,
    pub slice: usize,
}

impl LocalizationCase {
    pub fn hit(&self, radius: f64) -> bool {
        self.predicted
            .is_some_and(|p| p.euclidean(self.ground_truth) < radius)
    }
}

/// Fraction of cases whose prediction exists and lies strictly within
/// `radius` of the ground truth.
pub fn localization_accuracy(cases: &[LocalizationCase], radius: f64) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::invalid("no localization cases"));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::invalid(format!("radius {radius} must be positive")));
    }
    let hits = cases.iter().filter(|c| c.hit(radius)).count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Foreground score of a binary prediction: the only channel of a one-channel
/// map, channel 1 otherwise.
fn foreground_score(scores: &ScoreMap, index: usize) -> f64 {
    let row = scores.at_index(index);
    if row.len() == 1 {
        row[0]
    } else {
        row[1]
    }
}

/// Merges per-label binary predictions. Each pixel goes to the claiming label
/// with the highest foreground score there (ties to the lower label); pixels
/// no label claims stay background.
pub fn aggregate_binary_multilabel(per_label: &[(u8, LabelMask, ScoreMap)]) -> Result<LabelMask> {
    let (_, first, _) = per_label
        .first()
        .ok_or_else(|| Error::invalid("no per-label predictions to aggregate"))?;
    let (h, w) = (first.height(), first.width());
    let mut seen = std::collections::BTreeSet::new();
    for (label, mask, scores) in per_label {
        if *label == 0 || !seen.insert(*label) {
            return Err(Error::invalid(format!(
                "label {label} is zero or duplicated"
            )));
        }
        check_same_grid(h, w, mask.height(), mask.width())?;
        check_same_grid(h, w, scores.height(), scores.width())?;
    }
    let mut order: Vec<usize> = (0..per_label.len()).collect();
    order.sort_by_key(|&i| per_label[i].0);
    let label_count = *seen.last().unwrap();

    let labels = (0..h * w)
        .map(|i| {
            let mut best: Option<(u8, f64)> = None;
            for &k in &order {
                let (label, mask, scores) = &per_label[k];
                if mask.labels()[i] == 0 {
                    continue;
                }
                let s = foreground_score(scores, i);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((*label, s));
                }
            }
            best.map_or(0, |(l, _)| l)
        })
        .collect();
    LabelMask::new(h, w, label_count, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub iou: Option<f64>,
    pub localization_accuracy: Option<f64>,
    /// Localization cases (slices or volumes carrying the label).
    pub cases: usize,
    /// Slices without the label in the ground truth on which a landmark was
    /// still predicted.
    pub false_positive_slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub iou: Option<f64>,
    pub localization_accuracy: Option<f64>,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub adapter: String,
    pub per_label: BTreeMap<u8, LabelMetrics>,
    pub aggregate: AggregateMetrics,
    pub radius: f64,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.per_label.is_empty() {
            return Err(Error::invalid("report has no per-label metrics"));
        }
        let ratios = self
            .per_label
            .values()
            .flat_map(|m| [m.iou, m.localization_accuracy])
            .chain([self.aggregate.iou, self.aggregate.localization_accuracy])
            .flatten();
        for r in ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("ratio {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Aligned plain-text table, ratios to three decimals.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "task: {}  adapter: {}  radius: {}  config: {}",
            self.task, self.adapter, self.radius, self.config_hash
        );
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>10} {:>7} {:>6}",
            "label", "iou", "loc_acc", "cases", "fp"
        );
        for (label, m) in &self.per_label {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>10} {:>7} {:>6}",
                label,
                fmt(m.iou),
                fmt(m.localization_accuracy),
                m.cases,
                m.false_positive_slices
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>10} {:>7} {:>6}",
            "aggregate",
            fmt(self.aggregate.iou),
            fmt(self.aggregate.localization_accuracy),
            self.aggregate.cases,
            "-"
        );
        out
    }
}

/// Writes the report as JSON at `path` and the text table next to it with a
/// `.txt` extension.
pub fn emit_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    report.validate()?;
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    let table_path = path.with_extension("txt");
    std::fs::write(&table_path, report.table()).map_err(|e| Error::io(&table_path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: "report",
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> LabelMask {
        let mut labels = vec![0; h * w];
        for r in rows {
            for c in cols.clone() {
                labels[r * w + c] = 1;
            }
        }
        LabelMask::new(h, w, 1, labels).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = block(5, 5, 1..3, 1..3);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = block(5, 5, 3..5, 3..5);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        let shifted = block(5, 5, 1..3, 2..4);
        assert_eq!(iou(&a, &shifted).unwrap(), 1.0 / 3.0);
        let empty = LabelMask::background(5, 5, 1).unwrap();
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        let other = LabelMask::background(4, 5, 1).unwrap();
        assert!(iou(&a, &other).is_err());
    }

    fn case(pred: Option<(usize, usize)>, gt: (usize, usize)) -> LocalizationCase {
        LocalizationCase {
            predicted: pred.map(|(r, c)| Pixel::new(r, c)),
            ground_truth: Pixel::new(gt.0, gt.1),
            label: 1,
            slice: 0,
        }
    }

    #[test]
    fn localization_examples() {
        let exact = [case(Some((3, 4)), (3, 4)), case(Some((9, 9)), (9, 9))];
        assert_eq!(localization_accuracy(&exact, 10.0).unwrap(), 1.0);
        let boundary = [case(Some((10, 0)), (0, 0))];
        assert_eq!(localization_accuracy(&boundary, 10.0).unwrap(), 0.0);
        let mut eight: Vec<_> = (0..7).map(|i| case(Some((i, 0)), (i, 3))).collect();
        eight.push(case(None, (0, 0)));
        assert_eq!(localization_accuracy(&eight, 10.0).unwrap(), 0.875);
        assert!(localization_accuracy(&[], 10.0).is_err());
    }

    fn scores(h: usize, w: usize, v: &[f64]) -> ScoreMap {
        ScoreMap::new(h, w, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let m1 = LabelMask::new(1, 3, 1, vec![1, 1, 0]).unwrap();
        let m2 = LabelMask::new(1, 3, 1, vec![0, 1, 0]).unwrap();
        let out = aggregate_binary_multilabel(&[
            (1, m1.clone(), scores(1, 3, &[0.9, 0.9, 0.0])),
            (2, m2.clone(), scores(1, 3, &[0.0, 0.4, 0.0])),
        ])
        .unwrap();
        assert_eq!(out.labels(), &[1, 1, 0]);
        assert_eq!(out.label_count(), 2);

        let tie = aggregate_binary_multilabel(&[
            (2, m2.clone(), scores(1, 3, &[0.0, 0.5, 0.0])),
            (1, m1.clone(), scores(1, 3, &[0.5, 0.5, 0.0])),
        ])
        .unwrap();
        assert_eq!(tie.labels(), &[1, 1, 0]);

        let none = LabelMask::background(1, 3, 1).unwrap();
        let out = aggregate_binary_multilabel(&[(1, none.clone(), scores(1, 3, &[1.0; 3]))]).unwrap();
        assert_eq!(out.labels(), &[0, 0, 0]);

        assert!(aggregate_binary_multilabel(&[
            (1, none.clone(), scores(1, 3, &[0.0; 3])),
            (1, none, scores(1, 3, &[0.0; 3])),
        ])
        .is_err());
    }

    fn report() -> MetricReport {
        let mut per_label = BTreeMap::new();
        per_label.insert(
            1,
            LabelMetrics {
                iou: Some(0.8812345),
                localization_accuracy: Some(0.875),
                cases: 8,
                false_positive_slices: 0,
            },
        );
        MetricReport {
            task: "localize".into(),
            adapter: "contrastive".into(),
            per_label,
            aggregate: AggregateMetrics {
                iou: Some(0.8812345),
                localization_accuracy: Some(0.875),
                cases: 8,
            },
            radius: 10.0,
            seeds: BTreeMap::from([("seed".to_string(), 7)]),
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn report_round_trips_and_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let r = report();
        emit_report(&r, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
        let table = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(table.contains("0.881"));
        assert!(table.contains("0.875"));
        assert!(!table.contains("0.8812"));
    }

    #[test]
    fn empty_report_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report();
        r.per_label.clear();
        assert!(emit_report(&r, dir.path().join("r.json")).is_err());
    }

    fn mask_pair() -> impl Strategy<Value = (LabelMask, LabelMask)> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(0u8..=1, h * w),
                prop::collection::vec(0u8..=1, h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        LabelMask::new(h, w, 1, a).unwrap(),
                        LabelMask::new(h, w, 1, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded((a, b) in mask_pair()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn accuracy_is_monotone_in_radius(
            pts in prop::collection::vec((0usize..40, 0usize..40, 0usize..40, 0usize..40, any::<bool>()), 1..20),
            r1 in 0.5f64..30.0, extra in 0.0f64..30.0,
        ) {
            let cases: Vec<_> = pts.iter().map(|&(a, b, c, d, present)| case(present.then_some((a, b)), (c, d))).collect();
            let lo = localization_accuracy(&cases, r1).unwrap();
            let hi = localization_accuracy(&cases, r1 + extra).unwrap();
            prop_assert!(hi >= lo);
        }

        #[test]
        fn aggregation_picks_max_claimant(
            claims in prop::collection::vec(prop::collection::vec((any::<bool>(), 0.0f64..1.0), 12), 1..4)
        ) {
            let per: Vec<_> = claims.iter().enumerate().map(|(k, px)| {
                let mask = LabelMask::new(3, 4, 1, px.iter().map(|(c, _)| u8::from(*c)).collect()).unwrap();
                let s = ScoreMap::new(3, 4, 1, px.iter().map(|(_, s)| *s).collect()).unwrap();
                (k as u8 + 1, mask, s)
            }).collect();
            let out = aggregate_binary_multilabel(&per).unwrap();
            for i in 0..12 {
                let claimants: Vec<_> = per.iter().filter(|(_, m, _)| m.labels()[i] == 1).collect();
                let got = out.labels()[i];
                if claimants.is_empty() {
                    prop_assert_eq!(got, 0);
                } else {
                    let best = claimants.iter().map(|(_, _, s)| s.data()[i]).fold(f64::MIN, f64::max);
                    let (_, _, s) = per.iter().find(|(l, _, _)| *l == got).unwrap();
                    prop_assert_eq!(s.data()[i], best);
                    prop_assert_eq!(per[got as usize - 1].1.labels()[i], 1);
                }
            }
        }
    }
}
