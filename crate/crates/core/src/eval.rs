//! Evaluation against reference annotations: Dice statistics, the error of
//! the affected-lung percentage, and severity-score agreement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{ct_severity_score, CtSeverityScore};
use crate::error::{Error, Result};
use crate::metrics::dice_metric;
use crate::preprocess::HuWindow;
use crate::volume::{BinaryMask3D, CtVolume};

/// Errors with the ids present on only one side, if any.
fn check_paired<A, B>(pred: &BTreeMap<String, A>, reference: &BTreeMap<String, B>) -> Result<()> {
    let mut unpaired: Vec<String> = pred.keys().filter(|k| !reference.contains_key(*k)).cloned().collect();
    unpaired.extend(reference.keys().filter(|k| !pred.contains_key(*k)).cloned());
    if unpaired.is_empty() {
        Ok(())
    } else {
        unpaired.sort();
        Err(Error::Unpaired(unpaired))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub per_case: BTreeMap<String, f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single case.
    pub std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn evaluate_segmentation(
    pred: &BTreeMap<String, BinaryMask3D>,
    reference: &BTreeMap<String, BinaryMask3D>,
) -> Result<DiceSummary> {
    check_paired(pred, reference)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    let per_case = pred
        .iter()
        .map(|(id, p)| Ok((id.clone(), dice_metric(&reference[id], p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let values: Vec<f64> = per_case.values().copied().collect();
    let (mean, std) = mean_std(&values);
    Ok(DiceSummary { per_case, mean, std })
}

/// Reference percentage for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceP {
    pub source_dataset: String,
    pub p_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceError {
    pub cases: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantificationSummary {
    pub cases: usize,
    /// Mean absolute error of P, in percentage points.
    pub mae: f64,
    pub per_source: BTreeMap<String, SourceError>,
}

pub fn evaluate_quantification(
    p_pred: &BTreeMap<String, f64>,
    reference: &BTreeMap<String, ReferenceP>,
) -> Result<QuantificationSummary> {
    check_paired(p_pred, reference)?;
    if p_pred.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (id, &p) in p_pred {
        let r = &reference[id];
        if !(p.is_finite() && r.p_ref.is_finite()) {
            return Err(Error::InvalidArgument(format!("{id}: non-finite percentage")));
        }
        let e = sums.entry(r.source_dataset.clone()).or_default();
        e.0 += 1;
        e.1 += (p - r.p_ref).abs();
    }
    let total: f64 = sums.values().map(|s| s.1).sum();
    Ok(QuantificationSummary {
        cases: p_pred.len(),
        mae: total / p_pred.len() as f64,
        per_source: sums
            .into_iter()
            .map(|(k, (n, s))| (k, SourceError { cases: n, mae: s / n as f64 }))
            .collect(),
    })
}

/// A reference severity score: one value, or an inclusive range when the
/// reference category admits several scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub lo: u8,
    pub hi: u8,
}

impl ReferenceScore {
    pub fn exact(v: u8) -> Self {
        ReferenceScore { lo: v, hi: v }
    }

    pub fn contains(&self, v: u8) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    /// Classes between `v` and the nearest accepted score.
    pub fn distance(&self, v: u8) -> u8 {
        if v < self.lo {
            self.lo - v
        } else { v.saturating_sub(self.hi) }
    }
}

impl From<CtSeverityScore> for ReferenceScore {
    fn from(s: CtSeverityScore) -> Self {
        ReferenceScore::exact(s.value())
    }
}

/// Score set for a MosMed category: 0 -> 0, 1 -> {1, 2}, 2 -> 3, 3 -> 4, 4 -> 5.
pub fn mosmed_ctss_reference(category: u8) -> Result<ReferenceScore> {
    match category {
        0 => Ok(ReferenceScore::exact(0)),
        1 => Ok(ReferenceScore { lo: 1, hi: 2 }),
        2..=4 => Ok(ReferenceScore::exact(category + 1)),
        _ => Err(Error::InvalidArgument(format!("MosMed category must be 0..=4, got {category}"))),
    }
}

/// MosMed category of a percentage: 0 for none, then right-closed quarters.
pub fn mosmed_category(p: f64) -> Result<u8> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("P must lie in [0, 100], got {p}")));
    }
    Ok(match p {
        0.0 => 0,
        p if p <= 25.0 => 1,
        p if p <= 50.0 => 2,
        p if p <= 75.0 => 3,
        _ => 4,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtssSummary {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Number of cases off by `k` classes, keyed by `k >= 1`.
    pub misclassified: BTreeMap<u8, usize>,
}

impl CtssSummary {
    /// `correct/total | 1-class/total | 2-class`, the severity table layout.
    pub fn table_row(&self) -> String {
        let one = self.misclassified.get(&1).copied().unwrap_or(0);
        let two = self.misclassified.get(&2).copied().unwrap_or(0);
        let one = if one == 0 { "0".to_string() } else { format!("{one}/{}", self.total) };
        let two = if two == 0 { "0".to_string() } else { format!("{two}/{}", self.total) };
        format!("{}/{} | {one} | {two}", self.correct, self.total)
    }
}

pub fn evaluate_ctss(pred: &BTreeMap<String, u8>, reference: &BTreeMap<String, ReferenceScore>) -> Result<CtssSummary> {
    check_paired(pred, reference)?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    let mut correct = 0;
    let mut misclassified = BTreeMap::new();
    for (id, &s) in pred {
        CtSeverityScore::new(s).map_err(|_| Error::InvalidArgument(format!("{id}: predicted score {s} is not in 1..=5")))?;
        let r = reference[id];
        if r.lo > r.hi || r.hi > 5 {
            return Err(Error::InvalidArgument(format!("{id}: invalid reference score {r:?}")));
        }
        match r.distance(s) {
            0 => correct += 1,
            k => *misclassified.entry(k).or_insert(0) += 1,
        }
    }
    Ok(CtssSummary {
        total: pred.len(),
        correct,
        accuracy: correct as f64 / pred.len() as f64,
        misclassified,
    })
}

/// Everything predicted for one case.
#[derive(Debug, Clone)]
pub struct CasePrediction {
    pub lungs: Option<BinaryMask3D>,
    pub lesions: Option<BinaryMask3D>,
    pub p: f64,
    pub ct_ss: CtSeverityScore,
}

/// Reference annotations for one case. Missing percentages are derived from
/// the masks; missing scores from the percentage.
#[derive(Debug, Clone, Default)]
pub struct CaseReference {
    pub source_dataset: String,
    pub lungs: Option<BinaryMask3D>,
    pub lesions: Option<BinaryMask3D>,
    pub p: Option<f64>,
    pub score: Option<ReferenceScore>,
}

impl CaseReference {
    fn resolved_p(&self) -> Option<f64> {
        self.p.or_else(|| match (&self.lungs, &self.lesions) {
            (Some(l), Some(z)) if l.count() > 0 => Some(100.0 * z.count() as f64 / l.union(z).ok()?.count() as f64),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub dice_lung: Option<f64>,
    pub dice_lesion: Option<f64>,
    pub p_pred: f64,
    pub p_ref: Option<f64>,
    pub ct_ss_pred: CtSeverityScore,
    pub ct_ss_ref: Option<ReferenceScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub per_case: Vec<CaseEvaluation>,
    pub lung_dice: Option<DiceSummary>,
    pub lesion_dice: Option<DiceSummary>,
    pub quantification: Option<QuantificationSummary>,
    pub ct_ss: Option<CtssSummary>,
}

/// Cases present in `map` that have the field `get` returns.
fn collect<T: Clone, U>(map: &BTreeMap<String, U>, get: impl Fn(&U) -> Option<T>) -> BTreeMap<String, T> {
    map.iter().filter_map(|(k, v)| Some((k.clone(), get(v)?))).collect()
}

pub fn evaluate_cases(
    pred: &BTreeMap<String, CasePrediction>,
    reference: &BTreeMap<String, CaseReference>,
) -> Result<EvaluationSummary> {
    check_paired(pred, reference)?;
    let dice = |pm: BTreeMap<String, BinaryMask3D>, rm: BTreeMap<String, BinaryMask3D>| -> Result<Option<DiceSummary>> {
        let ids: Vec<String> = pm.keys().filter(|k| rm.contains_key(*k)).cloned().collect();
        if ids.is_empty() {
            return Ok(None);
        }
        let keep = |m: BTreeMap<String, BinaryMask3D>| m.into_iter().filter(|(k, _)| ids.contains(k)).collect();
        evaluate_segmentation(&keep(pm), &keep(rm)).map(Some)
    };
    let lung_dice = dice(collect(pred, |c| c.lungs.clone()), collect(reference, |c| c.lungs.clone()))?;
    let lesion_dice = dice(collect(pred, |c| c.lesions.clone()), collect(reference, |c| c.lesions.clone()))?;

    let p_ref: BTreeMap<String, ReferenceP> = collect(reference, |r| {
        Some(ReferenceP {
            source_dataset: r.source_dataset.clone(),
            p_ref: r.resolved_p()?,
        })
    });
    let quantification = if p_ref.is_empty() {
        None
    } else {
        let p_pred = pred.iter().filter(|(k, _)| p_ref.contains_key(*k)).map(|(k, c)| (k.clone(), c.p)).collect();
        Some(evaluate_quantification(&p_pred, &p_ref)?)
    };

    let score_ref: BTreeMap<String, ReferenceScore> = reference
        .iter()
        .filter_map(|(k, r)| {
            let s = r.score.or_else(|| r.resolved_p().and_then(|p| ct_severity_score(p).ok()).map(Into::into))?;
            Some((k.clone(), s))
        })
        .collect();
    let ct_ss = if score_ref.is_empty() {
        None
    } else {
        let s_pred = pred
            .iter()
            .filter(|(k, _)| score_ref.contains_key(*k))
            .map(|(k, c)| (k.clone(), c.ct_ss.value()))
            .collect();
        Some(evaluate_ctss(&s_pred, &score_ref)?)
    };

    let per_case = pred
        .iter()
        .map(|(id, c)| CaseEvaluation {
            case_id: id.clone(),
            dice_lung: lung_dice.as_ref().and_then(|d| d.per_case.get(id).copied()),
            dice_lesion: lesion_dice.as_ref().and_then(|d| d.per_case.get(id).copied()),
            p_pred: c.p,
            p_ref: p_ref.get(id).map(|r| r.p_ref),
            ct_ss_pred: c.ct_ss,
            ct_ss_ref: score_ref.get(id).copied(),
        })
        .collect();
    Ok(EvaluationSummary {
        per_case,
        lung_dice,
        lesion_dice,
        quantification,
        ct_ss,
    })
}

impl EvaluationSummary {
    /// Plain-text tables: segmentation Dice, percentage error, severity score.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Segmentation (Dice, mean ± std)");
        let _ = writeln!(out, "target  | cases | dice");
        for (name, d) in [("lungs", &self.lung_dice), ("lesions", &self.lesion_dice)] {
            if let Some(d) = d {
                let _ = writeln!(out, "{name:<7} | {:>5} | {:.2} ± {:.2}", d.per_case.len(), d.mean, d.std);
            }
        }
        if let Some(q) = &self.quantification {
            let _ = writeln!(out, "\nAffected lung percentage (MAE, points)");
            let _ = writeln!(out, "source | cases | MAE");
            for (src, s) in &q.per_source {
                let _ = writeln!(out, "{src} | {} | {:.1}", s.cases, s.mae);
            }
            let _ = writeln!(out, "all | {} | {:.1}", q.cases, q.mae);
        }
        if let Some(c) = &self.ct_ss {
            let _ = writeln!(out, "\nCT severity score");
            let _ = writeln!(out, "Accuracy | 1-class misclassification | 2-class misclassification");
            let _ = writeln!(out, "{}", c.table_row());
            for (k, n) in c.misclassified.iter().filter(|(k, _)| **k > 2) {
                let _ = writeln!(out, "{k}-class misclassification: {n}/{}", c.total);
            }
        }
        let _ = writeln!(out, "\nPer case");
        let _ = writeln!(out, "case | dice lungs | dice lesions | P pred | P ref | CT-SS pred | CT-SS ref");
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        for c in &self.per_case {
            let r = c.ct_ss_ref.map_or("-".to_string(), |r| {
                if r.lo == r.hi { r.lo.to_string() } else { format!("{}-{}", r.lo, r.hi) }
            });
            let _ = writeln!(
                out,
                "{} | {} | {} | {:.2} | {} | {} | {r}",
                c.case_id,
                opt(c.dice_lung, 3),
                opt(c.dice_lesion, 3),
                c.p_pred,
                opt(c.p_ref, 2),
                c.ct_ss_pred
            );
        }
        out
    }
}

/// Axial slice with the most reference voxels, as RGB: lung-window grey
/// levels, reference contour in green, prediction contour in red.
pub fn overlay_slice(vol: &CtVolume, pred: &BinaryMask3D, reference: &BinaryMask3D) -> Result<(usize, usize, Vec<u8>)> {
    vol.ensure_same_dims(pred)?;
    vol.ensure_same_dims(reference)?;
    let [nx, ny, nz] = vol.dims();
    let z = (0..nz)
        .max_by_key(|&z| (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).filter(|&(x, y)| *reference.get(x, y, z)).count())
        .unwrap_or(0);
    let edge = |m: &BinaryMask3D, x: usize, y: usize| {
        *m.get(x, y, z)
            && (x == 0 || y == 0 || x + 1 == nx || y + 1 == ny
                || !*m.get(x - 1, y, z) || !*m.get(x + 1, y, z) || !*m.get(x, y - 1, z) || !*m.get(x, y + 1, z))
    };
    let mut rgb = Vec::with_capacity(nx * ny * 3);
    // rows run anterior to posterior
    for y in 0..ny {
        for x in 0..nx {
            let g = (HuWindow::LUNG.apply(*vol.get(x, y, z)) * 255.0).round() as u8;
            let px = if edge(pred, x, y) {
                [255, 0, 0]
            } else if edge(reference, x, y) {
                [0, 255, 0]
            } else {
                [g, g, g]
            };
            rgb.extend_from_slice(&px);
        }
    }
    Ok((nx, ny, rgb))
}

pub fn write_overlay_png(path: impl AsRef<Path>, vol: &CtVolume, pred: &BinaryMask3D, reference: &BinaryMask3D) -> Result<()> {
    let path = path.as_ref();
    let (w, h, rgb) = overlay_slice(vol, pred, reference)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header().map_err(io)?.write_image_data(&rgb).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids<T: Clone>(values: &[T]) -> BTreeMap<String, T> {
        values.iter().enumerate().map(|(i, v)| (format!("c{i:02}"), v.clone())).collect()
    }

    fn mask(bits: &[u8]) -> BinaryMask3D {
        BinaryMask3D::from_vec([bits.len(), 1, 1], [1.0; 3], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn segmentation_counting() {
        let pred = ids(&[mask(&[1, 1, 0, 0]), mask(&[1, 0, 1, 0]), mask(&[0, 0, 0, 0])]);
        let refs = ids(&[mask(&[1, 1, 0, 0]), mask(&[1, 1, 1, 1]), mask(&[1, 0, 0, 0])]);
        let s = evaluate_segmentation(&pred, &refs).unwrap();
        // 2*2/(2+2), 2*2/(2+4), 0
        let want = [1.0, 4.0 / 6.0, 0.0];
        assert_eq!(s.per_case.len(), 3);
        for (got, w) in s.per_case.values().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
        let mean = want.iter().sum::<f64>() / 3.0;
        let std = (want.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((s.mean - mean).abs() < 1e-12 && (s.std - std).abs() < 1e-12);
        let perfect = evaluate_segmentation(&refs, &refs).unwrap();
        assert_eq!((perfect.mean, perfect.std), (1.0, 0.0));
    }

    #[test]
    fn unpaired_cases_are_listed() {
        let a = ids(&[mask(&[1]), mask(&[1])]);
        let mut b = ids(&[mask(&[1])]);
        b.insert("extra".into(), mask(&[0]));
        match evaluate_segmentation(&a, &b) {
            Err(Error::Unpaired(v)) => assert_eq!(v, vec!["c01".to_string(), "extra".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    fn refs(values: &[(&str, f64)]) -> BTreeMap<String, ReferenceP> {
        ids(&values
            .iter()
            .map(|&(s, p)| ReferenceP {
                source_dataset: s.into(),
                p_ref: p,
            })
            .collect::<Vec<_>>())
    }

    #[test]
    fn quantification_errors() {
        let r = refs(&[("a", 10.0), ("b", 20.0)]);
        let q = evaluate_quantification(&ids(&[12.0, 16.0]), &r).unwrap();
        assert_eq!(q.mae, 3.0);
        assert_eq!(q.per_source["a"].mae, 2.0);
        assert_eq!(q.per_source["b"].mae, 4.0);
        assert_eq!(evaluate_quantification(&ids(&[10.0, 20.0]), &r).unwrap().mae, 0.0);
        assert!(matches!(evaluate_quantification(&ids(&[1.0]), &r), Err(Error::Unpaired(_))));
    }

    #[test]
    fn severity_table_row() {
        let reference: Vec<ReferenceScore> = (0..50).map(|i| ReferenceScore::exact(1 + (i % 5) as u8)).collect();
        let pred: Vec<u8> = reference.iter().enumerate().map(|(i, r)| if i < 3 { r.lo + 1 } else { r.lo }).collect();
        // three off-by-one: 1->2, 2->3, 3->4
        assert_eq!(&pred[..3], &[2, 3, 4]);
        let s = evaluate_ctss(&ids(&pred), &ids(&reference)).unwrap();
        assert_eq!((s.correct, s.total), (47, 50));
        assert_eq!(s.accuracy, 47.0 / 50.0);
        assert_eq!(s.misclassified.get(&1), Some(&3));
        assert_eq!(s.misclassified.get(&2), None);
        assert_eq!(s.table_row(), "47/50 | 3/50 | 0");

        let all = evaluate_ctss(&ids(&[1, 2, 3]), &ids(&[1, 2, 3].map(ReferenceScore::exact))).unwrap();
        assert_eq!(all.accuracy, 1.0);
        assert!(all.misclassified.is_empty());
        let two = evaluate_ctss(&ids(&[1, 5]), &ids(&[3, 5].map(ReferenceScore::exact))).unwrap();
        assert_eq!(two.misclassified.get(&2), Some(&1));
        assert!(evaluate_ctss(&ids(&[6]), &ids(&[ReferenceScore::exact(5)])).is_err());
        assert!(evaluate_ctss(&ids(&[0]), &ids(&[ReferenceScore::exact(1)])).is_err());
    }

    #[test]
    fn mosmed_mapping() {
        assert_eq!(mosmed_ctss_reference(2).unwrap(), ReferenceScore::exact(3));
        assert_eq!(mosmed_ctss_reference(0).unwrap(), ReferenceScore::exact(0));
        let one = mosmed_ctss_reference(1).unwrap();
        assert!(one.contains(1) && one.contains(2) && !one.contains(3));
        let s = evaluate_ctss(&ids(&[2]), &ids(&[one])).unwrap();
        assert_eq!(s.correct, 1);
        assert!(mosmed_ctss_reference(5).is_err());
        assert_eq!([0.0, 0.1, 25.0, 25.1, 50.0, 75.0, 75.1, 100.0].map(|p| mosmed_category(p).unwrap()), [0, 1, 1, 2, 2, 3, 4, 4]);
    }

    #[test]
    fn mosmed_quarter_boundaries_disagree_with_score_thresholds() {
        // the category bounds are right-closed, the score thresholds left-closed
        for p in [25.0, 50.0, 75.0] {
            let set = mosmed_ctss_reference(mosmed_category(p).unwrap()).unwrap();
            assert!(!set.contains(ct_severity_score(p).unwrap().value()), "P = {p}");
        }
    }

    proptest! {
        #[test]
        fn mosmed_consistent_with_scores(p in 0.0f64..=100.0) {
            prop_assume!(p > 0.0 && p != 25.0 && p != 50.0 && p != 75.0);
            let set = mosmed_ctss_reference(mosmed_category(p).unwrap()).unwrap();
            prop_assert!(set.contains(ct_severity_score(p).unwrap().value()));
        }

        #[test]
        fn summaries_match_recount(
            cases in prop::collection::vec((1u8..=5, 1u8..=5, 0.0f64..100.0, 0.0f64..100.0, 0usize..2), 5),
        ) {
            let pred: BTreeMap<String, u8> = ids(&cases.iter().map(|c| c.0).collect::<Vec<_>>());
            let reference = ids(&cases.iter().map(|c| ReferenceScore::exact(c.1)).collect::<Vec<_>>());
            let s = evaluate_ctss(&pred, &reference).unwrap();
            let correct = cases.iter().filter(|c| c.0 == c.1).count();
            prop_assert_eq!(s.correct, correct);
            prop_assert_eq!(s.accuracy, correct as f64 / 5.0);
            prop_assert_eq!(s.misclassified.values().sum::<usize>(), 5 - correct);
            for (k, n) in &s.misclassified {
                prop_assert_eq!(*n, cases.iter().filter(|c| c.0.abs_diff(c.1) == *k).count());
            }

            let p_pred = ids(&cases.iter().map(|c| c.2).collect::<Vec<_>>());
            let p_ref = ids(&cases.iter().map(|c| ReferenceP { source_dataset: c.4.to_string(), p_ref: c.3 }).collect::<Vec<_>>());
            let q = evaluate_quantification(&p_pred, &p_ref).unwrap();
            let brute = cases.iter().map(|c| (c.2 - c.3).abs()).sum::<f64>() / 5.0;
            prop_assert!((q.mae - brute).abs() < 1e-9);
            let recombined = q.per_source.values().map(|s| s.mae * s.cases as f64).sum::<f64>() / 5.0;
            prop_assert!((recombined - q.mae).abs() < 1e-9);
        }
    }

    #[test]
    fn case_evaluation_derives_references() {
        let lungs = mask(&[1, 1, 1, 1, 0]);
        let lesions = mask(&[1, 0, 0, 0, 0]);
        let pred = BTreeMap::from([(
            "a".to_string(),
            CasePrediction {
                lungs: Some(lungs.clone()),
                lesions: Some(lesions.clone()),
                p: 25.0,
                ct_ss: CtSeverityScore::new(3).unwrap(),
            },
        )]);
        let reference = BTreeMap::from([(
            "a".to_string(),
            CaseReference {
                source_dataset: "s".into(),
                lungs: Some(lungs),
                lesions: Some(lesions),
                ..Default::default()
            },
        )]);
        let s = evaluate_cases(&pred, &reference).unwrap();
        assert_eq!(s.lung_dice.as_ref().unwrap().mean, 1.0);
        assert_eq!(s.quantification.as_ref().unwrap().mae, 0.0);
        assert_eq!(s.ct_ss.as_ref().unwrap().correct, 1);
        assert_eq!(s.per_case[0].p_ref, Some(25.0));
        let text = s.to_text();
        assert!(text.contains("Accuracy | 1-class misclassification | 2-class misclassification"));
        assert!(text.contains("1/1 | 0 | 0"));
    }

    #[test]
    fn overlay_marks_contours() {
        let dims = [8, 8, 2];
        let vol = CtVolume::filled(dims, [1.0; 3], -800.0).unwrap();
        let r = BinaryMask3D::from_fn(dims, [1.0; 3], |x, y, z| z == 1 && (2..6).contains(&x) && (2..6).contains(&y)).unwrap();
        let (w, h, rgb) = overlay_slice(&vol, &r.like(false), &r).unwrap();
        assert_eq!((w, h, rgb.len()), (8, 8, 192));
        let px = |x: usize, y: usize| &rgb[(y * 8 + x) * 3..][..3];
        assert_eq!(px(2, 2), &[0, 255, 0]);
        assert_eq!(px(3, 3), px(0, 0));
        let dir = tempfile::tempdir().unwrap();
        write_overlay_png(dir.path().join("o.png"), &vol, &r, &r).unwrap();
        assert!(dir.path().join("o.png").metadata().unwrap().len() > 0);
    }
}
