//! Ranking, average precision and distance diagnostics.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::batch::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::hashing::{hamming_distance, HashCode, HashCodes};
use crate::linalg::dist;

pub const HISTOGRAM_BINS: usize = 50;

/// Gallery indices in ascending distance order, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub order: Vec<usize>,
}

impl RankedList {
    /// Relevance flags along the ranking for a query of class `label`.
    pub fn relevance(&self, gallery_labels: &[usize], label: usize) -> Vec<bool> {
        self.order.iter().map(|&i| gallery_labels[i] == label).collect()
    }
}

pub fn rank_euclidean(query: &[f64], gallery: &EmbeddingBatch) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if query.len() != gallery.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has dim {}, gallery {}",
            query.len(),
            gallery.dim()
        )));
    }
    let d: Vec<f64> = (0..gallery.len()).map(|i| dist(query, gallery.vector(i))).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    Ok(RankedList { order })
}

pub fn rank_hamming(query: &HashCode, gallery: &HashCodes) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    let d = gallery
        .codes()
        .iter()
        .map(|c| hamming_distance(query, c))
        .collect::<Result<Vec<u32>>>()?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by_key(|&i| d[i]);
    Ok(RankedList { order })
}

/// Non-interpolated AP over the full ranking.
pub fn average_precision(relevance: &[bool], n_relevant: usize) -> Result<f64> {
    if n_relevant == 0 {
        return Err(Error::InvalidParameter("average precision needs a relevant item".into()));
    }
    let found = relevance.iter().filter(|&&r| r).count();
    if found != n_relevant {
        return Err(Error::InvalidParameter(format!(
            "{found} relevant flags but n_relevant = {n_relevant}"
        )));
    }
    Ok(truncated_ap(relevance, n_relevant, relevance.len()))
}

/// AP over the first `k` positions, normalised by `min(n_relevant, k)`.
fn truncated_ap(relevance: &[bool], n_relevant: usize, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().take(k).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / n_relevant.min(k) as f64
}

pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > relevance.len() {
        return Err(Error::InvalidParameter(format!(
            "precision@{k} on a ranking of length {}",
            relevance.len()
        )));
    }
    Ok(relevance[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
}

/// Expected AP of a uniformly random ranking of `n` items, `r` of them relevant.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let n_f = n as f64;
    (h + (n_f - h) * (r as f64 - 1.0) / (n_f - 1.0)) / n_f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAt {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub precision: Vec<PrecisionAt>,
    pub queries: usize,
    pub gallery: usize,
    /// MAP of a uniformly random ranking over the same queries.
    pub random_map: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// Truncate AP to the top `k` positions.
    pub top_k: Option<usize>,
    pub precision_at: Vec<usize>,
}

fn score<F>(query_labels: &[usize], gallery_labels: &[usize], rank: F, opts: &EvalOptions) -> Result<RetrievalScores>
where
    F: Fn(usize) -> Result<RankedList>,
{
    if query_labels.is_empty() {
        return Err(Error::Empty("queries"));
    }
    if gallery_labels.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if opts.top_k == Some(0) {
        return Err(Error::InvalidParameter("top_k must be >= 1".into()));
    }
    let mut ap_sum = 0.0;
    let mut random_sum = 0.0;
    let mut p_sums = vec![0.0; opts.precision_at.len()];
    for (q, &label) in query_labels.iter().enumerate() {
        let n_rel = gallery_labels.iter().filter(|&&l| l == label).count();
        if n_rel == 0 {
            return Err(Error::InvalidParameter(format!(
                "query class {label} does not occur in the gallery"
            )));
        }
        let rel = rank(q)?.relevance(gallery_labels, label);
        ap_sum += match opts.top_k {
            Some(k) => truncated_ap(&rel, n_rel, k),
            None => average_precision(&rel, n_rel)?,
        };
        random_sum += expected_random_ap(gallery_labels.len(), n_rel);
        for (s, &k) in p_sums.iter_mut().zip(&opts.precision_at) {
            *s += precision_at_k(&rel, k)?;
        }
    }
    let n = query_labels.len() as f64;
    Ok(RetrievalScores {
        map: ap_sum / n,
        precision: opts
            .precision_at
            .iter()
            .zip(p_sums)
            .map(|(&k, s)| PrecisionAt { k, value: s / n })
            .collect(),
        queries: query_labels.len(),
        gallery: gallery_labels.len(),
        random_map: random_sum / n,
    })
}

/// Euclidean retrieval of `queries` against `gallery`, relevance by label.
pub fn evaluate_euclidean(queries: &EmbeddingBatch, gallery: &EmbeddingBatch, opts: &EvalOptions) -> Result<RetrievalScores> {
    score(queries.labels(), gallery.labels(), |q| rank_euclidean(queries.vector(q), gallery), opts)
}

pub fn evaluate_hamming(queries: &HashCodes, gallery: &HashCodes, opts: &EvalOptions) -> Result<RetrievalScores> {
    score(queries.labels(), gallery.labels(), |q| rank_hamming(queries.code(q), gallery), opts)
}

pub fn mean_average_precision(queries: &EmbeddingBatch, gallery: &EmbeddingBatch) -> Result<f64> {
    evaluate_euclidean(queries, gallery, &EvalOptions::default()).map(|s| s.map)
}

pub fn mean_average_precision_hamming(queries: &HashCodes, gallery: &HashCodes) -> Result<f64> {
    evaluate_hamming(queries, gallery, &EvalOptions::default()).map(|s| s.map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistances {
    pub class: usize,
    pub count: usize,
    /// Largest within-class distance; absent for a single instance.
    pub max_intra: Option<f64>,
    /// Smallest distance from any member to another class.
    pub min_inter: f64,
    pub p1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub classes: Vec<ClassDistances>,
    /// Per instance: distance to the nearest other-class instance.
    #[serde(skip)]
    pub min_inter: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    /// Max intra-class distance is below min inter-class distance for every class.
    pub p1: bool,
}

impl DistanceReport {
    pub fn write_histogram_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for b in &self.histogram {
            out.serialize(b)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_classes_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "count", "max_intra", "min_inter", "p1"])?;
        for c in &self.classes {
            out.write_record([
                c.class.to_string(),
                c.count.to_string(),
                c.max_intra.map_or(String::new(), |v| v.to_string()),
                c.min_inter.to_string(),
                c.p1.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Uniform bins over `[0, max]`; the maximum falls in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = if width > 0.0 { ((v / width) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_left: i as f64 * width,
            bin_right: if i + 1 == bins { max } else { (i + 1) as f64 * width },
            count,
        })
        .collect()
}

/// Pairwise distance diagnostics over all instances of `emb`.
pub fn distance_report(emb: &EmbeddingBatch) -> Result<DistanceReport> {
    let labels: BTreeSet<usize> = emb.labels().iter().copied().collect();
    if labels.len() < 2 {
        return Err(Error::InvalidParameter("distance report needs at least 2 classes".into()));
    }
    let n = emb.len();
    let index: Vec<usize> = emb.labels().iter().map(|l| labels.range(..l).count()).collect();
    let k = labels.len();
    let mut max_intra: Vec<Option<f64>> = vec![None; k];
    let mut min_inter = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist(emb.vector(i), emb.vector(j));
            if index[i] == index[j] {
                let slot = &mut max_intra[index[i]];
                *slot = Some(slot.map_or(d, |m: f64| m.max(d)));
            } else {
                min_inter[i] = min_inter[i].min(d);
                min_inter[j] = min_inter[j].min(d);
            }
        }
    }
    let mut classes: Vec<ClassDistances> = labels
        .iter()
        .map(|&class| ClassDistances {
            class,
            count: 0,
            max_intra: None,
            min_inter: f64::INFINITY,
            p1: true,
        })
        .collect();
    for i in 0..n {
        let c = &mut classes[index[i]];
        c.count += 1;
        c.min_inter = c.min_inter.min(min_inter[i]);
    }
    for (c, m) in classes.iter_mut().zip(max_intra) {
        c.max_intra = m;
        c.p1 = m.is_none_or(|m| m < c.min_inter);
    }
    let p1 = classes.iter().all(|c| c.p1);
    Ok(DistanceReport {
        histogram: histogram(&min_inter, HISTOGRAM_BINS),
        classes,
        min_inter,
        p1,
    })
}

/// Machine-readable output of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub map: f64,
    pub precision: Vec<PrecisionAt>,
    pub queries: usize,
    pub gallery: usize,
    pub random_map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distances: Option<DistanceReport>,
}

impl MetricsReport {
    pub fn new(mode: impl Into<String>, scores: RetrievalScores, distances: Option<DistanceReport>) -> Self {
        Self {
            mode: mode.into(),
            map: scores.map,
            precision: scores.precision,
            queries: scores.queries,
            gallery: scores.gallery,
            random_map: scores.random_map,
            distances,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn batch(rows: &[&[f64]], labels: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch::single_domain(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn euclidean_ranking_examples() {
        let g = batch(&[&[0.0, 0.0], &[3.0, 0.0]], &[0, 1]);
        assert_eq!(rank_euclidean(&[1.0, 0.0], &g).unwrap().order, vec![0, 1]);
        assert_eq!(rank_euclidean(&[3.0, 0.0], &g).unwrap().order, vec![1, 0]);
        assert_eq!(rank_euclidean(&[1.5, 0.0], &g).unwrap().order, vec![0, 1]);
        let empty = batch(&[&[0.0, 0.0]], &[0]).select(&[]);
        assert!(rank_euclidean(&[0.0, 0.0], &empty).is_err());
    }

    #[test]
    fn hamming_ranking_examples() {
        let c = |s: &str| HashCode::from_bools(&s.chars().map(|c| c == '1').collect::<Vec<_>>());
        let g = HashCodes::new(4, vec![c("0000"), c("1110")], vec![0, 1]).unwrap();
        assert_eq!(rank_hamming(&c("1000"), &g).unwrap().order, vec![0, 1]);
        assert_eq!(rank_hamming(&c("1110"), &g).unwrap().order, vec![1, 0]);
        let tie = HashCodes::new(4, vec![c("1100"), c("0011")], vec![0, 1]).unwrap();
        assert_eq!(rank_hamming(&c("1001"), &tie).unwrap().order, vec![0, 1]);
        assert!(rank_hamming(&c("1"), &g).is_err());
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true, false, false], 2).unwrap(), 1.0);
        assert!((average_precision(&[true, false, true], 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false, false, true], 1).unwrap(), 0.25);
        assert!(average_precision(&[false, false], 0).is_err());
        assert!(average_precision(&[true, true], 1).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[false, false], 2).unwrap(), 0.0);
        assert_eq!(precision_at_k(&[true, false, true, false], 4).unwrap(), 0.5);
        assert!(precision_at_k(&[true], 2).is_err());
        assert!(precision_at_k(&[true], 0).is_err());
    }

    #[test]
    fn map_examples() {
        let g = batch(&[&[0.0], &[1.0], &[10.0], &[11.0]], &[0, 0, 1, 1]);
        let q = batch(&[&[0.5], &[10.5]], &[0, 1]);
        assert_eq!(mean_average_precision(&q, &g).unwrap(), 1.0);
        let q1 = batch(&[&[8.0]], &[0]);
        let rel = rank_euclidean(&[8.0], &g).unwrap().relevance(g.labels(), 0);
        let ap = average_precision(&rel, 2).unwrap();
        assert_eq!(mean_average_precision(&q1, &g).unwrap(), ap);
        let q2 = batch(&[&[0.5], &[8.0]], &[0, 0]);
        assert!((mean_average_precision(&q2, &g).unwrap() - (1.0 + ap) / 2.0).abs() < 1e-15);
        let missing = batch(&[&[0.0]], &[5]);
        assert!(mean_average_precision(&missing, &g).is_err());
    }

    #[test]
    fn truncated_map_and_precision_option() {
        let g = batch(&[&[0.0], &[1.0], &[10.0], &[11.0]], &[0, 1, 0, 1]);
        let q = batch(&[&[0.2]], &[0]);
        let full = evaluate_euclidean(&q, &g, &EvalOptions::default()).unwrap();
        assert!((full.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let opts = EvalOptions {
            top_k: Some(2),
            precision_at: vec![1, 2],
        };
        let cut = evaluate_euclidean(&q, &g, &opts).unwrap();
        assert_eq!(cut.map, 0.5);
        assert_eq!(cut.precision, vec![PrecisionAt { k: 1, value: 1.0 }, PrecisionAt { k: 2, value: 0.5 }]);
    }

    #[test]
    fn random_baseline_matches_enumeration() {
        // all 4!/(2!2!) = 6 placements of 2 relevant items among 4
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..4 {
            for b in (a + 1)..4 {
                let rel: Vec<bool> = (0..4).map(|i| i == a || i == b).collect();
                total += average_precision(&rel, 2).unwrap();
                count += 1;
            }
        }
        assert!((expected_random_ap(4, 2) - total / count as f64).abs() < 1e-15);
        assert_eq!(expected_random_ap(5, 5), 1.0);
    }

    #[test]
    fn distance_report_two_points() {
        let e = batch(&[&[0.0, 0.0], &[0.0, 0.0], &[10.0, 0.0], &[10.0, 0.0]], &[0, 0, 1, 1]);
        let r = distance_report(&e).unwrap();
        assert_eq!(r.min_inter, vec![10.0; 4]);
        assert_eq!(r.classes[0].max_intra, Some(0.0));
        assert!(r.p1);
        assert_eq!(r.histogram.len(), HISTOGRAM_BINS);
        assert_eq!(r.histogram[49].count, 4);
        assert_eq!(r.histogram[49].bin_right, 10.0);

        let single = batch(&[&[0.0], &[1.0], &[1.5]], &[0, 1, 1]);
        let r = distance_report(&single).unwrap();
        assert_eq!(r.classes[0].max_intra, None);
        assert!(r.classes[0].p1);
        assert!(r.classes[1].p1 == (0.5 < 1.0));

        let overlap = batch(&[&[0.0], &[3.0], &[1.0], &[4.0]], &[0, 0, 1, 1]);
        assert!(!distance_report(&overlap).unwrap().p1);
        assert!(distance_report(&batch(&[&[0.0], &[1.0]], &[2, 2])).is_err());
    }

    #[test]
    fn histogram_csv_header() {
        let e = batch(&[&[0.0], &[2.0]], &[0, 1]);
        let r = distance_report(&e).unwrap();
        let mut buf = Vec::new();
        r.write_histogram_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("bin_left,bin_right,count\n"));
        assert_eq!(s.lines().count(), 51);
    }

    #[test]
    fn sampled_regions_match_binary_bounds() {
        use crate::geometry::{binary_margin_bounds, sample_regions};
        use crate::losses::PrototypeSet;
        let protos = PrototypeSet::new(Matrix::from_rows(&[[0.0, 0.0], [5.0, 0.0]]).unwrap()).unwrap();
        let regions = sample_regions(&protos, 4.0, 6000, 3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (y, r) in regions.iter().enumerate() {
            rows.extend(r.iter_rows().map(|x| x.to_vec()));
            labels.extend(std::iter::repeat_n(y, r.rows()));
        }
        let report = distance_report(&batch(&rows.iter().map(|r| &r[..]).collect::<Vec<_>>(), &labels)).unwrap();
        let bounds = binary_margin_bounds(4.0, 5.0).unwrap();
        for c in &report.classes {
            let intra = c.max_intra.unwrap();
            assert!((intra - bounds.max_intra).abs() / bounds.max_intra < 0.02, "{intra}");
            assert!((c.min_inter - bounds.min_inter).abs() / bounds.min_inter < 0.02, "{}", c.min_inter);
        }
        assert!(report.p1);
    }
}
